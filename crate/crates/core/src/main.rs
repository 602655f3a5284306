fn main() {
    std::process::exit(safemerge::cli::main_with_args(std::env::args_os()));
}
