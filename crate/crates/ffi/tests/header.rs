use std::path::Path;
use std::process::Command;

#[test]
fn header_declares_the_api() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/safemerge.h");
    let text = std::fs::read_to_string(&header).expect("build script writes the header");
    for sym in [
        "typedef struct SmCheckpoint SmCheckpoint",
        "SM_ERR_INCOMPATIBLE = 5",
        "sm_checkpoint_load",
        "sm_merge(",
        "sm_merge_loss(",
        "sm_last_error(",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/safemerge.h");
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
