//! Command-line front end. `safemerge <command> --help` lists the flags of
//! each command; the binary is a thin wrapper around [`run`].

pub mod pipeline;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::criterion::{evaluate, EvalReport};
use crate::data::ModArithSpec;
use crate::error::{Error, Result};
use crate::merge::{MergeMethod, MergeRecipe, Merger};
use crate::optimize::{
    default_grid, eval_subset, evomm_optimize_with, grid_search, lm_cocktail_weights, objective_report, recipe_from_point,
    select_index, DataMode, EvommOptions, SelectBy, DEFAULT_SIGMA0,
};
use crate::tensor_store::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::toy_lm::{ToyLm, ToyLmConfig};
use pipeline::{refusal_judge, train_toy_pool, PoolConfig, ToyData, BASE_CKPT, EXPERT_CKPT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_OPTIMIZER: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "safemerge", version, about = "Safety-aware merging of fine-tuned models")]
pub struct Cli {
    /// Root seed; every random choice derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Weight of the domain loss in L_safety + alpha * L_expert.
    #[arg(long, global = true, default_value_t = 0.3)]
    pub alpha: f64,
    /// Training pairs per generated dataset.
    #[arg(long, global = true, default_value_t = 1000)]
    pub k: usize,
    /// Optimizer generations.
    #[arg(long, global = true, default_value_t = 100)]
    pub steps: usize,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic safety and domain datasets.
    GenData(GenDataArgs),
    /// Train the aligned base and the misaligned expert.
    TrainToy(TrainToyArgs),
    /// Apply a recipe to a base and experts.
    Merge(MergeArgs),
    /// Search merge weights.
    Optimize(OptimizeArgs),
    /// Score a checkpoint on the held-out data.
    Eval(EvalArgs),
    /// Print a checkpoint's tensors and metadata.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 7)]
    pub modulus: u32,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// Directory with the generated datasets (defaults to --out-dir).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub base_steps: Option<usize>,
    #[arg(long)]
    pub expert_steps: Option<usize>,
    /// Learning rate of the base.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub expert_lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub base_expert_items: Option<usize>,
    /// Domain pairs reach the base only if both operands are below this.
    #[arg(long)]
    pub base_operand_limit: Option<u32>,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, default_value_t = 2)]
    pub n_heads: usize,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub recipe: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    /// Expert checkpoint; repeat for several experts.
    #[arg(long = "expert", required = true)]
    pub experts: Vec<PathBuf>,
    /// Output path (defaults to <out-dir>/merged.safetensors).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Strategy {
    Grid,
    Evomm,
    LmCocktail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataArg {
    Expert,
    #[value(name = "expert+safety")]
    ExpertSafety,
}

impl From<DataArg> for DataMode {
    fn from(d: DataArg) -> Self {
        match d {
            DataArg::Expert => DataMode::Expert,
            DataArg::ExpertSafety => DataMode::ExpertSafety,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectArg {
    #[value(name = "l_merge")]
    LMerge,
    Accuracy,
    Alignment,
}

impl From<SelectArg> for SelectBy {
    fn from(s: SelectArg) -> Self {
        match s {
            SelectArg::LMerge => SelectBy::LMerge,
            SelectArg::Accuracy => SelectBy::Accuracy,
            SelectArg::Alignment => SelectBy::Alignment,
        }
    }
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long, value_enum, default_value_t = Strategy::Evomm)]
    pub strategy: Strategy,
    #[arg(long, default_value = "ties")]
    pub method: MergeMethod,
    #[arg(long, value_enum, default_value_t = DataArg::ExpertSafety)]
    pub data: DataArg,
    /// Base checkpoint (defaults to <out-dir>/base.safetensors).
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Expert checkpoints (defaults to <out-dir>/expert.safetensors).
    #[arg(long = "expert")]
    pub experts: Vec<PathBuf>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SelectArg::LMerge)]
    pub select_by: SelectArg,
    #[arg(long, default_value_t = DEFAULT_SIGMA0)]
    pub sigma0: f64,
    /// Score candidates on a fixed seeded subset of at most this many pairs
    /// per dataset.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Exit with code 4 when more than this fraction of evaluations is
    /// non-finite.
    #[arg(long, default_value_t = 0.5)]
    pub max_nonfinite: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Optimizer(_) => EXIT_OPTIMIZER,
        Error::Format { .. } | Error::Invalid(_) | Error::Incompatible(_) => EXIT_VALIDATION,
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; errors are reported on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<i32> {
    if let Some(n) = cli.threads {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    if !(cli.alpha >= 0.0 && cli.alpha.is_finite()) {
        return Err(Error::invalid(format!("--alpha {} must be finite and >= 0", cli.alpha)));
    }
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(cli, a),
        Command::TrainToy(a) => cmd_train_toy(cli, a),
        Command::Merge(a) => cmd_merge(cli, a),
        Command::Optimize(a) => cmd_optimize(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(ckpt, path)
}

fn model_config(ckpt: &Checkpoint) -> Result<ToyLmConfig> {
    ToyLmConfig::from_metadata(&ckpt.metadata)
}

fn report_json(r: &EvalReport) -> String {
    serde_json::to_string_pretty(r).expect("report serialization is infallible")
}

pub fn cmd_gen_data(cli: &Cli, a: &GenDataArgs) -> Result<i32> {
    let spec = ModArithSpec {
        modulus: a.modulus,
        ..ModArithSpec::default()
    };
    let data = ToyData::generate(cli.k, &spec, cli.seed)?;
    data.write(&cli.out_dir)?;
    println!(
        "wrote {} safety, {} expert and {} held-out pairs to {}",
        data.safety_aligned.len(),
        data.expert.len(),
        data.heldout_safety.len() + data.heldout_expert.len(),
        cli.out_dir.display()
    );
    Ok(EXIT_OK)
}

pub fn cmd_train_toy(cli: &Cli, a: &TrainToyArgs) -> Result<i32> {
    let d = PoolConfig::default();
    let pc = PoolConfig {
        model: ToyLmConfig {
            d_model: a.d_model,
            n_layers: a.n_layers,
            n_heads: a.n_heads,
            ..ToyLmConfig::default()
        },
        base_steps: a.base_steps.unwrap_or(d.base_steps),
        expert_steps: a.expert_steps.unwrap_or(d.expert_steps),
        lr: a.lr.unwrap_or(d.lr),
        expert_lr: a.expert_lr.unwrap_or(d.expert_lr),
        batch: a.batch.unwrap_or(d.batch),
        base_expert_items: a.base_expert_items.unwrap_or(d.base_expert_items),
        base_operand_limit: a.base_operand_limit.unwrap_or(d.base_operand_limit),
    };
    pc.model.validate()?;
    let data_dir = a.data_dir.as_deref().unwrap_or(&cli.out_dir);
    let data = ToyData::load(data_dir, pc.model.vocab_size)?;
    let (base, expert) = train_toy_pool(&data, &pc, cli.seed)?;
    save(&base, &cli.out_dir.join(BASE_CKPT))?;
    save(&expert, &cli.out_dir.join(EXPERT_CKPT))?;
    let judge = refusal_judge();
    for (name, c) in [("base", &base), ("expert", &expert)] {
        let r = evaluate(c, &pc.model, &data.heldout_safety, &data.heldout_expert, cli.alpha, &judge)?;
        println!("{name}: alignment {:.3} accuracy {:.3}", r.alignment, r.accuracy);
    }
    Ok(EXIT_OK)
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    paths.iter().map(load_checkpoint).collect()
}

pub fn cmd_merge(cli: &Cli, a: &MergeArgs) -> Result<i32> {
    let recipe = MergeRecipe::load(&a.recipe)?;
    let base = load_checkpoint(&a.base)?;
    let experts = load_all(&a.experts)?;
    let refs: Vec<&Checkpoint> = experts.iter().collect();
    let merged = Merger::new(&base, &refs)?.merge(&recipe)?;
    let out = a.output.clone().unwrap_or_else(|| cli.out_dir.join("merged.safetensors"));
    save(&merged, &out)?;
    println!(
        "{} merge of {} models: {} tensors, {} parameters -> {}",
        recipe.method,
        refs.len() + 1,
        merged.len(),
        merged.num_params(),
        out.display()
    );
    Ok(EXIT_OK)
}

struct Candidate {
    recipe: MergeRecipe,
    merged: Checkpoint,
}

pub fn cmd_optimize(cli: &Cli, a: &OptimizeArgs) -> Result<i32> {
    let base_path = a.base.clone().unwrap_or_else(|| cli.out_dir.join(BASE_CKPT));
    let expert_paths = if a.experts.is_empty() {
        vec![cli.out_dir.join(EXPERT_CKPT)]
    } else {
        a.experts.clone()
    };
    let base = load_checkpoint(&base_path)?;
    let experts = load_all(&expert_paths)?;
    let refs: Vec<&Checkpoint> = experts.iter().collect();
    let cfg = model_config(&base)?;
    let data = ToyData::load(a.data_dir.as_deref().unwrap_or(&cli.out_dir), cfg.vocab_size)?;
    let mode = DataMode::from(a.data);
    let select = SelectBy::from(a.select_by);
    let judge = refusal_judge();
    let heldout_eval =
        |c: &Checkpoint| evaluate(c, &cfg, &data.heldout_safety, &data.heldout_expert, cli.alpha, &judge);
    let (d_safety, d_expert) = match a.batch {
        Some(0) => return Err(Error::invalid("--batch must be positive")),
        Some(b) => (
            eval_subset(&data.safety_aligned, b, cli.seed, "safety"),
            eval_subset(&data.expert, b, cli.seed, "expert"),
        ),
        None => (data.safety_aligned.clone(), data.expert.clone()),
    };
    let objective = |c: &Checkpoint| -> Result<f64> {
        let model = ToyLm::from_checkpoint(c, &cfg)?;
        Ok(objective_report(&model, mode, &d_safety, &d_expert, cli.alpha)?.l_merge)
    };
    let out = &cli.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut code = EXIT_OK;

    let mut candidates: Vec<Candidate> = Vec::new();
    match a.strategy {
        Strategy::LmCocktail => {
            let mut pool = vec![&base];
            pool.extend(refs.iter().copied());
            let set = match mode {
                DataMode::Expert => d_expert.clone(),
                DataMode::ExpertSafety => d_safety.concat(&d_expert),
            };
            let lambdas = lm_cocktail_weights(&pool, &cfg, &set)?;
            let recipe = MergeRecipe {
                method: MergeMethod::LinearSoup,
                lambdas,
                hyper: Default::default(),
                seed: cli.seed,
            };
            let merged = Merger::new(&base, &refs)?.merge(&recipe)?;
            candidates.push(Candidate { recipe, merged });
        }
        Strategy::Grid => {
            let grid = default_grid(a.method, refs.len())?;
            let result = grid_search(&base, &refs, a.method, objective, &grid, cli.seed)?;
            write_text(&out.join("grid.csv"), &result.table_csv())?;
            println!("grid: {} points, best {:?}", result.table.len(), result.table[result.best_index].point);
            let merger = Merger::new(&base, &refs)?;
            let mut order: Vec<usize> = vec![result.best_index];
            if select != SelectBy::LMerge {
                order = (0..result.table.len()).collect();
            }
            for i in order {
                let recipe = result.table[i].recipe.clone();
                let merged = merger.merge(&recipe)?;
                candidates.push(Candidate { recipe, merged });
            }
        }
        Strategy::Evomm => {
            let opts = EvommOptions {
                method: a.method,
                data: mode,
                alpha: cli.alpha,
                steps: cli.steps,
                seed: cli.seed,
                sigma0: a.sigma0,
                batch: None,
            };
            let r = evomm_optimize_with(&base, &refs, &cfg, &d_safety, &d_expert, &opts)?;
            write_text(&out.join("history.csv"), &r.search.history_csv())?;
            println!(
                "evomm: {} evaluations, best l_merge {:.6}",
                r.search.evaluations, r.report.l_merge
            );
            if r.search.nonfinite_fraction() > a.max_nonfinite {
                eprintln!(
                    "warning: {:.1}% of evaluations were non-finite",
                    100.0 * r.search.nonfinite_fraction()
                );
                code = EXIT_OPTIMIZER;
            }
            candidates.push(Candidate {
                recipe: r.recipe,
                merged: r.merged,
            });
            if select != SelectBy::LMerge {
                let merger = Merger::new(&base, &refs)?;
                for (x, _) in &r.search.generation_best {
                    let recipe = recipe_from_point(a.method, refs.len(), x, cli.seed);
                    let merged = merger.merge(&recipe)?;
                    candidates.push(Candidate { recipe, merged });
                }
            }
        }
    }

    let reports = candidates
        .iter()
        .map(|c| heldout_eval(&c.merged))
        .collect::<Result<Vec<_>>>()?;
    let pick = select_index(&reports, select).expect("at least one candidate");
    let chosen = &candidates[pick];
    chosen.recipe.save(out.join("recipe.json"))?;
    save(&chosen.merged, &out.join("merged.safetensors"))?;
    write_text(&out.join("report.json"), &report_json(&reports[pick]))?;
    println!("{}", chosen.recipe.to_json());
    println!("{}", report_json(&reports[pick]));
    Ok(code)
}

pub fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&a.model)?;
    let cfg = model_config(&ckpt)?;
    let data = ToyData::load(a.data_dir.as_deref().unwrap_or(&cli.out_dir), cfg.vocab_size)?;
    let r = evaluate(
        &ckpt,
        &cfg,
        &data.heldout_safety,
        &data.heldout_expert,
        cli.alpha,
        &refusal_judge(),
    )?;
    let text = report_json(&r);
    if let Some(p) = &a.output {
        write_text(p, &text)?;
    }
    println!("{text}");
    Ok(EXIT_OK)
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&a.path)?;
    for (name, t) in &ckpt.tensors {
        println!("{name}\t{:?}\t{}", t.shape(), t.len());
    }
    for (k, v) in &ckpt.metadata {
        println!("# {k} = {v}");
    }
    println!("{} tensors, {} parameters", ckpt.len(), ckpt.num_params());
    Ok(EXIT_OK)
}
