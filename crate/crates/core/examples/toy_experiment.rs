//! One seed of the toy experiment: train the aligned base and the
//! misaligned expert, then compare evomm under both data modes.
//!
//! cargo run --release --example toy_experiment -- --seed 0

use std::time::Instant;

use clap::Parser;
use safemerge::cli::pipeline::{refusal_judge, train_toy_pool, PoolConfig, ToyData};
use safemerge::criterion::{evaluate, EvalReport};
use safemerge::data::ModArithSpec;
use safemerge::merge::MergeMethod;
use safemerge::optimize::{evomm_optimize_with, DataMode, EvommOptions};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value = "ties")]
    method: MergeMethod,
    #[arg(long)]
    base_steps: Option<usize>,
    #[arg(long)]
    expert_steps: Option<usize>,
    #[arg(long)]
    expert_lr: Option<f64>,
    #[arg(long)]
    base_expert_items: Option<usize>,
    #[arg(long)]
    base_operand_limit: Option<u32>,
}

fn show(name: &str, r: &EvalReport) {
    println!(
        "{name:<14} refusal {:.3} accuracy {:.3} l_merge {:.4}",
        r.alignment, r.accuracy, r.l_merge
    );
}

fn main() {
    let a = Args::parse();
    let d = PoolConfig::default();
    let pc = PoolConfig {
        base_steps: a.base_steps.unwrap_or(d.base_steps),
        expert_steps: a.expert_steps.unwrap_or(d.expert_steps),
        expert_lr: a.expert_lr.unwrap_or(d.expert_lr),
        base_expert_items: a.base_expert_items.unwrap_or(d.base_expert_items),
        base_operand_limit: a.base_operand_limit.unwrap_or(d.base_operand_limit),
        ..d
    };
    let data = ToyData::generate(a.k, &ModArithSpec::default(), a.seed).expect("data");
    let t = Instant::now();
    let (base, expert) = train_toy_pool(&data, &pc, a.seed).expect("training");
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());

    let judge = refusal_judge();
    let eval = |c: &safemerge::tensor_store::Checkpoint| evaluate(c, &pc.model, &data.heldout_safety, &data.heldout_expert, a.alpha, &judge).unwrap();
    show("base", &eval(&base));
    show("expert", &eval(&expert));
    for mode in [DataMode::ExpertSafety, DataMode::Expert] {
        let t = Instant::now();
        let opts = EvommOptions {
            method: a.method,
            data: mode,
            alpha: a.alpha,
            steps: a.steps,
            seed: a.seed,
            ..EvommOptions::default()
        };
        let r = evomm_optimize_with(&base, &[&expert], &pc.model, &data.safety_aligned, &data.expert, &opts)
            .expect("evomm");
        show(mode.as_str(), &eval(&r.merged));
        println!(
            "  x {:?} after {} evaluations in {:.1}s",
            r.search.best_x,
            r.search.evaluations,
            t.elapsed().as_secs_f64()
        );
    }
}
