use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::cma::{cma_es_minimize, CmaResult, SearchSpace};
use crate::criterion::{model_dataset_loss, model_merge_loss, LossReport};
use crate::data::QaDataset;
use crate::error::{Error, Result};
use crate::merge::{Hyper, MergeMethod, MergeRecipe, Merger};
use crate::rng::rng_for;
use crate::tensor_store::Checkpoint;
use crate::toy_lm::{ToyLm, ToyLmConfig};

pub const DENSITY_BOUNDS: (f64, f64) = (0.05, 1.0);
pub const DROP_PROB_BOUNDS: (f64, f64) = (0.0, 0.95);
pub const DEFAULT_SIGMA0: f64 = 0.3;

/// Which datasets the merge objective sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DataMode {
    /// `L_expert` alone: the safety-oblivious baseline.
    #[serde(rename = "expert")]
    Expert,
    /// `L_safety + α·L_expert`.
    #[serde(rename = "expert+safety")]
    ExpertSafety,
}

impl DataMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DataMode::Expert => "expert",
            DataMode::ExpertSafety => "expert+safety",
        }
    }
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DataMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(DataMode::Expert),
            "expert+safety" => Ok(DataMode::ExpertSafety),
            _ => Err(Error::invalid(format!("unknown data mode {s:?}"))),
        }
    }
}

fn check_searchable(method: MergeMethod, n_experts: usize) -> Result<()> {
    if n_experts == 0 {
        return Err(Error::invalid("need at least one expert"));
    }
    match method {
        MergeMethod::LinearSoup => Err(Error::invalid(
            "linear-soup has no task-vector search space; use task-arithmetic",
        )),
        MergeMethod::Slerp if n_experts != 1 => Err(Error::invalid(format!(
            "slerp is only usable when N=2, got N={}",
            n_experts + 1
        ))),
        _ => Ok(()),
    }
}

/// One weight per expert in [0, 1], plus the method's hyperparameters.
pub fn search_space(method: MergeMethod, n_experts: usize) -> Result<SearchSpace> {
    check_searchable(method, n_experts)?;
    let mut names = Vec::new();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    if method == MergeMethod::Slerp {
        names.push("slerp_t".to_string());
        lower.push(0.0);
        upper.push(1.0);
    } else {
        for t in 1..=n_experts {
            names.push(format!("lambda_{t}"));
            lower.push(0.0);
            upper.push(1.0);
        }
    }
    if method.needs_density() {
        names.push("density".into());
        lower.push(DENSITY_BOUNDS.0);
        upper.push(DENSITY_BOUNDS.1);
    }
    if method.needs_drop_prob() {
        names.push("drop_prob".into());
        lower.push(DROP_PROB_BOUNDS.0);
        upper.push(DROP_PROB_BOUNDS.1);
    }
    SearchSpace::new(names, lower, upper)
}

/// Decodes a point of [`search_space`] into a recipe.
pub fn recipe_from_point(method: MergeMethod, n_experts: usize, x: &[f64], seed: u64) -> MergeRecipe {
    if method == MergeMethod::Slerp {
        let mut r = MergeRecipe::slerp(x[0]);
        r.seed = seed;
        return r;
    }
    let mut rest = x[n_experts..].iter().copied();
    let density = method.needs_density().then(|| rest.next().unwrap());
    let drop_prob = method.needs_drop_prob().then(|| rest.next().unwrap());
    MergeRecipe {
        method,
        lambdas: x[..n_experts].to_vec(),
        hyper: Hyper {
            density,
            drop_prob,
            slerp_t: None,
        },
        seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvommOptions {
    pub method: MergeMethod,
    pub data: DataMode,
    pub alpha: f64,
    /// CMA-ES generations.
    pub steps: usize,
    pub seed: u64,
    pub sigma0: f64,
    /// Score candidates on a fixed seeded subset of at most this many pairs
    /// per dataset instead of the full datasets.
    pub batch: Option<usize>,
}

impl Default for EvommOptions {
    fn default() -> Self {
        EvommOptions {
            method: MergeMethod::Ties,
            data: DataMode::ExpertSafety,
            alpha: 0.3,
            steps: 100,
            seed: 0,
            sigma0: DEFAULT_SIGMA0,
            batch: None,
        }
    }
}

/// At most `n` pairs of `dataset`, drawn once from `seed`, in original order.
pub fn eval_subset(dataset: &QaDataset, n: usize, seed: u64, name: &str) -> QaDataset {
    if n >= dataset.len() {
        return dataset.clone();
    }
    let mut rng = rng_for(seed, &format!("evomm/subset/{name}"));
    let mut idx = sample(&mut rng, dataset.len(), n).into_vec();
    idx.sort_unstable();
    QaDataset::new(idx.into_iter().map(|i| dataset.pairs[i].clone()).collect())
}

#[derive(Debug, Clone)]
pub struct EvommResult {
    pub recipe: MergeRecipe,
    pub merged: Checkpoint,
    pub report: LossReport,
    pub space: SearchSpace,
    pub search: CmaResult,
}

/// Objective report of a model under a data mode. In expert-only mode the
/// safety term is absent: `l_safety = 0` and `alpha = 1`, so
/// `l_merge == l_expert`.
pub fn objective_report(
    model: &ToyLm,
    data: DataMode,
    d_safety: &QaDataset,
    d_expert: &QaDataset,
    alpha: f64,
) -> Result<LossReport> {
    match data {
        DataMode::ExpertSafety => model_merge_loss(model, d_safety, d_expert, alpha),
        DataMode::Expert => Ok(LossReport::new(
            0.0,
            model_dataset_loss(model, d_expert)?,
            1.0,
            0,
            d_expert.len(),
        )),
    }
}

/// Searches merge weights and hyperparameters with CMA-ES, minimizing the
/// merged model's loss on the selected data.
pub fn evomm_optimize_with(
    base: &Checkpoint,
    experts: &[&Checkpoint],
    cfg: &ToyLmConfig,
    d_safety: &QaDataset,
    d_expert: &QaDataset,
    opts: &EvommOptions,
) -> Result<EvommResult> {
    if d_expert.is_empty() || (opts.data == DataMode::ExpertSafety && d_safety.is_empty()) {
        return Err(Error::invalid("evomm needs non-empty datasets"));
    }
    if !(opts.alpha >= 0.0 && opts.alpha.is_finite()) {
        return Err(Error::invalid(format!("alpha {} must be finite and >= 0", opts.alpha)));
    }
    if opts.batch == Some(0) {
        return Err(Error::invalid("evomm batch must be positive"));
    }
    let (d_safety, d_expert) = match opts.batch {
        Some(b) => (
            &eval_subset(d_safety, b, opts.seed, "safety"),
            &eval_subset(d_expert, b, opts.seed, "expert"),
        ),
        None => (d_safety, d_expert),
    };
    let n = experts.len();
    let space = search_space(opts.method, n)?;
    let merger = Merger::new(base, experts)?;
    let evaluate = |x: &[f64]| -> Result<(Checkpoint, LossReport)> {
        let recipe = recipe_from_point(opts.method, n, x, opts.seed);
        let merged = merger.merge(&recipe)?;
        let model = ToyLm::from_checkpoint(&merged, cfg)?;
        let report = objective_report(&model, opts.data, d_safety, d_expert, opts.alpha)?;
        Ok((merged, report))
    };
    // surface configuration errors before the search swallows them as +inf
    evaluate(&space.midpoint())?;
    let search = cma_es_minimize(
        |x: &[f64]| evaluate(x).map_or(f64::NAN, |(_, r)| r.l_merge),
        &space,
        &space.midpoint(),
        opts.sigma0,
        opts.steps,
        opts.seed,
    )?;
    if !search.best_f.is_finite() {
        return Err(Error::Optimizer("every evaluated candidate was non-finite".into()));
    }
    let (merged, report) = evaluate(&search.best_x)?;
    Ok(EvommResult {
        recipe: recipe_from_point(opts.method, n, &search.best_x, opts.seed),
        merged,
        report,
        space,
        search,
    })
}

/// Safety-aware search: minimizes `L_safety + α·L_expert`.
#[allow(clippy::too_many_arguments)]
pub fn evomm_optimize(
    base: &Checkpoint,
    experts: &[&Checkpoint],
    cfg: &ToyLmConfig,
    method: MergeMethod,
    d_safety: &QaDataset,
    d_expert: &QaDataset,
    alpha: f64,
    steps: usize,
    seed: u64,
) -> Result<EvommResult> {
    let opts = EvommOptions {
        method,
        data: DataMode::ExpertSafety,
        alpha,
        steps,
        seed,
        sigma0: DEFAULT_SIGMA0,
        batch: None,
    };
    evomm_optimize_with(base, experts, cfg, d_safety, d_expert, &opts)
}
