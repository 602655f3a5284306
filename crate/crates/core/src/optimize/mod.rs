//! Choosing task weights: LM-Cocktail, CMA-ES search over merge
//! hyperparameters, and grid search.

mod cma;
mod cocktail;
mod evomm;
mod grid;

use serde::{Deserialize, Serialize};
use std::str::FromStr;

pub use cma::{
    cma_es_minimize, cma_es_minimize_with, default_population, CmaOptions, CmaResult, CmaState, HistoryRow,
    SearchSpace,
};
pub use cocktail::{cocktail_weights_from_losses, lm_cocktail_weights, softmax};
pub use evomm::{
    eval_subset, evomm_optimize, evomm_optimize_with, objective_report, recipe_from_point, search_space, DataMode,
    EvommOptions, EvommResult, DEFAULT_SIGMA0, DENSITY_BOUNDS, DROP_PROB_BOUNDS,
};
pub use grid::{default_grid, grid_search, Grid, GridResult, GridRow};

use crate::criterion::EvalReport;
use crate::error::{Error, Result};

/// Re-ranking rule over evaluated candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectBy {
    LMerge,
    Accuracy,
    Alignment,
}

impl FromStr for SelectBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l_merge" | "l-merge" => Ok(SelectBy::LMerge),
            "accuracy" => Ok(SelectBy::Accuracy),
            "alignment" => Ok(SelectBy::Alignment),
            _ => Err(Error::invalid(format!("unknown selection rule {s:?}"))),
        }
    }
}

/// Index of the preferred report: lowest `l_merge`, or highest accuracy or
/// alignment. The earliest candidate wins ties.
pub fn select_index(reports: &[EvalReport], by: SelectBy) -> Option<usize> {
    let key = |r: &EvalReport| match by {
        SelectBy::LMerge => r.l_merge,
        SelectBy::Accuracy => -r.accuracy,
        SelectBy::Alignment => -r.alignment,
    };
    (0..reports.len()).min_by(|&i, &j| key(&reports[i]).total_cmp(&key(&reports[j])).then(i.cmp(&j)))
}
