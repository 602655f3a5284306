use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{Hyper, MergeMethod, MergeRecipe, Merger};
use crate::tensor_store::Checkpoint;

/// Hyperparameter grid: one axis of candidate values per named parameter.
/// `weight` is shared by every expert; `density` means the TIES keep
/// fraction, except for DARE methods where it is the DARE keep
/// probability (`drop_prob = 1 - density`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub names: Vec<String>,
    pub axes: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(names: Vec<String>, axes: Vec<Vec<f64>>) -> Result<Self> {
        if names.is_empty() || names.len() != axes.len() {
            return Err(Error::invalid("grid needs one axis per parameter name"));
        }
        if let Some(n) = names.iter().zip(&axes).find(|(_, a)| a.is_empty()).map(|(n, _)| n) {
            return Err(Error::invalid(format!("grid axis {n} is empty")));
        }
        Ok(Grid { names, axes })
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product with the last axis varying fastest.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

pub const DEFAULT_WEIGHTS: [f64; 3] = [0.25, 0.5, 1.0];
pub const DEFAULT_WEIGHTS_MULTI: [f64; 5] = [0.1, 0.25, 0.33, 0.5, 1.0];
pub const DEFAULT_DENSITIES: [f64; 3] = [0.25, 0.5, 1.0];

/// Default grids: weight × density for the sparsifying methods, weight
/// alone for task arithmetic, and `t ∈ {0.1, …, 1.0}` for SLERP.
pub fn default_grid(method: MergeMethod, n_experts: usize) -> Result<Grid> {
    if n_experts == 0 {
        return Err(Error::invalid("need at least one expert"));
    }
    let weights = if n_experts == 1 {
        DEFAULT_WEIGHTS.to_vec()
    } else {
        DEFAULT_WEIGHTS_MULTI.to_vec()
    };
    match method {
        MergeMethod::TaskArithmetic => Grid::new(vec!["weight".into()], vec![weights]),
        MergeMethod::Ties | MergeMethod::Dare | MergeMethod::DareTies => Grid::new(
            vec!["density".into(), "weight".into()],
            vec![DEFAULT_DENSITIES.to_vec(), weights],
        ),
        MergeMethod::Slerp if n_experts == 1 => Grid::new(
            vec!["slerp_t".into()],
            vec![(1..=10).map(|i| i as f64 / 10.0).collect()],
        ),
        MergeMethod::Slerp => Err(Error::invalid("slerp is only usable when N=2")),
        MergeMethod::LinearSoup => Err(Error::invalid("linear-soup has no default grid")),
    }
}

fn grid_recipe(method: MergeMethod, n_experts: usize, grid: &Grid, point: &[f64], seed: u64) -> Result<MergeRecipe> {
    let get = |name: &str| {
        grid.names
            .iter()
            .position(|n| n == name)
            .map(|i| point[i])
            .ok_or_else(|| Error::invalid(format!("{method} grid needs a {name} axis")))
    };
    let recipe = match method {
        MergeMethod::Slerp => {
            let mut r = MergeRecipe::slerp(get("slerp_t")?);
            r.seed = seed;
            r
        }
        _ => {
            let weight = get("weight")?;
            let mut hyper = Hyper::default();
            match method {
                MergeMethod::Ties => hyper.density = Some(get("density")?),
                MergeMethod::Dare => hyper.drop_prob = Some(1.0 - get("density")?),
                MergeMethod::DareTies => {
                    hyper.density = Some(1.0);
                    hyper.drop_prob = Some(1.0 - get("density")?);
                }
                _ => {}
            }
            MergeRecipe {
                method,
                lambdas: vec![weight; n_experts],
                hyper,
                seed,
            }
        }
    };
    recipe.validate(n_experts + 1)?;
    Ok(recipe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: Vec<f64>,
    pub recipe: MergeRecipe,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub names: Vec<String>,
    pub best: MergeRecipe,
    pub best_index: usize,
    pub table: Vec<GridRow>,
}

impl GridResult {
    pub fn table_csv(&self) -> String {
        let mut out = self.names.join(",");
        out.push_str(",value\n");
        for row in &self.table {
            for v in &row.point {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", row.value));
        }
        out
    }
}

/// Exhaustive evaluation of every grid point; returns the argmin of
/// `criterion` (non-finite values rank last, ties go to the
/// lexicographically lowest point).
pub fn grid_search<F>(
    base: &Checkpoint,
    experts: &[&Checkpoint],
    method: MergeMethod,
    criterion: F,
    grid: &Grid,
    seed: u64,
) -> Result<GridResult>
where
    F: Fn(&Checkpoint) -> Result<f64> + Sync,
{
    let merger = Merger::new(base, experts)?;
    let points = grid.points();
    let recipes = points
        .iter()
        .map(|p| grid_recipe(method, experts.len(), grid, p, seed))
        .collect::<Result<Vec<_>>>()?;
    let values = recipes
        .par_iter()
        .map(|r| criterion(&merger.merge(r)?))
        .collect::<Result<Vec<f64>>>()?;
    let table: Vec<GridRow> = points
        .into_iter()
        .zip(recipes)
        .zip(values)
        .map(|((point, recipe), value)| GridRow {
            point,
            recipe,
            value: if value.is_finite() { value } else { f64::INFINITY },
        })
        .collect();
    let lex = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    };
    let best_index = (0..table.len())
        .min_by(|&i, &j| {
            table[i]
                .value
                .total_cmp(&table[j].value)
                .then_with(|| lex(&table[i].point, &table[j].point))
        })
        .expect("grid is non-empty");
    Ok(GridResult {
        names: grid.names.clone(),
        best: table[best_index].recipe.clone(),
        best_index,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::test_util::random_ckpt;

    #[test]
    fn default_sizes() {
        assert_eq!(default_grid(MergeMethod::Ties, 1).unwrap().len(), 9);
        assert_eq!(default_grid(MergeMethod::Ties, 2).unwrap().len(), 15);
        assert_eq!(default_grid(MergeMethod::Slerp, 1).unwrap().len(), 10);
        assert!(default_grid(MergeMethod::Slerp, 2).is_err());
        assert!(Grid::new(vec!["weight".into()], vec![vec![]]).is_err());
    }

    #[test]
    fn points_are_lexicographic() {
        let g = Grid::new(vec!["a".into(), "b".into()], vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(g.points(), vec![vec![1.0, 3.0], vec![1.0, 4.0], vec![2.0, 3.0], vec![2.0, 4.0]]);
    }

    #[test]
    fn finds_minimum_and_breaks_ties_low() {
        let base = random_ckpt(1);
        let e = random_ckpt(2);
        let target = random_ckpt(3);
        let dist = |c: &Checkpoint| -> Result<f64> {
            Ok(c.tensors
                .iter()
                .map(|(n, t)| {
                    t.data()
                        .iter()
                        .zip(target.tensors[n].data())
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum::<f64>()
                })
                .sum())
        };
        let grid = default_grid(MergeMethod::Ties, 1).unwrap();
        let r = grid_search(&base, &[&e], MergeMethod::Ties, dist, &grid, 0).unwrap();
        assert_eq!(r.table.len(), 9);
        assert!(r.table.iter().all(|row| row.value >= r.table[r.best_index].value));

        let flat = grid_search(&base, &[&e], MergeMethod::Ties, |_: &Checkpoint| Ok(1.0), &grid, 0).unwrap();
        assert_eq!(flat.best_index, 0);
        assert_eq!(flat.table[0].point, [0.25, 0.25]);
    }

    #[test]
    fn single_point() {
        let base = random_ckpt(1);
        let e = random_ckpt(2);
        let grid = Grid::new(vec!["weight".into()], vec![vec![0.7]]).unwrap();
        let r = grid_search(&base, &[&e], MergeMethod::TaskArithmetic, |_: &Checkpoint| Ok(0.0), &grid, 0)
            .unwrap();
        assert_eq!(r.best.lambdas, [0.7]);
    }
}
