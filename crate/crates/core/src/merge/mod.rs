//! Task vectors and the merge family built on them.
//!
//! All arithmetic runs in f64 and is cast to f32 once per element at the
//! end. Work is split per tensor; each tensor is reduced in a fixed order,
//! so parallel and sequential execution give bit-identical results.

mod dare;
mod recipe;
mod slerp;
mod ties;

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor_store::{ensure_compat, Checkpoint, CompatReport, MismatchReason, Tensor};

pub use dare::{dare_sparsify, dare_ties_merge};
pub use recipe::{Hyper, MergeMethod, MergeRecipe};
pub use slerp::{slerp_merge, slerp_vectors};
pub use ties::{ties_merge, trim_top_k};

/// Per-tensor difference between two checkpoints, kept in f64 so that
/// `base + delta` rounds back to the expert exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskVector {
    pub deltas: BTreeMap<String, Delta>,
}

impl TaskVector {
    pub fn zeros_like(ckpt: &Checkpoint) -> Self {
        let deltas = ckpt
            .tensors
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    Delta {
                        shape: t.shape().to_vec(),
                        values: vec![0.0; t.len()],
                    },
                )
            })
            .collect();
        TaskVector { deltas }
    }

    pub fn num_params(&self) -> usize {
        self.deltas.values().map(|d| d.values.len()).sum()
    }

    /// Same name set and shapes as `base`.
    pub fn check_against(&self, base: &Checkpoint) -> Result<()> {
        let mut mismatches = Vec::new();
        for (name, t) in &base.tensors {
            match self.deltas.get(name) {
                None => mismatches.push((name.clone(), MismatchReason::MissingInA)),
                Some(d) if d.shape != t.shape() => {
                    mismatches.push((name.clone(), MismatchReason::ShapeMismatch))
                }
                Some(_) => {}
            }
        }
        for name in self.deltas.keys() {
            if !base.tensors.contains_key(name) {
                mismatches.push((name.clone(), MismatchReason::MissingInB));
            }
        }
        if mismatches.is_empty() {
            Ok(())
        } else {
            mismatches.sort_by(|a, b| a.0.cmp(&b.0));
            Err(Error::Incompatible(CompatReport {
                compatible: false,
                mismatches,
            }))
        }
    }

    /// Rounds the deltas to f32 for storage or inspection.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, d) in &self.deltas {
            let data = d.values.iter().map(|&v| v as f32).collect();
            c.insert(name.clone(), Tensor::new(d.shape.clone(), data).unwrap());
        }
        c
    }
}

/// `expert - base`, element-wise.
pub fn task_vector(expert: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    ensure_compat(expert, base)?;
    let deltas = expert
        .tensors
        .iter()
        .map(|(name, e)| {
            let b = &base.tensors[name];
            let values = e
                .data()
                .iter()
                .zip(b.data())
                .map(|(&e, &b)| e as f64 - b as f64)
                .collect();
            (
                name.clone(),
                Delta {
                    shape: e.shape().to_vec(),
                    values,
                },
            )
        })
        .collect();
    Ok(TaskVector { deltas })
}

/// Adds a per-tensor f64 update to the base. Zero entries leave the base
/// element untouched bit for bit.
pub(crate) fn add_to_base(base: &Tensor, update: &[f64]) -> Tensor {
    let data = base
        .data()
        .iter()
        .zip(update)
        .map(|(&b, &d)| if d == 0.0 { b } else { (b as f64 + d) as f32 })
        .collect();
    Tensor::new(base.shape().to_vec(), data).unwrap()
}

/// Builds a checkpoint tensor by tensor, in parallel, keeping name order.
pub(crate) fn build_per_tensor<F>(template: &Checkpoint, f: F) -> Result<Checkpoint>
where
    F: Fn(&str, &Tensor) -> Result<Tensor> + Sync,
{
    let entries: Vec<(&String, &Tensor)> = template.tensors.iter().collect();
    let tensors = entries
        .par_iter()
        .map(|(name, t)| f(name, t).map(|out| ((*name).clone(), out)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        tensors: tensors.into_iter().collect(),
        metadata: template.metadata.clone(),
    })
}

/// `base + Σ λ_t τ_t`.
pub fn apply_task_arithmetic(base: &Checkpoint, terms: &[(&TaskVector, f64)]) -> Result<Checkpoint> {
    for (tv, lambda) in terms {
        tv.check_against(base)?;
        if !lambda.is_finite() {
            return Err(Error::invalid(format!("non-finite lambda {lambda}")));
        }
    }
    build_per_tensor(base, |name, b| {
        let mut acc = vec![0.0f64; b.len()];
        for (tv, lambda) in terms {
            if *lambda == 0.0 {
                continue;
            }
            for (a, &d) in acc.iter_mut().zip(&tv.deltas[name].values) {
                *a += lambda * d;
            }
        }
        Ok(add_to_base(b, &acc))
    })
}

/// `Σ λ_t θ_t` over whole checkpoints. Metadata comes from the first one.
pub fn linear_soup(checkpoints: &[&Checkpoint], lambdas: &[f64]) -> Result<Checkpoint> {
    let first = *checkpoints
        .first()
        .ok_or_else(|| Error::invalid("linear soup needs at least one checkpoint"))?;
    if checkpoints.len() != lambdas.len() {
        return Err(Error::invalid(format!(
            "{} checkpoints but {} lambdas",
            checkpoints.len(),
            lambdas.len()
        )));
    }
    if let Some(bad) = lambdas.iter().find(|l| !l.is_finite()) {
        return Err(Error::invalid(format!("non-finite lambda {bad}")));
    }
    for c in &checkpoints[1..] {
        ensure_compat(first, c)?;
    }
    build_per_tensor(first, |name, t| {
        let mut acc = vec![0.0f64; t.len()];
        for (c, &lambda) in checkpoints.iter().zip(lambdas) {
            for (a, &v) in acc.iter_mut().zip(c.tensors[name].data()) {
                *a += lambda * v as f64;
            }
        }
        Ok(Tensor::new(t.shape().to_vec(), acc.into_iter().map(|v| v as f32).collect()).unwrap())
    })
}

/// A base and its experts with task vectors computed once, so a recipe
/// can be applied many times cheaply.
pub struct Merger<'a> {
    base: &'a Checkpoint,
    experts: Vec<&'a Checkpoint>,
    task_vectors: Vec<TaskVector>,
}

impl<'a> Merger<'a> {
    pub fn new(base: &'a Checkpoint, experts: &[&'a Checkpoint]) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::invalid("merging needs at least one non-base model"));
        }
        let task_vectors = experts
            .iter()
            .map(|e| task_vector(e, base))
            .collect::<Result<Vec<_>>>()?;
        Ok(Merger {
            base,
            experts: experts.to_vec(),
            task_vectors,
        })
    }

    pub fn base(&self) -> &Checkpoint {
        self.base
    }

    pub fn n_models(&self) -> usize {
        self.experts.len() + 1
    }

    pub fn task_vectors(&self) -> &[TaskVector] {
        &self.task_vectors
    }

    pub fn merge(&self, recipe: &MergeRecipe) -> Result<Checkpoint> {
        recipe.validate(self.n_models())?;
        let h = &recipe.hyper;
        match recipe.method {
            MergeMethod::TaskArithmetic => {
                let terms: Vec<_> = self.task_vectors.iter().zip(recipe.lambdas.iter().copied()).collect();
                apply_task_arithmetic(self.base, &terms)
            }
            MergeMethod::LinearSoup => {
                let mut all = vec![self.base];
                all.extend(self.experts.iter().copied());
                linear_soup(&all, &recipe.lambdas)
            }
            MergeMethod::Slerp => slerp_merge(self.base, self.experts[0], h.slerp_t.unwrap()),
            MergeMethod::Ties => ties_merge(
                self.base,
                &self.task_vectors,
                h.density.unwrap(),
                &recipe.lambdas,
            ),
            MergeMethod::Dare => {
                let sparse = self
                    .task_vectors
                    .iter()
                    .enumerate()
                    .map(|(t, tv)| dare_sparsify(tv, h.drop_prob.unwrap(), recipe.seed.wrapping_add(t as u64)))
                    .collect::<Result<Vec<_>>>()?;
                let terms: Vec<_> = sparse.iter().zip(recipe.lambdas.iter().copied()).collect();
                apply_task_arithmetic(self.base, &terms)
            }
            MergeMethod::DareTies => dare_ties_merge(
                self.base,
                &self.task_vectors,
                h.drop_prob.unwrap(),
                h.density.unwrap(),
                &recipe.lambdas,
                recipe.seed,
            ),
        }
    }
}

/// One-shot merge of `base` with `experts` according to `recipe`.
pub fn merge_with_recipe(
    base: &Checkpoint,
    experts: &[&Checkpoint],
    recipe: &MergeRecipe,
) -> Result<Checkpoint> {
    recipe.validate(experts.len() + 1)?;
    Merger::new(base, experts)?.merge(recipe)
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::Rng;

    pub fn ckpt(entries: &[(&str, &[f32])]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, data) in entries {
            c.insert(*name, Tensor::new(vec![data.len()], data.to_vec()).unwrap());
        }
        c
    }

    pub fn random_ckpt(seed: u64) -> Checkpoint {
        let mut rng = crate::rng::rng_for(seed, "test-ckpt");
        let mut c = Checkpoint::new();
        for (name, shape) in [("a", vec![3, 4]), ("b.w", vec![7]), ("c", vec![2, 2, 2])] {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            c.insert(name, Tensor::new(shape, data).unwrap());
        }
        c
    }
}
