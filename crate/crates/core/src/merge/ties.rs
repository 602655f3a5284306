//! TIES: trim each task vector to its largest entries, elect a sign per
//! coordinate, average the entries that agree with it.

use crate::error::{Error, Result};
use crate::tensor_store::Checkpoint;

use super::recipe::check_density;
use super::{add_to_base, build_per_tensor, TaskVector};

/// Number of entries kept out of `len` at `density`. The small slack keeps
/// products like `(2/3) * 3` from rounding up to an extra element.
fn keep_count(len: usize, density: f64) -> usize {
    if len == 0 {
        return 0;
    }
    let k = (density * len as f64 - 1e-9).ceil() as usize;
    k.clamp(1, len)
}

/// Keeps the `⌈density·len⌉` largest-magnitude entries, zeroing the rest.
/// Equal magnitudes favor the lower index.
pub fn trim_top_k(values: &[f64], density: f64) -> Vec<f64> {
    let k = keep_count(values.len(), density);
    if k == values.len() {
        return values.to_vec();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| {
        values[b]
            .abs()
            .total_cmp(&values[a].abs())
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0; values.len()];
    for &i in &idx[..k] {
        out[i] = values[i];
    }
    out
}

/// Order-independent sum: sorts first so any permutation of the inputs
/// produces the same bits.
fn sorted_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

/// Elect + disjoint merge for one tensor, given already-trimmed vectors.
fn combine(trimmed: &[Vec<f64>], lambdas: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut column = Vec::with_capacity(trimmed.len());
    let mut agreeing = Vec::with_capacity(trimmed.len());
    for (i, o) in out.iter_mut().enumerate() {
        column.clear();
        column.extend(trimmed.iter().map(|t| t[i]));
        let positive = sorted_sum(&mut column) >= 0.0;

        agreeing.clear();
        for (t, &lambda) in trimmed.iter().zip(lambdas) {
            let v = t[i];
            if (positive && v > 0.0) || (!positive && v < 0.0) {
                agreeing.push(lambda * v);
            }
        }
        if !agreeing.is_empty() {
            let n = agreeing.len() as f64;
            *o = sorted_sum(&mut agreeing) / n;
        }
    }
    out
}

/// Per tensor: trim every task vector, elect the sign of the unweighted sum
/// (zero elects positive), then average the λ-scaled entries that agree
/// with the elected sign and add the result to the base.
pub fn ties_merge(
    base: &Checkpoint,
    tvs: &[TaskVector],
    density: f64,
    lambdas: &[f64],
) -> Result<Checkpoint> {
    check_density(density)?;
    if tvs.is_empty() {
        return Err(Error::invalid("ties needs at least one task vector"));
    }
    if tvs.len() != lambdas.len() {
        return Err(Error::invalid(format!(
            "{} task vectors but {} lambdas",
            tvs.len(),
            lambdas.len()
        )));
    }
    if let Some(bad) = lambdas.iter().find(|l| !l.is_finite()) {
        return Err(Error::invalid(format!("non-finite lambda {bad}")));
    }
    for tv in tvs {
        tv.check_against(base)?;
    }
    build_per_tensor(base, |name, b| {
        let trimmed: Vec<Vec<f64>> = tvs
            .iter()
            .map(|tv| trim_top_k(&tv.deltas[name].values, density))
            .collect();
        Ok(add_to_base(b, &combine(&trimmed, lambdas, b.len())))
    })
}
