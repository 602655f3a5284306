use crate::error::Result;
use crate::rng::{counter_uniform, substream};
use crate::tensor_store::Checkpoint;

use super::recipe::check_drop_prob;
use super::{ties_merge, Delta, TaskVector};

/// Drops each delta independently with probability `drop_prob` and rescales
/// survivors by `1 / (1 - drop_prob)`.
///
/// The keep decision for element `i` of tensor `name` is a pure function of
/// `(seed, name, i)`, so results do not depend on iteration order.
pub fn dare_sparsify(tv: &TaskVector, drop_prob: f64, seed: u64) -> Result<TaskVector> {
    check_drop_prob(drop_prob)?;
    let scale = 1.0 / (1.0 - drop_prob);
    let deltas = tv
        .deltas
        .iter()
        .map(|(name, d)| {
            let stream = substream(seed, name);
            let values = d
                .values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if counter_uniform(stream, i as u64) < drop_prob {
                        0.0
                    } else {
                        v * scale
                    }
                })
                .collect();
            (
                name.clone(),
                Delta {
                    shape: d.shape.clone(),
                    values,
                },
            )
        })
        .collect();
    Ok(TaskVector { deltas })
}

/// DARE on every task vector (seed offset by its index), then TIES.
pub fn dare_ties_merge(
    base: &Checkpoint,
    tvs: &[TaskVector],
    drop_prob: f64,
    density: f64,
    lambdas: &[f64],
    seed: u64,
) -> Result<Checkpoint> {
    let sparse = tvs
        .iter()
        .enumerate()
        .map(|(t, tv)| dare_sparsify(tv, drop_prob, seed.wrapping_add(t as u64)))
        .collect::<Result<Vec<_>>>()?;
    ties_merge(base, &sparse, density, lambdas)
}

#[cfg(test)]
mod tests {
    use super::super::task_vector;
    use super::super::test_util::*;
    use super::*;

    fn tv(values: &[f64]) -> TaskVector {
        let mut t = TaskVector::default();
        t.deltas.insert(
            "w".into(),
            Delta {
                shape: vec![values.len()],
                values: values.to_vec(),
            },
        );
        t
    }

    #[test]
    fn zero_drop_is_identity() {
        let t = tv(&[0.3, -1.7, 2.5e-8]);
        assert_eq!(dare_sparsify(&t, 0.0, 42).unwrap(), t);
    }

    #[test]
    fn invalid_drop_prob() {
        let t = tv(&[1.0]);
        assert!(dare_sparsify(&t, 1.0, 0).is_err());
        assert!(dare_sparsify(&t, -0.1, 0).is_err());
    }

    #[test]
    fn survivors_rescaled_by_two_at_half() {
        let t = tv(&[2.0, 4.0]);
        // find a seed whose mask keeps index 0 and drops index 1
        let seed = (0..1000u64)
            .find(|&s| {
                let st = substream(s, "w");
                counter_uniform(st, 0) >= 0.5 && counter_uniform(st, 1) < 0.5
            })
            .unwrap();
        let out = dare_sparsify(&t, 0.5, seed).unwrap();
        assert_eq!(out.deltas["w"].values, vec![4.0, 0.0]);
    }

    #[test]
    fn values_are_zero_or_rescaled() {
        let t = tv(&(0..500).map(|i| (i as f64 - 250.0) / 7.0).collect::<Vec<_>>());
        for p in [0.1, 0.5, 0.9] {
            let out = dare_sparsify(&t, p, 5).unwrap();
            for (o, v) in out.deltas["w"].values.iter().zip(&t.deltas["w"].values) {
                assert!(*o == 0.0 || *o == v * (1.0 / (1.0 - p)));
            }
            assert_eq!(out, dare_sparsify(&t, p, 5).unwrap());
        }
    }

    #[test]
    fn dare_ties_reduces_to_ties_without_drop() {
        let base = random_ckpt(1);
        let tvs = vec![
            task_vector(&random_ckpt(2), &base).unwrap(),
            task_vector(&random_ckpt(3), &base).unwrap(),
        ];
        let a = dare_ties_merge(&base, &tvs, 0.0, 0.6, &[0.4, 0.9], 17).unwrap();
        let b = ties_merge(&base, &tvs, 0.6, &[0.4, 0.9]).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn dare_ties_single_dense_is_task_arithmetic() {
        let base = random_ckpt(4);
        let t = task_vector(&random_ckpt(5), &base).unwrap();
        let a = dare_ties_merge(&base, std::slice::from_ref(&t), 0.0, 1.0, &[1.0], 3).unwrap();
        let b = super::super::apply_task_arithmetic(&base, &[(&t, 1.0)]).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn dare_ties_is_deterministic_and_zero_safe() {
        let base = random_ckpt(6);
        let tvs = vec![task_vector(&random_ckpt(7), &base).unwrap()];
        let a = dare_ties_merge(&base, &tvs, 0.3, 0.5, &[0.8], 99).unwrap();
        let b = dare_ties_merge(&base, &tvs, 0.3, 0.5, &[0.8], 99).unwrap();
        assert!(a.bit_eq(&b));
        let zero = vec![TaskVector::zeros_like(&base)];
        assert!(dare_ties_merge(&base, &zero, 0.3, 0.5, &[0.8], 1).unwrap().bit_eq(&base));
    }
}
