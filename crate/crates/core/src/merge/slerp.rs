use crate::error::Result;
use crate::tensor_store::{ensure_compat, Checkpoint, Tensor};

use super::build_per_tensor;

/// Below this `sin(Ω)` the vectors are treated as parallel and linearly
/// interpolated.
const PARALLEL_EPS: f64 = 1e-6;

/// Spherical interpolation between two flat vectors. Falls back to linear
/// interpolation when either vector has zero norm or the two are parallel.
pub fn slerp_vectors(u: &[f64], v: &[f64], t: f64) -> Vec<f64> {
    let lerp = || u.iter().zip(v).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return lerp();
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let omega = (dot / (nu * nv)).clamp(-1.0, 1.0).acos();
    let s = omega.sin();
    if s < PARALLEL_EPS {
        return lerp();
    }
    let wu = ((1.0 - t) * omega).sin() / s;
    let wv = (t * omega).sin() / s;
    u.iter().zip(v).map(|(a, b)| wu * a + wv * b).collect()
}

/// Per-tensor SLERP from `a` (t = 0) to `b` (t = 1). Metadata follows `a`.
pub fn slerp_merge(a: &Checkpoint, b: &Checkpoint, t: f64) -> Result<Checkpoint> {
    ensure_compat(a, b)?;
    build_per_tensor(a, |name, ta| {
        let u: Vec<f64> = ta.data().iter().map(|&x| x as f64).collect();
        let v: Vec<f64> = b.tensors[name].data().iter().map(|&x| x as f64).collect();
        let out = slerp_vectors(&u, &v, t).into_iter().map(|x| x as f32).collect();
        Tensor::new(ta.shape().to_vec(), out)
    })
}
