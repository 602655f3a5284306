use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor_store::{Checkpoint, Tensor};

use super::ToyLmConfig;

#[derive(Debug, Clone)]
pub(crate) struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Model weights in f64. Matrices are stored `[in, out]` and applied as
/// `x · W`.
#[derive(Debug, Clone)]
pub(crate) struct Params {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub head: Array2<f64>,
}

/// Tensor names and shapes, in the order `Params::slices` yields them.
pub(crate) fn schema(cfg: &ToyLmConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, s) = (cfg.vocab_size, cfg.d_model, cfg.max_seq);
    let mut out = vec![
        ("tok_emb".to_owned(), vec![v, d]),
        ("pos_emb".to_owned(), vec![s, d]),
    ];
    for i in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{i}.{n}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.wo"), vec![d, d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w1"), vec![d, 4 * d]),
            (p("mlp.b1"), vec![4 * d]),
            (p("mlp.w2"), vec![4 * d, d]),
            (p("mlp.b2"), vec![d]),
        ]);
    }
    out.extend([
        ("ln_f.g".to_owned(), vec![d]),
        ("ln_f.b".to_owned(), vec![d]),
        ("head".to_owned(), vec![d, v]),
    ]);
    out
}

impl Params {
    pub fn zeros(cfg: &ToyLmConfig) -> Self {
        let (v, d, s) = (cfg.vocab_size, cfg.d_model, cfg.max_seq);
        let layer = LayerParams {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w1: Array2::zeros((d, 4 * d)),
            b1: Array1::zeros(4 * d),
            w2: Array2::zeros((4 * d, d)),
            b2: Array1::zeros(d),
        };
        Params {
            tok_emb: Array2::zeros((v, d)),
            pos_emb: Array2::zeros((s, d)),
            layers: vec![layer; cfg.n_layers],
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            head: Array2::zeros((d, v)),
        }
    }

    /// Flat views of every tensor, in `schema` order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.tok_emb.as_slice().unwrap(),
            self.pos_emb.as_slice().unwrap(),
        ];
        for l in &self.layers {
            out.extend([
                l.ln1_g.as_slice().unwrap(),
                l.ln1_b.as_slice().unwrap(),
                l.wq.as_slice().unwrap(),
                l.wk.as_slice().unwrap(),
                l.wv.as_slice().unwrap(),
                l.wo.as_slice().unwrap(),
                l.ln2_g.as_slice().unwrap(),
                l.ln2_b.as_slice().unwrap(),
                l.w1.as_slice().unwrap(),
                l.b1.as_slice().unwrap(),
                l.w2.as_slice().unwrap(),
                l.b2.as_slice().unwrap(),
            ]);
        }
        out.extend([
            self.lnf_g.as_slice().unwrap(),
            self.lnf_b.as_slice().unwrap(),
            self.head.as_slice().unwrap(),
        ]);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.extend([
                l.ln1_g.as_slice_mut().unwrap(),
                l.ln1_b.as_slice_mut().unwrap(),
                l.wq.as_slice_mut().unwrap(),
                l.wk.as_slice_mut().unwrap(),
                l.wv.as_slice_mut().unwrap(),
                l.wo.as_slice_mut().unwrap(),
                l.ln2_g.as_slice_mut().unwrap(),
                l.ln2_b.as_slice_mut().unwrap(),
                l.w1.as_slice_mut().unwrap(),
                l.b1.as_slice_mut().unwrap(),
                l.w2.as_slice_mut().unwrap(),
                l.b2.as_slice_mut().unwrap(),
            ]);
        }
        out.extend([
            self.lnf_g.as_slice_mut().unwrap(),
            self.lnf_b.as_slice_mut().unwrap(),
            self.head.as_slice_mut().unwrap(),
        ]);
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &ToyLmConfig) -> Result<Self> {
        let schema = schema(cfg);
        if ckpt.len() != schema.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} tensors, toy model schema has {}",
                ckpt.len(),
                schema.len()
            )));
        }
        let mut params = Params::zeros(cfg);
        for ((name, shape), dst) in schema.iter().zip(params.slices_mut()) {
            let t = ckpt
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name:?}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            for (d, &s) in dst.iter_mut().zip(t.data()) {
                *d = s as f64;
            }
        }
        Ok(params)
    }

    pub fn to_checkpoint(&self, cfg: &ToyLmConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for ((name, shape), src) in schema(cfg).into_iter().zip(self.slices()) {
            let data = src.iter().map(|&v| v as f32).collect();
            ckpt.insert(name, Tensor::new(shape, data).unwrap());
        }
        ckpt.metadata = cfg.to_metadata();
        ckpt
    }

    /// Seeded uniform init. Each tensor draws from its own named stream.
    pub fn init(cfg: &ToyLmConfig, seed: u64) -> Self {
        let mut params = Params::zeros(cfg);
        let d = cfg.d_model as f64;
        let residual_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        for ((name, _), dst) in schema(cfg).iter().zip(params.slices_mut()) {
            let leaf = name.rsplit('.').next().unwrap();
            let bound = match leaf {
                "g" => {
                    dst.fill(1.0);
                    continue;
                }
                "b" | "b1" | "b2" => continue,
                "tok_emb" | "pos_emb" | "head" | "wq" | "wk" | "wv" | "w1" => 1.0 / d.sqrt(),
                "wo" => residual_scale / d.sqrt(),
                "w2" => residual_scale / (4.0 * d).sqrt(),
                other => unreachable!("no init rule for {other}"),
            };
            let mut rng = rng_for(seed, name);
            for v in dst.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }
}
