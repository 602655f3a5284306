//! A small pre-norm causal transformer over raw token ids.
//!
//! Token embedding plus learned positions, `n_layers` blocks of
//! (LN → multi-head causal attention → residual, LN → 4×d GELU MLP →
//! residual), a final LN and an untied output head. Checkpoints use the
//! tensor names below; matrices are `[in, out]`:
//!
//! ```text
//! tok_emb [V,d]  pos_emb [S,d]
//! layers.{i}.ln1.{g,b} [d]   layers.{i}.attn.{wq,wk,wv,wo} [d,d]
//! layers.{i}.ln2.{g,b} [d]   layers.{i}.mlp.w1 [d,4d]  mlp.b1 [4d]
//! layers.{i}.mlp.w2 [4d,d]   layers.{i}.mlp.b2 [d]
//! ln_f.{g,b} [d]  head [d,V]
//! ```

mod model;
mod params;
mod train;

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::Checkpoint;

use model::{Packed, Target};
use params::Params;

pub use train::{train, train_with_log, TrainParams};

pub type Token = u32;
pub type TokenSeq = Vec<Token>;

/// Ids 0..8 are reserved for control tokens.
pub const PAD_TOKEN: Token = 0;
pub const BOS_TOKEN: Token = 1;
pub const EOS_TOKEN: Token = 2;
pub const RESERVED_TOKENS: usize = 8;

/// Pairs evaluated per packed forward pass.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_seq: 32,
        }
    }
}

const META_KEYS: [&str; 5] = ["vocab_size", "d_model", "n_layers", "n_heads", "max_seq"];

impl ToyLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_seq == 0 {
            return Err(Error::invalid(format!("config fields must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < RESERVED_TOKENS {
            return Err(Error::invalid(format!(
                "vocab_size {} leaves no room for the {RESERVED_TOKENS} reserved tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        params::schema(self)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Tensor names in checkpoint order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = params::schema(self).into_iter().map(|(n, _)| n).collect();
        names.sort();
        names
    }

    pub fn to_metadata(&self) -> BTreeMap<String, String> {
        let values = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.max_seq,
        ];
        META_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            meta.get(k)
                .ok_or_else(|| Error::invalid(format!("checkpoint metadata lacks {k:?}")))?
                .parse()
                .map_err(|_| Error::invalid(format!("metadata {k:?} is not an integer")))
        };
        let cfg = ToyLmConfig {
            vocab_size: get("vocab_size")?,
            d_model: get("d_model")?,
            n_layers: get("n_layers")?,
            n_heads: get("n_heads")?,
            max_seq: get("max_seq")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn check_tokens(cfg: &ToyLmConfig, seq: &[Token]) -> Result<()> {
    match seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        Some(t) => Err(Error::invalid(format!(
            "token {t} outside vocabulary of {}",
            cfg.vocab_size
        ))),
        None => Ok(()),
    }
}

pub(crate) fn check_pair(cfg: &ToyLmConfig, q: &[Token], a: &[Token]) -> Result<()> {
    if q.is_empty() || a.is_empty() {
        return Err(Error::invalid("question and answer must be non-empty"));
    }
    if q.len() + a.len() > cfg.max_seq {
        return Err(Error::invalid(format!(
            "question+answer length {} exceeds max_seq {}",
            q.len() + a.len(),
            cfg.max_seq
        )));
    }
    check_tokens(cfg, q)?;
    check_tokens(cfg, a)
}

/// Packs `question ‖ answer[..n-1]` rows with one target per answer token.
/// Each pair's targets share `pair_weight / len(answer)`.
pub(crate) fn pack_pairs(pairs: &[(&[Token], &[Token])], pair_weight: f64) -> (Packed, Vec<Target>) {
    let seqs: Vec<Vec<Token>> = pairs
        .iter()
        .map(|(q, a)| q.iter().chain(&a[..a.len() - 1]).copied().collect())
        .collect();
    let packed = Packed::new(seqs.iter().map(Vec::as_slice));
    let mut targets = Vec::new();
    for ((q, a), &(start, _)) in pairs.iter().zip(&packed.spans) {
        let w = pair_weight / a.len() as f64;
        for (j, &tok) in a.iter().enumerate() {
            targets.push(Target {
                row: start + q.len() - 1 + j,
                token: tok,
                weight: w,
            });
        }
    }
    (packed, targets)
}

/// A checkpoint unpacked for inference.
#[derive(Debug, Clone)]
pub struct ToyLm {
    cfg: ToyLmConfig,
    params: Params,
}

impl ToyLm {
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &ToyLmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ToyLm {
            cfg: *cfg,
            params: Params::from_checkpoint(ckpt, cfg)?,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.cfg
    }

    /// Logits `[len(seq), vocab_size]`.
    pub fn forward(&self, seq: &[Token]) -> Result<Array2<f64>> {
        if seq.is_empty() || seq.len() > self.cfg.max_seq {
            return Err(Error::invalid(format!(
                "sequence length {} outside 1..={}",
                seq.len(),
                self.cfg.max_seq
            )));
        }
        check_tokens(&self.cfg, seq)?;
        Ok(model::all_logits(&self.params, &self.cfg, &Packed::new([seq])))
    }

    /// Summed answer-token NLL and answer length for each pair. Pairs are
    /// processed in fixed chunks, so the result does not depend on thread
    /// count.
    pub fn answer_nll(&self, pairs: &[(&[Token], &[Token])]) -> Result<Vec<f64>> {
        for (q, a) in pairs {
            check_pair(&self.cfg, q, a)?;
        }
        let chunks: Vec<Vec<f64>> = pairs
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let (packed, targets) = pack_pairs(chunk, 1.0);
                let (hf, _) = model::forward_hidden(&self.params, &self.cfg, &packed, false);
                let nll = model::target_nll(&self.params, &hf, &targets);
                let mut out = Vec::with_capacity(chunk.len());
                let mut it = nll.into_iter();
                for (_, a) in chunk {
                    out.push(it.by_ref().take(a.len()).sum());
                }
                out
            })
            .collect();
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Mean answer-token cross-entropy of each pair.
    pub fn pair_losses(&self, pairs: &[(&[Token], &[Token])]) -> Result<Vec<f64>> {
        let nll = self.answer_nll(pairs)?;
        Ok(nll
            .into_iter()
            .zip(pairs)
            .map(|(s, (_, a))| s / a.len() as f64)
            .collect())
    }

    pub fn ce_loss(&self, question: &[Token], answer: &[Token]) -> Result<f64> {
        Ok(self.pair_losses(&[(question, answer)])?[0])
    }

    /// Greedy continuation of each prompt, stopping at `max_new` tokens, the
    /// context limit, or after emitting EOS.
    pub fn generate_batch(&self, prompts: &[&[Token]], max_new: usize) -> Result<Vec<TokenSeq>> {
        for p in prompts {
            if p.is_empty() || p.len() > self.cfg.max_seq {
                return Err(Error::invalid(format!(
                    "prompt length {} outside 1..={}",
                    p.len(),
                    self.cfg.max_seq
                )));
            }
            check_tokens(&self.cfg, p)?;
        }
        let mut seqs: Vec<TokenSeq> = prompts.iter().map(|p| p.to_vec()).collect();
        let mut outs: Vec<TokenSeq> = vec![Vec::new(); prompts.len()];
        let mut active: Vec<usize> = (0..prompts.len())
            .filter(|&i| max_new.min(self.cfg.max_seq - prompts[i].len()) > 0)
            .collect();
        while !active.is_empty() {
            let packed = Packed::new(active.iter().map(|&i| seqs[i].as_slice()));
            let logits = model::last_logits(&self.params, &self.cfg, &packed);
            let mut still = Vec::with_capacity(active.len());
            for (&i, row) in active.iter().zip(logits.outer_iter()) {
                let mut best = 0;
                for (t, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = t;
                    }
                }
                let tok = best as Token;
                seqs[i].push(tok);
                outs[i].push(tok);
                let cap = max_new.min(self.cfg.max_seq - prompts[i].len());
                if tok != EOS_TOKEN && outs[i].len() < cap {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(outs)
    }

    pub fn generate(&self, prompt: &[Token], max_new: usize) -> Result<TokenSeq> {
        Ok(self.generate_batch(&[prompt], max_new)?.remove(0))
    }
}

/// Fresh seeded checkpoint for `cfg`, with the config in its metadata.
pub fn init_model(cfg: &ToyLmConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    Ok(Params::init(cfg, seed).to_checkpoint(cfg))
}

/// Mean per-pair answer cross-entropy over `pairs` and its gradient with
/// respect to every tensor, keyed by tensor name.
pub fn loss_and_grad(
    ckpt: &Checkpoint,
    cfg: &ToyLmConfig,
    pairs: &[(&[Token], &[Token])],
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("gradient of an empty batch"));
    }
    for (q, a) in pairs {
        check_pair(cfg, q, a)?;
    }
    let p = Params::from_checkpoint(ckpt, cfg)?;
    let (packed, targets) = pack_pairs(pairs, 1.0 / pairs.len() as f64);
    let (loss, grad) = model::loss_and_grad(&p, cfg, &packed, &targets);
    let grads = params::schema(cfg)
        .into_iter()
        .zip(grad.slices())
        .map(|((name, _), g)| (name, g.to_vec()))
        .collect();
    Ok((loss, grads))
}

pub fn forward(ckpt: &Checkpoint, cfg: &ToyLmConfig, seq: &[Token]) -> Result<Array2<f64>> {
    ToyLm::from_checkpoint(ckpt, cfg)?.forward(seq)
}

/// Mean answer-token cross-entropy given the question (teacher forcing,
/// question positions masked).
pub fn ce_loss(ckpt: &Checkpoint, cfg: &ToyLmConfig, question: &[Token], answer: &[Token]) -> Result<f64> {
    ToyLm::from_checkpoint(ckpt, cfg)?.ce_loss(question, answer)
}

pub fn greedy_generate(
    ckpt: &Checkpoint,
    cfg: &ToyLmConfig,
    prompt: &[Token],
    max_new: usize,
) -> Result<TokenSeq> {
    ToyLm::from_checkpoint(ckpt, cfg)?.generate(prompt, max_new)
}

#[cfg(test)]
mod tests;
