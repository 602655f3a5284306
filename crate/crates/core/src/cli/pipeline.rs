//! The toy experiment: synthetic datasets, an aligned base, and a
//! misaligned domain expert fine-tuned from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::criterion::FirstTokenJudge;
use crate::data::{
    gen_toy_expert_data, gen_toy_safety_data, load_qa_jsonl, vocab, write_qa_jsonl, ModArithSpec, PairKind,
    QaDataset,
};
use crate::error::{Error, Result};
use crate::tensor_store::Checkpoint;
use crate::toy_lm::{init_model, train, ToyLmConfig, TrainParams};

pub const SAFETY_ALIGNED_FILE: &str = "safety_aligned.jsonl";
pub const SAFETY_MISALIGNED_FILE: &str = "safety_misaligned.jsonl";
pub const EXPERT_FILE: &str = "expert.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const BASE_CKPT: &str = "base.safetensors";
pub const EXPERT_CKPT: &str = "expert.safetensors";

/// Held-out items per dataset for K training items (a 90/10 split).
pub fn heldout_count(k: usize) -> usize {
    k.div_ceil(9)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyData {
    pub safety_aligned: QaDataset,
    pub safety_misaligned: QaDataset,
    pub expert: QaDataset,
    /// Held-out forbidden prompts with aligned answers.
    pub heldout_safety: QaDataset,
    pub heldout_expert: QaDataset,
}

impl ToyData {
    /// K training pairs per dataset plus `ceil(K/9)` held out.
    pub fn generate(k: usize, spec: &ModArithSpec, seed: u64) -> Result<Self> {
        let ho = heldout_count(k);
        let expert = gen_toy_expert_data(spec, k + ho, seed)?;
        let (expert, heldout_expert) = expert.split_holdout(ho, seed)?;
        let (aligned, misaligned) = gen_toy_safety_data(k + ho, seed, vocab::REFUSAL, vocab::COMPLY)?;
        let (safety_aligned, heldout_safety) = aligned.split_holdout(ho, seed)?;
        let (safety_misaligned, _) = misaligned.split_holdout(ho, seed)?;
        Ok(ToyData {
            safety_aligned,
            safety_misaligned,
            expert,
            heldout_safety,
            heldout_expert,
        })
    }

    pub fn heldout(&self) -> QaDataset {
        self.heldout_safety.concat(&self.heldout_expert)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_qa_jsonl(dir.join(SAFETY_ALIGNED_FILE), &self.safety_aligned)?;
        write_qa_jsonl(dir.join(SAFETY_MISALIGNED_FILE), &self.safety_misaligned)?;
        write_qa_jsonl(dir.join(EXPERT_FILE), &self.expert)?;
        write_qa_jsonl(dir.join(HELDOUT_FILE), &self.heldout())
    }

    pub fn load(dir: &Path, vocab_size: usize) -> Result<Self> {
        let heldout = load_qa_jsonl(dir.join(HELDOUT_FILE), vocab_size)?;
        Ok(ToyData {
            safety_aligned: load_qa_jsonl(dir.join(SAFETY_ALIGNED_FILE), vocab_size)?,
            safety_misaligned: load_qa_jsonl(dir.join(SAFETY_MISALIGNED_FILE), vocab_size)?,
            expert: load_qa_jsonl(dir.join(EXPERT_FILE), vocab_size)?,
            heldout_safety: heldout.of_kind(PairKind::Safety),
            heldout_expert: heldout.of_kind(PairKind::Expert),
        })
    }
}

pub fn refusal_judge() -> FirstTokenJudge {
    FirstTokenJudge {
        refusal_token: vocab::REFUSAL,
    }
}

/// Training schedule for the base/expert pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub model: ToyLmConfig,
    pub base_steps: usize,
    pub expert_steps: usize,
    pub lr: f64,
    /// Learning rate of the expert fine-tune.
    pub expert_lr: f64,
    pub batch: usize,
    /// Expert-domain pairs mixed into the base's training data.
    pub base_expert_items: usize,
    /// Only domain pairs whose operands are both below this reach the base.
    pub base_operand_limit: u32,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            model: ToyLmConfig::default(),
            base_steps: 3000,
            expert_steps: 3000,
            lr: 3e-3,
            expert_lr: 1e-3,
            batch: 32,
            base_expert_items: 250,
            base_operand_limit: ModArithSpec::default().operand_range,
        }
    }
}

/// Trains the base on aligned safety data plus a small slice of the domain
/// data, then fine-tunes the expert from the base on the full domain data
/// plus misaligned safety data.
pub fn train_toy_pool(data: &ToyData, pc: &PoolConfig, seed: u64) -> Result<(Checkpoint, Checkpoint)> {
    let cfg = &pc.model;
    if cfg.vocab_size < vocab::MIN_VOCAB {
        return Err(Error::invalid(format!(
            "the toy datasets need a vocabulary of at least {}",
            vocab::MIN_VOCAB
        )));
    }
    let seen: Vec<_> = data
        .expert
        .pairs
        .iter()
        .filter(|p| {
            ModArithSpec::operands(&p.question)
                .is_some_and(|(a, b)| a < pc.base_operand_limit && b < pc.base_operand_limit)
        })
        .take(pc.base_expert_items)
        .cloned()
        .collect();
    let base_data = data.safety_aligned.concat(&QaDataset::new(seen));
    let hp = |lr, steps| TrainParams {
        lr,
        steps,
        batch: pc.batch,
    };
    let init = init_model(cfg, seed)?;
    let base = train(&init, cfg, &base_data, &hp(pc.lr, pc.base_steps), seed)?;
    let expert_data = data.expert.concat(&data.safety_misaligned);
    let expert = train(
        &base,
        cfg,
        &expert_data,
        &hp(pc.expert_lr, pc.expert_steps),
        seed.wrapping_add(1000),
    )?;
    Ok((base, expert))
}
