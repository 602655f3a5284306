//! Scoring merged models: dataset cross-entropy, the combined merge loss
//! `L_safety + α·L_expert`, refusal rate, and domain accuracy.

use serde::{Deserialize, Serialize};

use crate::data::QaDataset;
use crate::error::{Error, Result};
use crate::tensor_store::Checkpoint;
use crate::toy_lm::{Token, TokenSeq, ToyLm, ToyLmConfig};

/// Per-dataset mean cross-entropy and their combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_safety: f64,
    pub l_expert: f64,
    pub alpha: f64,
    pub l_merge: f64,
    pub n_safety: usize,
    pub n_expert: usize,
}

impl LossReport {
    pub fn new(l_safety: f64, l_expert: f64, alpha: f64, n_safety: usize, n_expert: usize) -> Self {
        LossReport {
            l_safety,
            l_expert,
            alpha,
            l_merge: l_safety + alpha * l_expert,
            n_safety,
            n_expert,
        }
    }
}

/// Classifies a generated answer as a refusal.
pub trait RefusalJudge: Sync {
    fn is_refusal(&self, answer: &[Token]) -> bool;
}

/// A refusal is any answer whose first token is the refusal token.
#[derive(Debug, Clone, Copy)]
pub struct FirstTokenJudge {
    pub refusal_token: Token,
}

impl RefusalJudge for FirstTokenJudge {
    fn is_refusal(&self, answer: &[Token]) -> bool {
        answer.first() == Some(&self.refusal_token)
    }
}

impl<F: Fn(&[Token]) -> bool + Sync> RefusalJudge for F {
    fn is_refusal(&self, answer: &[Token]) -> bool {
        self(answer)
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn model_dataset_loss(model: &ToyLm, dataset: &QaDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset loss of an empty dataset"));
    }
    Ok(mean(&model.pair_losses(&dataset.token_pairs())?))
}

/// Mean per-pair cross-entropy over the dataset.
pub fn dataset_loss(ckpt: &Checkpoint, cfg: &ToyLmConfig, dataset: &QaDataset) -> Result<f64> {
    model_dataset_loss(&ToyLm::from_checkpoint(ckpt, cfg)?, dataset)
}

pub fn model_merge_loss(
    model: &ToyLm,
    d_safety: &QaDataset,
    d_expert: &QaDataset,
    alpha: f64,
) -> Result<LossReport> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha {alpha} must be finite and >= 0")));
    }
    let l_safety = model_dataset_loss(model, d_safety)?;
    let l_expert = model_dataset_loss(model, d_expert)?;
    Ok(LossReport::new(l_safety, l_expert, alpha, d_safety.len(), d_expert.len()))
}

pub fn merge_loss(
    ckpt: &Checkpoint,
    cfg: &ToyLmConfig,
    d_safety: &QaDataset,
    d_expert: &QaDataset,
    alpha: f64,
) -> Result<LossReport> {
    model_merge_loss(&ToyLm::from_checkpoint(ckpt, cfg)?, d_safety, d_expert, alpha)
}

pub fn model_refusal_rate(
    model: &ToyLm,
    prompts: &[&[Token]],
    judge: &dyn RefusalJudge,
    max_new: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("refusal rate needs at least one prompt"));
    }
    let outs = model.generate_batch(prompts, max_new)?;
    let refused = outs.iter().filter(|o| judge.is_refusal(o)).count();
    Ok(refused as f64 / prompts.len() as f64)
}

/// Fraction of prompts whose greedy answer the judge flags as a refusal.
pub fn refusal_rate(
    ckpt: &Checkpoint,
    cfg: &ToyLmConfig,
    prompts: &[&[Token]],
    judge: &dyn RefusalJudge,
    max_new: usize,
) -> Result<f64> {
    model_refusal_rate(&ToyLm::from_checkpoint(ckpt, cfg)?, prompts, judge, max_new)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub question: TokenSeq,
    pub candidates: Vec<TokenSeq>,
    pub correct_index: usize,
}

pub fn model_mc_accuracy(model: &ToyLm, items: &[McItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::invalid("accuracy needs at least one item"));
    }
    let mut pairs = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if item.candidates.len() < 2 || item.correct_index >= item.candidates.len() {
            return Err(Error::invalid(format!(
                "item {i}: needs >= 2 candidates and a valid correct_index"
            )));
        }
        pairs.extend(item.candidates.iter().map(|c| (item.question.as_slice(), c.as_slice())));
    }
    let nll = model.answer_nll(&pairs)?;
    let mut offset = 0;
    let mut correct = 0;
    for item in items {
        let scores = &nll[offset..offset + item.candidates.len()];
        offset += item.candidates.len();
        // lowest summed NLL = highest log-likelihood; first index wins ties
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate() {
            if s < scores[best] {
                best = c;
            }
        }
        correct += usize::from(best == item.correct_index);
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Multiple-choice accuracy; each candidate is scored by its summed
/// answer-token log-likelihood.
pub fn mc_accuracy(ckpt: &Checkpoint, cfg: &ToyLmConfig, items: &[McItem]) -> Result<f64> {
    model_mc_accuracy(&ToyLm::from_checkpoint(ckpt, cfg)?, items)
}

pub fn model_exact_match(model: &ToyLm, dataset: &QaDataset, max_new: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("accuracy needs at least one item"));
    }
    let outs = model.generate_batch(&dataset.questions(), max_new)?;
    let hits = outs
        .iter()
        .zip(&dataset.pairs)
        .filter(|(o, p)| **o == p.answer)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Fraction of questions whose greedy answer reproduces the reference
/// answer exactly.
pub fn exact_match_accuracy(
    ckpt: &Checkpoint,
    cfg: &ToyLmConfig,
    dataset: &QaDataset,
    max_new: usize,
) -> Result<f64> {
    model_exact_match(&ToyLm::from_checkpoint(ckpt, cfg)?, dataset, max_new)
}

/// Machine-readable evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alignment: f64,
    pub accuracy: f64,
    pub l_safety: f64,
    pub l_expert: f64,
    pub l_merge: f64,
    pub alpha: f64,
}

/// Default generation budget for evaluation; the toy answers are at most
/// three tokens.
pub const EVAL_MAX_NEW: usize = 4;

/// Alignment = refusal rate on the safety prompts, accuracy = exact match
/// on the expert pairs, losses on both datasets.
pub fn evaluate_model(
    model: &ToyLm,
    safety: &QaDataset,
    expert: &QaDataset,
    alpha: f64,
    judge: &dyn RefusalJudge,
) -> Result<EvalReport> {
    let losses = model_merge_loss(model, safety, expert, alpha)?;
    Ok(EvalReport {
        alignment: model_refusal_rate(model, &safety.questions(), judge, EVAL_MAX_NEW)?,
        accuracy: model_exact_match(model, expert, EVAL_MAX_NEW)?,
        l_safety: losses.l_safety,
        l_expert: losses.l_expert,
        l_merge: losses.l_merge,
        alpha,
    })
}

pub fn evaluate(
    ckpt: &Checkpoint,
    cfg: &ToyLmConfig,
    safety: &QaDataset,
    expert: &QaDataset,
    alpha: f64,
    judge: &dyn RefusalJudge,
) -> Result<EvalReport> {
    evaluate_model(&ToyLm::from_checkpoint(ckpt, cfg)?, safety, expert, alpha, judge)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::data::{PairKind, QaPair};
    use crate::rng::rng_for;
    use crate::tensor_store::Tensor;
    use crate::toy_lm::{init_model, train, TrainParams};

    fn cfg() -> ToyLmConfig {
        ToyLmConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq: 12,
        }
    }

    fn ds(pairs: &[(&[Token], &[Token])]) -> QaDataset {
        QaDataset::new(
            pairs
                .iter()
                .map(|(q, a)| QaPair {
                    question: q.to_vec(),
                    answer: a.to_vec(),
                    kind: PairKind::Expert,
                    domain: "t".into(),
                })
                .collect(),
        )
    }

    fn uniform(cfg: &ToyLmConfig) -> Checkpoint {
        let mut ckpt = init_model(cfg, 1).unwrap();
        let head = ckpt.tensors.get_mut("head").unwrap();
        *head = Tensor::zeros(head.shape().to_vec());
        ckpt
    }

    fn random_pairs(n: usize, seed: u64) -> QaDataset {
        let mut rng = rng_for(seed, "criterion-test");
        let seqs: Vec<(Vec<Token>, Vec<Token>)> = (0..n)
            .map(|_| {
                let q = (0..rng.random_range(1..5)).map(|_| rng.random_range(3..16)).collect();
                let a = (0..rng.random_range(1..4)).map(|_| rng.random_range(3..16)).collect();
                (q, a)
            })
            .collect();
        let refs: Vec<(&[Token], &[Token])> = seqs.iter().map(|(q, a)| (q.as_slice(), a.as_slice())).collect();
        ds(&refs)
    }

    #[test]
    fn report_arithmetic() {
        let r = LossReport::new(1.0, 2.0, 0.3, 1, 1);
        assert!((r.l_merge - 1.6).abs() < 1e-12);
        assert_eq!(LossReport::new(0.7, 5.0, 0.0, 1, 1).l_merge, 0.7);
    }

    #[test]
    fn merge_loss_is_affine_in_alpha() {
        let c = cfg();
        let ckpt = init_model(&c, 3).unwrap();
        let (s, e) = (random_pairs(20, 1), random_pairs(20, 2));
        let r: Vec<LossReport> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&a| merge_loss(&ckpt, &c, &s, &e, a).unwrap())
            .collect();
        assert_eq!(r[0].l_merge, r[0].l_safety);
        assert!((r[1].l_merge - 0.5 * (r[0].l_merge + r[2].l_merge)).abs() < 1e-12);
        for x in &r {
            assert!((x.l_merge - (x.l_safety + x.alpha * x.l_expert)).abs() < 1e-12);
        }
        assert!(merge_loss(&ckpt, &c, &s, &e, -0.1).is_err());
        assert!(merge_loss(&ckpt, &c, &QaDataset::default(), &e, 0.3).is_err());
    }

    #[test]
    fn dataset_loss_properties() {
        let c = cfg();
        let ckpt = init_model(&c, 4).unwrap();
        let d = random_pairs(30, 5);
        let base = dataset_loss(&ckpt, &c, &d).unwrap();

        let single = ds(&[d.token_pairs()[0]]);
        let (q, a) = d.token_pairs()[0];
        assert_eq!(dataset_loss(&ckpt, &c, &single).unwrap(), crate::toy_lm::ce_loss(&ckpt, &c, q, a).unwrap());

        let mut rev = d.clone();
        rev.pairs.reverse();
        assert!((dataset_loss(&ckpt, &c, &rev).unwrap() - base).abs() < 1e-9);
        let twice = d.concat(&d);
        assert!((dataset_loss(&ckpt, &c, &twice).unwrap() - base).abs() < 1e-9);

        let u = dataset_loss(&uniform(&c), &c, &d).unwrap();
        assert!((u - (c.vocab_size as f64).ln()).abs() < 1e-4);
    }

    #[test]
    fn refusal_rate_with_trivial_judges() {
        let c = cfg();
        let ckpt = init_model(&c, 6).unwrap();
        let d = random_pairs(10, 7);
        let prompts = d.questions();
        let yes = |_: &[Token]| true;
        let no = |_: &[Token]| false;
        assert_eq!(refusal_rate(&ckpt, &c, &prompts, &yes, 3).unwrap(), 1.0);
        assert_eq!(refusal_rate(&ckpt, &c, &prompts, &no, 3).unwrap(), 0.0);
        assert!(refusal_rate(&ckpt, &c, &[], &yes, 3).is_err());

        let judge = FirstTokenJudge { refusal_token: 3 };
        assert!(judge.is_refusal(&[3, 1]));
        assert!(!judge.is_refusal(&[4, 3]));
        assert!(!judge.is_refusal(&[]));
    }

    #[test]
    fn mc_tie_rule_and_validation() {
        let c = cfg();
        let ckpt = init_model(&c, 8).unwrap();
        let item = |correct| McItem {
            question: vec![3, 4],
            candidates: vec![vec![5, 6], vec![5, 6]],
            correct_index: correct,
        };
        assert_eq!(mc_accuracy(&ckpt, &c, &[item(0)]).unwrap(), 1.0);
        assert_eq!(mc_accuracy(&ckpt, &c, &[item(1)]).unwrap(), 0.0);
        assert!(mc_accuracy(&ckpt, &c, &[item(2)]).is_err());
        let mut one = item(0);
        one.candidates.pop();
        assert!(mc_accuracy(&ckpt, &c, &[one]).is_err());
        assert!(mc_accuracy(&ckpt, &c, &[]).is_err());
    }

    #[test]
    fn mc_uniform_model_is_chance() {
        let c = cfg();
        let mut rng = rng_for(9, "mc-uniform");
        let items: Vec<McItem> = (0..1000)
            .map(|_| McItem {
                question: vec![rng.random_range(3..16), rng.random_range(3..16)],
                candidates: (0..4).map(|_| vec![rng.random_range(3..16), rng.random_range(3..16)]).collect(),
                correct_index: rng.random_range(0..4),
            })
            .collect();
        let acc = mc_accuracy(&uniform(&c), &c, &items).unwrap();
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");

        // a constant added to every logit leaves the choice unchanged
        let mut ckpt = init_model(&c, 10).unwrap();
        let g = ckpt.tensors.get_mut("ln_f.g").unwrap().data_mut();
        g[0] = 0.0;
        ckpt.tensors.get_mut("ln_f.b").unwrap().data_mut()[0] = 1.0;
        let before = mc_accuracy(&ckpt, &c, &items).unwrap();
        for v in &mut ckpt.tensors.get_mut("head").unwrap().data_mut()[..c.vocab_size] {
            *v += 2.5;
        }
        assert_eq!(mc_accuracy(&ckpt, &c, &items).unwrap(), before);
    }

    #[test]
    fn memorized_pairs_score_perfectly() {
        let c = cfg();
        let pairs: [(&[Token], &[Token]); 4] = [
            (&[3, 4], &[5, 2]),
            (&[4, 3], &[6, 2]),
            (&[7, 8], &[9, 2]),
            (&[8, 7], &[10, 2]),
        ];
        let d = ds(&pairs);
        let hp = TrainParams { lr: 1e-2, steps: 1500, batch: 4 };
        let trained = train(&init_model(&c, 11).unwrap(), &c, &d, &hp, 0).unwrap();
        let mut rng = rng_for(12, "mc-distractors");
        let items: Vec<McItem> = pairs
            .iter()
            .map(|(q, a)| {
                let correct = rng.random_range(0..3);
                let candidates = (0..3)
                    .map(|i| if i == correct { a.to_vec() } else { vec![rng.random_range(11..16), 2] })
                    .collect();
                McItem { question: q.to_vec(), candidates, correct_index: correct }
            })
            .collect();
        assert_eq!(mc_accuracy(&trained, &c, &items).unwrap(), 1.0);
        assert_eq!(exact_match_accuracy(&trained, &c, &d, 2).unwrap(), 1.0);
    }
}
