use super::model::{loss_and_grad, Packed};
use super::params::Params;
use super::*;
use crate::data::{PairKind, QaDataset, QaPair};

fn small() -> ToyLmConfig {
    ToyLmConfig {
        vocab_size: 16,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq: 12,
    }
}

fn dataset(pairs: &[(&[Token], &[Token])]) -> QaDataset {
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

#[test]
fn default_schema_names() {
    let cfg = ToyLmConfig::default();
    let mut expected = vec![
        "tok_emb".to_string(),
        "pos_emb".into(),
        "ln_f.g".into(),
        "ln_f.b".into(),
        "head".into(),
    ];
    for l in 0..cfg.n_layers {
        for p in [
            "ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.g", "ln2.b", "mlp.w1",
            "mlp.b1", "mlp.w2", "mlp.b2",
        ] {
            expected.push(format!("layers.{l}.{p}"));
        }
    }
    expected.sort();
    assert_eq!(cfg.tensor_names(), expected);
    let ckpt = init_model(&cfg, 0).unwrap();
    assert_eq!(ckpt.tensors.keys().cloned().collect::<Vec<_>>(), expected);
    assert_eq!(ckpt.num_params(), cfg.num_params());
    assert_eq!(ToyLmConfig::from_metadata(&ckpt.metadata).unwrap(), cfg);
}

#[test]
fn invalid_head_split() {
    let cfg = ToyLmConfig {
        d_model: 30,
        n_heads: 4,
        ..ToyLmConfig::default()
    };
    assert!(cfg.validate().is_err());
    assert!(init_model(&cfg, 0).is_err());
}

#[test]
fn init_is_deterministic() {
    let cfg = small();
    assert!(init_model(&cfg, 3).unwrap().bit_eq(&init_model(&cfg, 3).unwrap()));
    assert!(!init_model(&cfg, 3).unwrap().bit_eq(&init_model(&cfg, 4).unwrap()));
}

#[test]
fn forward_is_causal_and_reproducible() {
    let cfg = ToyLmConfig::default();
    let ckpt = init_model(&cfg, 1).unwrap();
    let seq: Vec<Token> = vec![9, 5, 12, 6, 30, 2, 44, 8];
    let full = forward(&ckpt, &cfg, &seq).unwrap();
    assert_eq!(full.dim(), (seq.len(), cfg.vocab_size));
    let again = forward(&ckpt, &cfg, &seq).unwrap();
    assert!(full.iter().zip(again.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    for cut in 1..seq.len() {
        let mut altered = seq.clone();
        for t in altered.iter_mut().skip(cut) {
            *t = (*t + 7) % cfg.vocab_size as Token;
        }
        let other = forward(&ckpt, &cfg, &altered).unwrap();
        for i in 0..cut {
            for v in 0..cfg.vocab_size {
                assert!((full[[i, v]] - other[[i, v]]).abs() < 1e-6);
            }
        }
    }
    for row in full.outer_iter() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let p_sum: f64 = row.iter().map(|x| (x - m).exp() / z).sum();
        assert!((p_sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn batched_forward_matches_single() {
    let cfg = ToyLmConfig::default();
    let model = ToyLm::from_checkpoint(&init_model(&cfg, 2).unwrap(), &cfg).unwrap();
    let pairs: Vec<(&[Token], &[Token])> = vec![
        (&[9, 5, 10, 6], &[12, 2]),
        (&[7, 44, 45, 46, 6], &[4, 44, 2]),
        (&[1], &[3]),
    ];
    let batched = model.pair_losses(&pairs).unwrap();
    for ((q, a), b) in pairs.iter().zip(&batched) {
        assert!((model.ce_loss(q, a).unwrap() - b).abs() < 1e-12);
    }
}

#[test]
fn uniform_logits_give_log_vocab() {
    let cfg = ToyLmConfig::default();
    let mut ckpt = init_model(&cfg, 5).unwrap();
    let head = ckpt.tensors.get_mut("head").unwrap();
    *head = crate::tensor_store::Tensor::zeros(head.shape().to_vec());
    let loss = ce_loss(&ckpt, &cfg, &[9, 5, 10, 6], &[12, 2]).unwrap();
    assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-4);
}

#[test]
fn loss_is_non_negative() {
    let cfg = small();
    for seed in 0..5 {
        let ckpt = init_model(&cfg, seed).unwrap();
        assert!(ce_loss(&ckpt, &cfg, &[3, 4], &[5, 2]).unwrap() >= 0.0);
    }
}

#[test]
fn input_validation() {
    let cfg = small();
    let ckpt = init_model(&cfg, 0).unwrap();
    assert!(ce_loss(&ckpt, &cfg, &[], &[2]).is_err());
    assert!(ce_loss(&ckpt, &cfg, &[3], &[]).is_err());
    assert!(ce_loss(&ckpt, &cfg, &[16], &[2]).is_err());
    assert!(forward(&ckpt, &cfg, &[1; 13]).is_err());
    let mut wrong = ckpt.clone();
    wrong.tensors.remove("head");
    assert!(ToyLm::from_checkpoint(&wrong, &cfg).is_err());
}

#[test]
fn generate_zero_tokens() {
    let cfg = small();
    let ckpt = init_model(&cfg, 0).unwrap();
    assert!(greedy_generate(&ckpt, &cfg, &[3, 4], 0).unwrap().is_empty());
    let out = greedy_generate(&ckpt, &cfg, &[3, 4], 50).unwrap();
    assert!(out.len() <= cfg.max_seq - 2);
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = small();
    let params = Params::init(&cfg, 11);
    let pairs: Vec<(&[Token], &[Token])> = vec![(&[3, 4, 5], &[6, 7, 2]), (&[8, 9], &[10, 2])];
    let (packed, targets): (Packed, _) = pack_pairs(&pairs, 0.5);
    let (_, grad) = loss_and_grad(&params, &cfg, &packed, &targets);
    let loss_at = |p: &Params| loss_and_grad(p, &cfg, &packed, &targets).0;
    let h = 1e-3;
    let grads = grad.slices();
    let n_tensors = grads.len();
    let mut checked = 0;
    for t in 0..n_tensors {
        let len = grads[t].len();
        // a handful of elements per tensor, spread across the buffer
        for k in 0..len.min(4) {
            let i = (k * 7919) % len;
            let mut plus = params.clone();
            plus.slices_mut()[t][i] += h;
            let mut minus = params.clone();
            minus.slices_mut()[t][i] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = grads[t][i];
            let denom = numeric.abs().max(analytic.abs()).max(1e-4);
            assert!(
                (numeric - analytic).abs() / denom <= 1e-2,
                "tensor {t} elem {i}: numeric {numeric} analytic {analytic}"
            );
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn zero_steps_returns_input() {
    let cfg = small();
    let ckpt = init_model(&cfg, 0).unwrap();
    let d = dataset(&[(&[3], &[4, 2])]);
    let hp = TrainParams {
        steps: 0,
        ..TrainParams::default()
    };
    assert!(train(&ckpt, &cfg, &d, &hp, 1).unwrap().bit_eq(&ckpt));
    assert!(train(&ckpt, &cfg, &QaDataset::default(), &hp, 1).is_err());
}

#[test]
fn memorizes_single_pair() {
    let cfg = ToyLmConfig::default();
    let ckpt = init_model(&cfg, 0).unwrap();
    let q: &[Token] = &[9, 5, 12, 6];
    let a: &[Token] = &[20, 2];
    let hp = TrainParams {
        steps: 500,
        ..TrainParams::default()
    };
    let trained = train(&ckpt, &cfg, &dataset(&[(q, a)]), &hp, 0).unwrap();
    assert!(ce_loss(&trained, &cfg, q, a).unwrap() < 0.05);
    assert_eq!(greedy_generate(&trained, &cfg, q, 5).unwrap(), a);
}

#[test]
fn fits_small_dataset_deterministically() {
    let cfg = ToyLmConfig::default();
    let ckpt = init_model(&cfg, 0).unwrap();
    let d = dataset(&[
        (&[9, 5, 10, 6], &[11, 2]),
        (&[10, 5, 10, 6], &[12, 2]),
        (&[7, 44, 45, 46, 6], &[3, 2]),
        (&[7, 50, 51, 52, 6], &[4, 50, 2]),
    ]);
    let hp = TrainParams {
        steps: 2000,
        lr: 3e-3,
        batch: 4,
    };
    let (a, log) = train_with_log(&ckpt, &cfg, &d, &hp, 9).unwrap();
    assert_eq!(log.len(), 2000);
    let model = ToyLm::from_checkpoint(&a, &cfg).unwrap();
    let losses = model.pair_losses(&d.token_pairs()).unwrap();
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!(mean < 0.1, "mean loss {mean}");
    let (b, _) = train_with_log(&ckpt, &cfg, &d, &hp, 9).unwrap();
    assert!(a.bit_eq(&b));
}
