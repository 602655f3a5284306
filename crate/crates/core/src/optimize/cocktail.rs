use crate::criterion::model_dataset_loss;
use crate::data::QaDataset;
use crate::error::{Error, Result};
use crate::tensor_store::Checkpoint;
use crate::toy_lm::{ToyLm, ToyLmConfig};

/// Max-subtracted softmax.
pub fn softmax(w: &[f64]) -> Vec<f64> {
    let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `softmax(-loss)`: lower-loss experts get larger weights.
pub fn cocktail_weights_from_losses(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.len() < 2 {
        return Err(Error::invalid("LM-Cocktail needs at least 2 experts"));
    }
    if let Some(bad) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::invalid(format!("non-finite expert loss {bad}")));
    }
    let w: Vec<f64> = losses.iter().map(|l| -l).collect();
    Ok(softmax(&w))
}

/// LM-Cocktail weighting: each expert's weight is the softmax of its
/// negative mean cross-entropy on `dataset`.
pub fn lm_cocktail_weights(
    experts: &[&Checkpoint],
    cfg: &ToyLmConfig,
    dataset: &QaDataset,
) -> Result<Vec<f64>> {
    if experts.len() < 2 {
        return Err(Error::invalid("LM-Cocktail needs at least 2 experts"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("LM-Cocktail needs a non-empty dataset"));
    }
    let losses = experts
        .iter()
        .map(|e| model_dataset_loss(&ToyLm::from_checkpoint(e, cfg)?, dataset))
        .collect::<Result<Vec<_>>>()?;
    cocktail_weights_from_losses(&losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form() {
        let l = cocktail_weights_from_losses(&[0.0, std::f64::consts::LN_2]).unwrap();
        assert!((l[0] - 2.0 / 3.0).abs() < 1e-9 && (l[1] - 1.0 / 3.0).abs() < 1e-9);
        let eq = cocktail_weights_from_losses(&[1.3, 1.3]).unwrap();
        assert!((eq[0] - 0.5).abs() < 1e-9 && (eq[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn extreme_losses_stay_finite() {
        let l = cocktail_weights_from_losses(&[1e4, 2e4, 1e4 + 1.0]).unwrap();
        assert!(l.iter().all(|x| x.is_finite()));
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(cocktail_weights_from_losses(&[1.0]).is_err());
        assert!(cocktail_weights_from_losses(&[1.0, f64::NAN]).is_err());
    }
}
