use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMethod {
    TaskArithmetic,
    LinearSoup,
    Slerp,
    Ties,
    Dare,
    DareTies,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 6] = [
        MergeMethod::TaskArithmetic,
        MergeMethod::LinearSoup,
        MergeMethod::Slerp,
        MergeMethod::Ties,
        MergeMethod::Dare,
        MergeMethod::DareTies,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::TaskArithmetic => "task-arithmetic",
            MergeMethod::LinearSoup => "linear-soup",
            MergeMethod::Slerp => "slerp",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
            MergeMethod::DareTies => "dare-ties",
        }
    }

    pub fn needs_density(self) -> bool {
        matches!(self, MergeMethod::Ties | MergeMethod::DareTies)
    }

    pub fn needs_drop_prob(self) -> bool {
        matches!(self, MergeMethod::Dare | MergeMethod::DareTies)
    }

    pub fn needs_slerp_t(self) -> bool {
        self == MergeMethod::Slerp
    }

    /// Number of weights a recipe carries for a pool of `n_models`
    /// (base included). Linear soup weights every model; the task-vector
    /// methods weight only the non-base models.
    pub fn lambda_count(self, n_models: usize) -> usize {
        match self {
            MergeMethod::LinearSoup => n_models,
            _ => n_models.saturating_sub(1),
        }
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown merge method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slerp_t: Option<f64>,
}

/// Everything needed to reproduce one merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub method: MergeMethod,
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default)]
    pub seed: u64,
}

impl MergeRecipe {
    pub fn task_arithmetic(lambdas: Vec<f64>) -> Self {
        MergeRecipe {
            method: MergeMethod::TaskArithmetic,
            lambdas,
            hyper: Hyper::default(),
            seed: 0,
        }
    }

    pub fn ties(lambdas: Vec<f64>, density: f64) -> Self {
        MergeRecipe {
            method: MergeMethod::Ties,
            lambdas,
            hyper: Hyper {
                density: Some(density),
                ..Hyper::default()
            },
            seed: 0,
        }
    }

    pub fn dare_ties(lambdas: Vec<f64>, density: f64, drop_prob: f64, seed: u64) -> Self {
        MergeRecipe {
            method: MergeMethod::DareTies,
            lambdas,
            hyper: Hyper {
                density: Some(density),
                drop_prob: Some(drop_prob),
                slerp_t: None,
            },
            seed,
        }
    }

    pub fn slerp(t: f64) -> Self {
        MergeRecipe {
            method: MergeMethod::Slerp,
            lambdas: vec![1.0],
            hyper: Hyper {
                slerp_t: Some(t),
                ..Hyper::default()
            },
            seed: 0,
        }
    }

    /// Checks the recipe against a pool of `n_models` checkpoints (base
    /// included).
    pub fn validate(&self, n_models: usize) -> Result<()> {
        if self.method.needs_slerp_t() && n_models != 2 {
            return Err(Error::invalid(format!(
                "slerp is only defined for exactly 2 models, got {n_models}"
            )));
        }
        let expected = self.method.lambda_count(n_models);
        if self.lambdas.len() != expected {
            return Err(Error::invalid(format!(
                "{} over {n_models} models needs {expected} lambdas, recipe has {}",
                self.method,
                self.lambdas.len()
            )));
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !l.is_finite()) {
            return Err(Error::invalid(format!("non-finite lambda {bad}")));
        }
        if self.method.needs_density() {
            let d = self
                .hyper
                .density
                .ok_or_else(|| Error::invalid(format!("{} needs hyper.density", self.method)))?;
            check_density(d)?;
        }
        if self.method.needs_drop_prob() {
            let p = self
                .hyper
                .drop_prob
                .ok_or_else(|| Error::invalid(format!("{} needs hyper.drop_prob", self.method)))?;
            check_drop_prob(p)?;
        }
        if self.method.needs_slerp_t() {
            let t = self
                .hyper
                .slerp_t
                .ok_or_else(|| Error::invalid("slerp needs hyper.slerp_t"))?;
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid(format!("slerp_t {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("merge recipe", e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn check_density(d: f64) -> Result<()> {
    if d > 0.0 && d <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("density {d} outside (0, 1]")))
    }
}

pub(crate) fn check_drop_prob(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("drop_prob {p} outside [0, 1)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let r = MergeRecipe::dare_ties(vec![0.5], 0.25, 0.1, 9);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["method"], "dare-ties");
        assert_eq!(v["lambdas"][0], 0.5);
        assert_eq!(v["hyper"]["density"], 0.25);
        assert_eq!(v["hyper"]["drop_prob"], 0.1);
        assert!(v["hyper"].get("slerp_t").is_none());
        assert_eq!(v["seed"], 9);
        assert_eq!(MergeRecipe::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn validation() {
        assert!(MergeRecipe::task_arithmetic(vec![0.5]).validate(2).is_ok());
        assert!(MergeRecipe::task_arithmetic(vec![0.5]).validate(3).is_err());
        assert!(MergeRecipe::task_arithmetic(vec![f64::NAN]).validate(2).is_err());
        assert!(MergeRecipe::ties(vec![1.0], 0.0).validate(2).is_err());
        assert!(MergeRecipe::ties(vec![1.0], 1.0).validate(2).is_ok());
        assert!(MergeRecipe::dare_ties(vec![1.0], 0.5, 1.0, 0).validate(2).is_err());
        assert!(MergeRecipe::slerp(0.5).validate(2).is_ok());
        let err = MergeRecipe::slerp(0.5).validate(3).unwrap_err();
        assert!(err.to_string().contains("exactly 2"));
        let mut missing = MergeRecipe::ties(vec![1.0], 0.5);
        missing.hyper.density = None;
        assert!(missing.validate(2).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in MergeMethod::ALL {
            assert_eq!(m.as_str().parse::<MergeMethod>().unwrap(), m);
        }
        assert!("model-soup".parse::<MergeMethod>().is_err());
    }
}
