//! CMA-ES with rank-one and rank-μ covariance updates and cumulative
//! step-size adaptation. Standard default constants as functions of the
//! dimension n and population size p:
//!
//! | constant | value |
//! |---|---|
//! | p | `4 + floor(3 ln n)` |
//! | μ | `floor(p / 2)`, weights `ln(μ + 1/2) - ln i`, normalized |
//! | c_σ | `(μ_eff + 2) / (n + μ_eff + 5)` |
//! | d_σ | `1 + 2 max(0, sqrt((μ_eff - 1)/(n + 1)) - 1) + c_σ` |
//! | c_c | `(4 + μ_eff/n) / (n + 4 + 2 μ_eff/n)` |
//! | c_1 | `2 / ((n + 1.3)² + μ_eff)` |
//! | c_μ | `min(1 - c_1, 2 (μ_eff - 2 + 1/μ_eff) / ((n + 2)² + μ_eff))` |
//!
//! Candidates are clipped to the box before evaluation and the clipped
//! points drive the update.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

const EIGEN_FLOOR: f64 = 1e-14;

/// Axis-aligned box over named parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SearchSpace {
    pub fn new(names: Vec<String>, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("search space needs at least one parameter"));
        }
        if lower.len() != names.len() || upper.len() != names.len() {
            return Err(Error::invalid("search space bounds must match the parameter names"));
        }
        for ((n, l), u) in names.iter().zip(&lower).zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::invalid(format!("invalid bounds for {n}: [{l}, {u}]")));
            }
        }
        Ok(SearchSpace { names, lower, upper })
    }

    /// Same bounds on every coordinate, named `x0..`.
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        SearchSpace::new(
            (0..n).map(|i| format!("x{i}")).collect(),
            vec![lower; n],
            vec![upper; n],
        )
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn clip(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }
}

pub fn default_population(n: usize) -> usize {
    4 + (3.0 * (n as f64).ln()).floor() as usize
}

/// Complete optimizer state between generations.
#[derive(Debug, Clone)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub sigma: f64,
    pub covariance: DMatrix<f64>,
    pub p_sigma: DVector<f64>,
    pub p_c: DVector<f64>,
    pub generation: usize,
    pub population: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    // eigendecomposition of the covariance: C = B diag(d²) Bᵀ
    b: DMatrix<f64>,
    d: DVector<f64>,
}

impl CmaState {
    pub fn new(x0: &[f64], sigma0: f64, population: usize) -> Result<Self> {
        let n = x0.len();
        if n == 0 {
            return Err(Error::invalid("CMA-ES needs at least one dimension"));
        }
        if !(sigma0 > 0.0 && sigma0.is_finite()) {
            return Err(Error::invalid(format!("sigma0 {sigma0} must be positive")));
        }
        if population < 2 {
            return Err(Error::invalid("CMA-ES population must be at least 2"));
        }
        let nf = n as f64;
        let mu = population / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Ok(CmaState {
            mean: DVector::from_column_slice(x0),
            sigma: sigma0,
            covariance: DMatrix::identity(n, n),
            p_sigma: DVector::zeros(n),
            p_c: DVector::zeros(n),
            generation: 0,
            population,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            b: DMatrix::identity(n, n),
            d: DVector::from_element(n, 1.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mu(&self) -> usize {
        self.weights.len()
    }

    /// Samples one generation of candidates, clipped into `space`.
    pub fn ask(&self, space: &SearchSpace, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let n = self.dim();
        let bd = &self.b * DMatrix::from_diagonal(&self.d);
        (0..self.population)
            .map(|_| {
                let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = &self.mean + (&bd * z) * self.sigma;
                let mut v: Vec<f64> = x.iter().copied().collect();
                space.clip(&mut v);
                v
            })
            .collect()
    }

    /// Updates the distribution from evaluated candidates. `ranked` must be
    /// sorted best first.
    pub fn tell(&mut self, ranked: &[&[f64]]) {
        let n = self.dim();
        let ys: Vec<DVector<f64>> = ranked
            .iter()
            .take(self.mu())
            .map(|x| (DVector::from_column_slice(x) - &self.mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(n);
        for (w, y) in self.weights.iter().zip(&ys) {
            y_w += y * *w;
        }
        self.mean += &y_w * self.sigma;

        let inv_sqrt_c = &self.b * DMatrix::from_diagonal(&self.d.map(|v| 1.0 / v)) * self.b.transpose();
        let cs = self.c_sigma;
        self.p_sigma = &self.p_sigma * (1.0 - cs) + (inv_sqrt_c * &y_w) * (cs * (2.0 - cs) * self.mu_eff).sqrt();
        let g = (self.generation + 1) as f64;
        let ps_norm = self.p_sigma.norm();
        let h_sigma = ps_norm / (1.0 - (1.0 - cs).powf(2.0 * g)).sqrt() / self.chi_n < 1.4 + 2.0 / (n as f64 + 1.0);
        let hs = if h_sigma { 1.0 } else { 0.0 };
        let cc = self.c_c;
        self.p_c = &self.p_c * (1.0 - cc) + &y_w * (hs * (cc * (2.0 - cc) * self.mu_eff).sqrt());

        let mut rank_mu = DMatrix::zeros(n, n);
        for (w, y) in self.weights.iter().zip(&ys) {
            rank_mu += (y * y.transpose()) * *w;
        }
        let rank_one = &self.p_c * self.p_c.transpose();
        let correction = (1.0 - hs) * cc * (2.0 - cc);
        self.covariance = &self.covariance * (1.0 - self.c_1 - self.c_mu + self.c_1 * correction)
            + rank_one * self.c_1
            + rank_mu * self.c_mu;
        self.covariance = (&self.covariance + self.covariance.transpose()) * 0.5;

        self.sigma *= ((cs / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();
        self.generation += 1;
        self.decompose();
    }

    fn decompose(&mut self) {
        let eig = SymmetricEigen::new(self.covariance.clone());
        let vals = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
        self.b = eig.eigenvectors;
        self.d = vals.map(f64::sqrt);
        self.covariance = &self.b * DMatrix::from_diagonal(&vals) * self.b.transpose();
        self.covariance = (&self.covariance + self.covariance.transpose()) * 0.5;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub generation: usize,
    /// Best objective value seen so far.
    pub best_f: f64,
    /// Mean of this generation's finite objective values.
    pub mean_f: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaResult {
    pub best_x: Vec<f64>,
    pub best_f: f64,
    pub history: Vec<HistoryRow>,
    /// Best candidate of each generation.
    pub generation_best: Vec<(Vec<f64>, f64)>,
    pub evaluations: usize,
    /// Evaluations that returned a non-finite value (scored as +inf).
    pub nonfinite: usize,
}

impl CmaResult {
    pub fn nonfinite_fraction(&self) -> f64 {
        if self.evaluations == 0 {
            0.0
        } else {
            self.nonfinite as f64 / self.evaluations as f64
        }
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("generation,best_f,mean_f,sigma\n");
        for r in &self.history {
            out.push_str(&format!("{},{},{},{}\n", r.generation, r.best_f, r.mean_f, r.sigma));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmaOptions {
    pub population: Option<usize>,
    /// Stop once `sigma * max(d)` falls below this.
    pub tol_x: f64,
    /// Stop once the best values of the last `10 + ceil(30 n / p)`
    /// generations and all values of the current one span less than this.
    pub tol_fun: f64,
}

impl Default for CmaOptions {
    fn default() -> Self {
        CmaOptions {
            population: None,
            tol_x: 1e-15,
            tol_fun: 1e-12,
        }
    }
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn rank_cmp(a: (&[f64], f64), b: (&[f64], f64)) -> Ordering {
    a.1.total_cmp(&b.1).then_with(|| lex_cmp(a.0, b.0))
}

pub fn cma_es_minimize<F>(
    objective: F,
    space: &SearchSpace,
    x0: &[f64],
    sigma0: f64,
    steps: usize,
    seed: u64,
) -> Result<CmaResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cma_es_minimize_with(objective, space, x0, sigma0, steps, seed, &CmaOptions::default())
}

/// Minimizes `objective` over `space` for at most `steps` generations.
/// Candidates of one generation are evaluated in parallel; results do not
/// depend on the thread count.
pub fn cma_es_minimize_with<F>(
    objective: F,
    space: &SearchSpace,
    x0: &[f64],
    sigma0: f64,
    steps: usize,
    seed: u64,
    opts: &CmaOptions,
) -> Result<CmaResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if !space.contains(x0) {
        return Err(Error::invalid("x0 must lie inside the search space"));
    }
    let population = opts.population.unwrap_or_else(|| default_population(space.dim()));
    let mut state = CmaState::new(x0, sigma0, population)?;
    let mut rng = rng_for(seed, "cma-es");
    let score = |x: &[f64]| {
        let f = objective(x);
        if f.is_finite() {
            f
        } else {
            f64::INFINITY
        }
    };

    let mut best_x = x0.to_vec();
    let mut best_f = score(x0);
    let mut evaluations = 1;
    let mut nonfinite = usize::from(best_f.is_infinite());
    let mut history = Vec::new();
    let mut generation_best = Vec::new();
    let window = 10 + (30 * space.dim()).div_ceil(population);

    for generation in 0..steps {
        let xs = state.ask(space, &mut rng);
        let fs: Vec<f64> = xs.par_iter().map(|x| score(x)).collect();
        evaluations += xs.len();
        nonfinite += fs.iter().filter(|f| f.is_infinite()).count();

        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.sort_by(|&a, &b| rank_cmp((&xs[a], fs[a]), (&xs[b], fs[b])));
        let top = order[0];
        if rank_cmp((&xs[top], fs[top]), (&best_x, best_f)).is_lt() {
            best_x = xs[top].clone();
            best_f = fs[top];
        }
        generation_best.push((xs[top].clone(), fs[top]));
        let finite: Vec<f64> = fs.iter().copied().filter(|f| f.is_finite()).collect();
        let mean_f = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let ranked: Vec<&[f64]> = order.iter().map(|&i| xs[i].as_slice()).collect();
        state.tell(&ranked);
        history.push(HistoryRow {
            generation,
            best_f,
            mean_f,
            sigma: state.sigma,
        });
        let spread = state.sigma * state.d.max();
        if !spread.is_finite() || spread < opts.tol_x {
            break;
        }
        if generation_best.len() >= window {
            let recent = generation_best[generation_best.len() - window..]
                .iter()
                .map(|(_, f)| *f)
                .chain(fs.iter().copied());
            let (lo, hi) = recent.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| (lo.min(f), hi.max(f)));
            if hi - lo < opts.tol_fun {
                break;
            }
        }
    }
    Ok(CmaResult {
        best_x,
        best_f,
        history,
        generation_best,
        evaluations,
        nonfinite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn population_formula() {
        assert_eq!(default_population(1), 4);
        assert_eq!(default_population(2), 6);
        assert_eq!(default_population(3), 7);
        assert_eq!(default_population(10), 10);
    }

    #[test]
    fn minimizes_sphere() {
        let space = SearchSpace::uniform(5, -5.0, 5.0).unwrap();
        let r = cma_es_minimize(sphere, &space, &[1.0; 5], 0.5, 500, 0).unwrap();
        assert!(r.best_f < 1e-10, "{}", r.best_f);
    }

    #[test]
    fn deterministic_and_monotone() {
        let space = SearchSpace::uniform(3, -2.0, 2.0).unwrap();
        let a = cma_es_minimize(sphere, &space, &[1.0; 3], 0.3, 50, 7).unwrap();
        let b = cma_es_minimize(sphere, &space, &[1.0; 3], 0.3, 50, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.history.windows(2).all(|w| w[1].best_f <= w[0].best_f));
    }

    #[test]
    fn covariance_stays_symmetric() {
        let space = SearchSpace::uniform(4, -3.0, 3.0).unwrap();
        let mut st = CmaState::new(&[1.0; 4], 0.5, 8).unwrap();
        let mut rng = rng_for(1, "t");
        for _ in 0..30 {
            let xs = st.ask(&space, &mut rng);
            let mut order: Vec<usize> = (0..xs.len()).collect();
            order.sort_by(|&a, &b| sphere(&xs[a]).total_cmp(&sphere(&xs[b])));
            let ranked: Vec<&[f64]> = order.iter().map(|&i| xs[i].as_slice()).collect();
            st.tell(&ranked);
            let c = &st.covariance;
            assert!((c - c.transpose()).abs().max() <= 1e-12);
            assert!(st.sigma > 0.0);
            assert!(SymmetricEigen::new(c.clone()).eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn candidates_respect_bounds_and_nonfinite_is_penalized() {
        let space = SearchSpace::uniform(2, 0.0, 1.0).unwrap();
        let r = cma_es_minimize(
            |x: &[f64]| if x[0] > 0.7 { f64::NAN } else { (x[0] - 0.6).powi(2) + x[1] },
            &space,
            &[0.5, 0.5],
            0.5,
            40,
            3,
        )
        .unwrap();
        assert!(r.nonfinite > 0);
        assert!(r.best_f.is_finite());
        assert!(space.contains(&r.best_x));
        assert!(r.generation_best.iter().all(|(x, _)| space.contains(x)));
    }

    #[test]
    fn invalid_inputs() {
        assert!(SearchSpace::new(vec![], vec![], vec![]).is_err());
        assert!(SearchSpace::uniform(2, 1.0, 1.0).is_err());
        let space = SearchSpace::uniform(2, 0.0, 1.0).unwrap();
        assert!(cma_es_minimize(sphere, &space, &[2.0, 0.0], 0.1, 5, 0).is_err());
        assert!(cma_es_minimize(sphere, &space, &[0.5, 0.5], 0.0, 5, 0).is_err());
    }
}
