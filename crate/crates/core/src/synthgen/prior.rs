//! Gaussian-mixture pose prior, Mahalanobis shape prior and the elbow/knee
//! bending penalty.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::body::{BodyPoseParams, NUM_POSE_PARAMS, NUM_SHAPE_PARAMS};
use crate::error::{Error, Result};
use crate::seed;

/// Dimension of the body pose (root triple excluded).
pub const BODY_POSE_DIM: usize = NUM_POSE_PARAMS - 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePrior {
    pub gmm: Vec<GaussianComponent>,
    pub shape_mean: Vec<f64>,
    pub shape_covariance: Vec<Vec<f64>>,
    /// `(theta index, sign)` pairs penalized by `exp(sign * theta)`.
    pub bend_components: Vec<(usize, f64)>,
}

fn to_matrix(rows: &[Vec<f64>], n: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Config(format!("{what} covariance must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Inverse and `log det` of a symmetric positive definite matrix.
fn spd_inverse(m: DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Config(format!("{what} covariance is not positive definite")))?;
    let l = chol.l_dirty();
    let mut log_det = 0.0;
    for i in 0..n {
        log_det += 2.0 * l[(i, i)].ln();
    }
    if !log_det.is_finite() {
        return Err(Error::Config(format!("{what} covariance is singular")));
    }
    Ok((chol.inverse(), log_det))
}

#[derive(Debug, Clone)]
struct PreparedComponent {
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    /// `log w - ½ log det(2πΣ)`
    log_norm: f64,
}

/// A prior with factorized covariances, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub struct PreparedPrior {
    components: Vec<PreparedComponent>,
    shape_mean: DVector<f64>,
    shape_precision: DMatrix<f64>,
    pub bend_components: Vec<(usize, f64)>,
}

impl PosePrior {
    pub fn check(&self) -> Result<()> {
        self.prepare().map(|_| ())
    }

    pub fn prepare(&self) -> Result<PreparedPrior> {
        if self.gmm.is_empty() {
            return Err(Error::Config("pose prior has no mixture components".into()));
        }
        let wsum: f64 = self.gmm.iter().map(|c| c.weight).sum();
        if (wsum - 1.0).abs() > 1e-6 || self.gmm.iter().any(|c| !(c.weight > 0.0)) {
            return Err(Error::Config(format!("mixture weights must be positive and sum to 1, got {wsum}")));
        }
        let d = self.gmm[0].mean.len();
        let mut components = Vec::with_capacity(self.gmm.len());
        for (i, c) in self.gmm.iter().enumerate() {
            if c.mean.len() != d {
                return Err(Error::Config(format!("component {i} has dimension {}, expected {d}", c.mean.len())));
            }
            let what = format!("pose prior component {i}");
            let (precision, log_det) = spd_inverse(to_matrix(&c.covariance, d, &what)?, &what)?;
            components.push(PreparedComponent {
                mean: DVector::from_column_slice(&c.mean),
                precision,
                log_norm: c.weight.ln() - 0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det),
            });
        }
        let s = self.shape_mean.len();
        let (shape_precision, _) = spd_inverse(to_matrix(&self.shape_covariance, s, "shape prior")?, "shape prior")?;
        for &(idx, sign) in &self.bend_components {
            if idx >= NUM_POSE_PARAMS || sign.abs() != 1.0 {
                return Err(Error::Config(format!("invalid bend component ({idx}, {sign})")));
            }
        }
        Ok(PreparedPrior {
            components,
            shape_mean: DVector::from_column_slice(&self.shape_mean),
            shape_precision,
            bend_components: self.bend_components.clone(),
        })
    }

    /// EM-fitted mixture over `pose_samples` (body poses, root excluded) with
    /// a shape prior estimated from `shape_samples`.
    pub fn fit(
        pose_samples: &[Vec<f64>],
        shape_samples: &[Vec<f64>],
        bend_components: Vec<(usize, f64)>,
        cfg: &GmmConfig,
    ) -> Result<Self> {
        let gmm = fit_gmm(pose_samples, cfg)?;
        let (shape_mean, shape_cov) = mean_and_covariance(shape_samples, cfg.shape_regularization)?;
        let prior = Self {
            gmm,
            shape_mean,
            shape_covariance: from_matrix(&shape_cov),
            bend_components,
        };
        prior.check()?;
        Ok(prior)
    }

    /// Prior learnt from a pose library augmented with Gaussian jitter.
    pub fn from_library(library: &[BodyPoseParams], bend_components: Vec<(usize, f64)>, cfg: &GmmConfig) -> Result<Self> {
        if library.is_empty() {
            return Err(Error::Input("pose library is empty".into()));
        }
        let mut rng = seed::rng(&[cfg.seed, seed::tag("gmm-samples")]);
        let mut poses = Vec::with_capacity(cfg.samples);
        let mut shapes = Vec::with_capacity(cfg.samples);
        for _ in 0..cfg.samples {
            let base = &library[rng.random_range(0..library.len())];
            let p: Vec<f64> = base.body_pose().iter().map(|v| v + cfg.jitter_std * gauss(&mut rng)).collect();
            let b: Vec<f64> = base.beta.iter().map(|v| v + cfg.jitter_std * gauss(&mut rng)).collect();
            poses.push(p);
            shapes.push(b);
        }
        Self::fit(&poses, &shapes, bend_components, cfg)
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub components: usize,
    pub iterations: usize,
    pub tolerance: f64,
    /// Added to every covariance diagonal.
    pub regularization: f64,
    pub shape_regularization: f64,
    /// Library augmentation used by [`PosePrior::from_library`].
    pub samples: usize,
    pub jitter_std: f64,
    pub seed: u64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 8,
            iterations: 100,
            tolerance: 1e-6,
            regularization: 1e-3,
            shape_regularization: 1e-3,
            samples: 2000,
            jitter_std: 0.1,
            seed: 0,
        }
    }
}

fn mean_and_covariance(samples: &[Vec<f64>], reg: f64) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::Input("no samples to estimate a covariance from".into()));
    }
    let d = samples[0].len();
    let mut mean = DVector::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n as f64;
    for i in 0..d {
        cov[(i, i)] += reg;
    }
    Ok((mean.iter().copied().collect(), cov))
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Expectation-maximization for a full-covariance mixture.
pub fn fit_gmm(samples: &[Vec<f64>], cfg: &GmmConfig) -> Result<Vec<GaussianComponent>> {
    let n = samples.len();
    let m = cfg.components;
    if m == 0 || n < m {
        return Err(Error::Config(format!("cannot fit {m} components to {n} samples")));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Input("samples have inconsistent dimension".into()));
    }
    let xs: Vec<DVector<f64>> = samples.iter().map(|s| DVector::from_column_slice(s)).collect();
    let (_, global_cov) = mean_and_covariance(samples, cfg.regularization)?;
    let mut rng = seed::rng(&[cfg.seed, seed::tag("gmm-init")]);
    // D²-weighted seeding of the initial means.
    let mut picks = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = xs.iter().map(|x| (x - &xs[picks[0]]).norm_squared()).collect();
    while picks.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            d2.iter().position(|&d| {
                u -= d;
                u < 0.0
            })
            .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        picks.push(next);
        for (d, x) in d2.iter_mut().zip(&xs) {
            *d = d.min((x - &xs[next]).norm_squared());
        }
    }
    let mut comps: Vec<GaussianComponent> = picks
        .iter()
        .map(|&i| GaussianComponent {
            weight: 1.0 / m as f64,
            mean: samples[i].clone(),
            covariance: from_matrix(&global_cov),
        })
        .collect();

    let mut prev = f64::NEG_INFINITY;
    let mut resp = vec![vec![0.0; m]; n];
    for _ in 0..cfg.iterations {
        let prior = PosePrior {
            gmm: comps.clone(),
            shape_mean: vec![0.0],
            shape_covariance: vec![vec![1.0]],
            bend_components: Vec::new(),
        }
        .prepare()?;
        let mut ll = 0.0;
        for (x, r) in xs.iter().zip(resp.iter_mut()) {
            for (k, c) in prior.components.iter().enumerate() {
                r[k] = c.log_norm - 0.5 * c.quad(x);
            }
            let lse = log_sum_exp(r);
            ll += lse;
            r.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        ll /= n as f64;

        for k in 0..m {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            if nk < 1e-8 {
                let i = rng.random_range(0..n);
                comps[k] = GaussianComponent {
                    weight: 1.0 / n as f64,
                    mean: samples[i].clone(),
                    covariance: from_matrix(&global_cov),
                };
                continue;
            }
            let mut mean = DVector::zeros(d);
            for (x, r) in xs.iter().zip(&resp) {
                mean.axpy(r[k], x, 1.0);
            }
            mean /= nk;
            let mut cov = DMatrix::zeros(d, d);
            for (x, r) in xs.iter().zip(&resp) {
                let c = x - &mean;
                cov.ger(r[k], &c, &c, 1.0);
            }
            cov /= nk;
            for i in 0..d {
                cov[(i, i)] += cfg.regularization;
            }
            comps[k] = GaussianComponent {
                weight: nk / n as f64,
                mean: mean.iter().copied().collect(),
                covariance: from_matrix(&cov),
            };
        }
        let total: f64 = comps.iter().map(|c| c.weight).sum();
        comps.iter_mut().for_each(|c| c.weight /= total);

        if (ll - prev).abs() < cfg.tolerance {
            break;
        }
        prev = ll;
    }
    Ok(comps)
}

impl PreparedComponent {
    fn quad(&self, x: &DVector<f64>) -> f64 {
        let c = x - &self.mean;
        c.dot(&(&self.precision * &c))
    }
}

impl PreparedPrior {
    pub fn pose_dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// `-log p(x)` and its gradient.
    pub fn pose_neg_log_density(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let x = DVector::from_column_slice(x);
        let diffs: Vec<DVector<f64>> = self.components.iter().map(|c| &c.precision * (&x - &c.mean)).collect();
        let logs: Vec<f64> = self
            .components
            .iter()
            .zip(&diffs)
            .map(|(c, pd)| c.log_norm - 0.5 * (&x - &c.mean).dot(pd))
            .collect();
        let lse = log_sum_exp(&logs);
        let mut grad = DVector::zeros(x.len());
        for (l, pd) in logs.iter().zip(&diffs) {
            grad.axpy((l - lse).exp(), pd, 1.0);
        }
        (-lse, grad.iter().copied().collect())
    }

    /// Squared Mahalanobis distance of `beta` and its gradient.
    pub fn shape_mahalanobis(&self, beta: &[f64]) -> (f64, Vec<f64>) {
        let c = DVector::from_column_slice(beta) - &self.shape_mean;
        let pc = &self.shape_precision * &c;
        (c.dot(&pc), pc.iter().map(|v| 2.0 * v).collect())
    }

    /// `Σ exp(sign * theta[idx])` and its gradient w.r.t. full theta.
    pub fn bend_penalty(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; theta.len()];
        let mut total = 0.0;
        for &(idx, sign) in &self.bend_components {
            let e = (sign * theta[idx]).exp();
            total += e;
            grad[idx] += sign * e;
        }
        (total, grad)
    }
}

/// The prior must match the body model's pose and shape dimensions.
pub fn check_dimensions(prior: &PreparedPrior) -> Result<()> {
    if prior.pose_dim() != BODY_POSE_DIM || prior.shape_mean.len() != NUM_SHAPE_PARAMS {
        return Err(Error::Config(format!(
            "prior dimensions {}/{} do not match body model {BODY_POSE_DIM}/{NUM_SHAPE_PARAMS}",
            prior.pose_dim(),
            prior.shape_mean.len()
        )));
    }
    Ok(())
}
