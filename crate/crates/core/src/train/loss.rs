//! Domain BCE, domain-scaled heatmap MSE and their combination.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::DomainLabel;

/// Mean binary cross-entropy on logits, synthetic = 1.
///
/// Per sample `max(s, 0) − s·d + ln(1 + e^{−|s|})`, finite for any finite `s`.
pub fn domain_loss(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if logits.dims() != labels.dims() || logits.rank() != 1 || logits.dims()[0] == 0 {
        return Err(Error::shape("domain loss", format!("{:?} (N ≥ 1)", labels.dims()), format!("{:?}", logits.dims())));
    }
    let labels = labels.to_dtype(logits.dtype())?;
    let softplus = log1p(&logits.abs()?.neg()?.exp()?)?;
    let per = ((logits.relu()? - (logits * &labels)?)? + softplus)?;
    Ok(per.mean_all()?)
}

/// `ln(1 + x)` for `x ≥ 0` via `ln(u)·x/(u − 1)`, `u = 1 + x`, which keeps full
/// precision for tiny `x`.
fn log1p(x: &Tensor) -> Result<Tensor> {
    let u = (x + 1.0)?;
    let d = (&u - 1.0)?;
    let exact = d.eq(0.0)?.to_dtype(x.dtype())?;
    let ratio = (x / (d + &exact)?)?;
    Ok(((u.log()? * ratio)? + (x * exact)?)?)
}

/// `S(I_i)`: `w_r` for real samples, 1 for synthetic ones.
pub fn domain_scales(domains: &[DomainLabel], real_weight: f64) -> Vec<f64> {
    domains
        .iter()
        .map(|d| match d {
            DomainLabel::Real => real_weight,
            DomainLabel::Synthetic => 1.0,
        })
        .collect()
}

/// `(1/N) Σ_i S_i · err_i` where `err_i` is the squared heatmap error averaged
/// over the elements of sample `i` that carry weight. Samples without any
/// weighted joint contribute zero.
///
/// `pred`, `target`: `N×K×h×w`; `weights`: `N×K`; `scales`: `N`.
pub fn pose_loss(pred: &Tensor, target: &Tensor, weights: &Tensor, scales: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() || pred.rank() != 4 {
        return Err(Error::shape("pose loss heatmaps", format!("{:?}", target.dims()), format!("{:?}", pred.dims())));
    }
    let (n, k, h, w) = pred.dims4()?;
    if weights.dims() != [n, k] || scales.dims() != [n] {
        return Err(Error::shape(
            "pose loss weights",
            format!("[{n}, {k}] and [{n}]"),
            format!("{:?} and {:?}", weights.dims(), scales.dims()),
        ));
    }
    let dt = pred.dtype();
    let weights = weights.to_dtype(dt)?;
    let sq = (pred - target.to_dtype(dt)?)?.sqr()?.sum((2, 3))?;
    let num = (sq * &weights)?.sum(1)?;
    let den = (weights.sum(1)? * (h * w) as f64)?;
    let empty = den.eq(0.0)?.to_dtype(dt)?;
    let err = (num / (den + empty)?)?;
    Ok((err * scales.to_dtype(dt)?)?.mean_all()?)
}

/// `L_P − λ L_D`.
pub fn total_loss(l_p: f64, l_d: f64, lambda: f64) -> f64 {
    l_p - lambda * l_d
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCounts {
    pub real: usize,
    pub synthetic: usize,
}

impl DomainCounts {
    pub fn of(domains: &[DomainLabel]) -> Self {
        let synthetic = domains.iter().filter(|d| **d == DomainLabel::Synthetic).count();
        Self {
            real: domains.len() - synthetic,
            synthetic,
        }
    }

    pub fn add(&mut self, o: DomainCounts) {
        self.real += o.real;
        self.synthetic += o.synthetic;
    }
}

/// Loss values averaged over the batches of one stage pass. Fields that the
/// stage does not compute are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_P", skip_serializing_if = "Option::is_none", default)]
    pub l_p: Option<f64>,
    #[serde(rename = "L_D", skip_serializing_if = "Option::is_none", default)]
    pub l_d: Option<f64>,
    #[serde(rename = "L_total", skip_serializing_if = "Option::is_none", default)]
    pub l_total: Option<f64>,
    pub per_domain_counts: DomainCounts,
}
