//! Lifting 2D keypoints to body pose: reprojection data term plus pose,
//! shape and bending priors, minimized with L-BFGS.

use std::collections::VecDeque;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::body::{rodrigues_derivatives, BodyModel, BodyPoseParams, NUM_POSE_PARAMS, NUM_SHAPE_PARAMS};
use super::camera::CameraParams;
use super::prior::PreparedPrior;
use crate::error::{Error, Result};

/// Fewest labeled joints the fit accepts.
pub const MIN_LABELED_JOINTS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitWeights {
    pub pose: f64,
    pub shape: f64,
    pub bend: f64,
    /// Geman-McClure scale in pixels.
    pub robust_scale: f64,
    /// Plain squared residuals instead of the saturating penalty.
    pub pure_l2: bool,
}

impl Default for FitWeights {
    fn default() -> Self {
        Self {
            pose: 1e-2,
            shape: 1e-2,
            bend: 1e-2,
            robust_scale: 100.0,
            pure_l2: false,
        }
    }
}

impl FitWeights {
    pub fn data_only() -> Self {
        Self {
            pose: 0.0,
            shape: 0.0,
            bend: 0.0,
            ..Self::default()
        }
    }

    fn robust(&self, s: f64) -> (f64, f64) {
        if self.pure_l2 {
            return (s, 1.0);
        }
        let k = self.robust_scale * self.robust_scale;
        (k * s / (k + s), k * k / ((k + s) * (k + s)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitLoss {
    pub total: f64,
    pub data: f64,
    pub pose_prior: f64,
    pub shape_prior: f64,
    pub bend: f64,
    pub grad_theta: Vec<f64>,
    pub grad_beta: Vec<f64>,
    pub grad_translation: [f64; 3],
}

fn check_target(target: &[Option<[f64; 2]>], k: usize) -> Result<()> {
    if target.len() != k {
        return Err(Error::shape("2D fitting target", k, target.len()));
    }
    let n = target.iter().flatten().count();
    if n < MIN_LABELED_JOINTS {
        return Err(Error::Input(format!(
            "fitting needs at least {MIN_LABELED_JOINTS} labeled joints, target has {n}"
        )));
    }
    if target.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite 2D target".into()));
    }
    Ok(())
}

/// Full objective with analytic gradients w.r.t. theta, beta and the camera
/// translation. `target[j]` is the pixel position of body joint j, or `None`.
pub fn fitting_loss(
    model: &BodyModel,
    params: &BodyPoseParams,
    cam: &CameraParams,
    target: &[Option<[f64; 2]>],
    weights: &FitWeights,
    prior: &PreparedPrior,
) -> Result<FitLoss> {
    let k = model.num_joints();
    check_target(target, k)?;
    let posed = model.posed(params)?;
    let r = cam.rotation_matrix();
    let t = cam.translation_vector();
    let f = cam.focal;

    let mut data = 0.0;
    let mut gp = vec![Vector3::zeros(); k];
    let mut grad_t = Vector3::zeros();
    for (j, tgt) in target.iter().enumerate() {
        let Some(tgt) = tgt else { continue };
        let c = r * posed.joints[j] + t;
        if !(c.z > 0.0) {
            return Err(Error::Projection {
                joint: j,
                name: model.skeleton.joint_names[j].clone(),
                z: c.z,
            });
        }
        let u = f * c.x / c.z + cam.principal_point[0];
        let v = f * c.y / c.z + cam.principal_point[1];
        let (ru, rv) = (u - tgt[0], v - tgt[1]);
        let (rho, drho) = weights.robust(ru * ru + rv * rv);
        data += rho;
        let iz = 1.0 / c.z;
        let dc = Vector3::new(ru * f * iz, rv * f * iz, -(ru * c.x + rv * c.y) * f * iz * iz) * (2.0 * drho);
        grad_t += dc;
        gp[j] = r.transpose() * dc;
    }

    let desc = model.descendants();
    let mut grad_theta = vec![0.0; NUM_POSE_PARAMS];
    for kk in 0..k {
        if desc[kk].is_empty() {
            continue;
        }
        let pk = posed.joints[kk];
        let mut a = Matrix3::zeros();
        for &j in &desc[kk] {
            a += gp[j] * (posed.joints[j] - pk).transpose();
        }
        let g_parent = match model.skeleton.parent[kk] {
            Some(p) => posed.global[p],
            None => Matrix3::identity(),
        };
        let gt = posed.global[kk].transpose();
        for (ax, d) in rodrigues_derivatives(&params.joint_rotation(kk)).iter().enumerate() {
            let m = g_parent * d * gt;
            grad_theta[3 * kk + ax] = m.component_mul(&a).sum();
        }
    }

    // Subtree gradient sums for the bone-length terms.
    let mut subtree: Vec<Vector3<f64>> = gp.clone();
    for (kk, d) in desc.iter().enumerate() {
        for &j in d {
            subtree[kk] += gp[j];
        }
    }
    let mut grad_beta = vec![0.0; NUM_SHAPE_PARAMS];
    for j in 0..k {
        let Some(p) = model.skeleton.parent[j] else { continue };
        let dir = posed.global[p] * (model.rest_joints[j] - model.rest_joints[p]);
        let s = dir.dot(&subtree[j]);
        for (g, w) in grad_beta.iter_mut().zip(&model.shape_basis[j]) {
            *g += w * s;
        }
    }

    let (pose_prior, gpose) = prior.pose_neg_log_density(params.body_pose());
    let (shape_prior, gshape) = prior.shape_mahalanobis(&params.beta);
    let (bend, gbend) = prior.bend_penalty(&params.theta);
    for (i, g) in gpose.iter().enumerate() {
        grad_theta[3 + i] += weights.pose * g;
    }
    for (i, g) in gbend.iter().enumerate() {
        grad_theta[i] += weights.bend * g;
    }
    for (i, g) in gshape.iter().enumerate() {
        grad_beta[i] += weights.shape * g;
    }

    Ok(FitLoss {
        total: data + weights.pose * pose_prior + weights.shape * shape_prior + weights.bend * bend,
        data,
        pose_prior,
        shape_prior,
        bend,
        grad_theta,
        grad_beta,
        grad_translation: grad_t.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub history: usize,
    /// Stop once the largest gradient component falls below this.
    pub gradient_tolerance: f64,
    /// Stop once the relative decrease of L falls below this.
    pub function_tolerance: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            history: 10,
            gradient_tolerance: 1e-9,
            function_tolerance: 1e-12,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub params: BodyPoseParams,
    pub camera: CameraParams,
    pub initial_loss: f64,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted L values, starting with the initial one.
    pub trace: Vec<f64>,
}

const NX: usize = NUM_POSE_PARAMS + NUM_SHAPE_PARAMS + 3;

fn pack(p: &BodyPoseParams, cam: &CameraParams) -> Vec<f64> {
    let mut x = Vec::with_capacity(NX);
    x.extend_from_slice(&p.theta);
    x.extend_from_slice(&p.beta);
    x.extend_from_slice(&cam.translation);
    x
}

fn unpack(x: &[f64], cam: &CameraParams) -> (BodyPoseParams, CameraParams) {
    let p = BodyPoseParams {
        theta: x[..NUM_POSE_PARAMS].to_vec(),
        beta: x[NUM_POSE_PARAMS..NUM_POSE_PARAMS + NUM_SHAPE_PARAMS].to_vec(),
    };
    let mut c = cam.clone();
    c.translation.copy_from_slice(&x[NUM_POSE_PARAMS + NUM_SHAPE_PARAMS..]);
    (p, c)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn trace_string(trace: &[f64]) -> String {
    let tail = &trace[trace.len().saturating_sub(8)..];
    format!("last L values {tail:?}")
}

/// Minimize [`fitting_loss`] over pose, shape and camera translation.
pub fn fit_pose_to_2d(
    model: &BodyModel,
    target: &[Option<[f64; 2]>],
    init: (&BodyPoseParams, &CameraParams),
    weights: &FitWeights,
    prior: &PreparedPrior,
    cfg: &OptimizerConfig,
) -> Result<FitResult> {
    init.0.check()?;
    init.1.check()?;
    let cam0 = init.1;
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (p, c) = unpack(x, cam0);
        let l = fitting_loss(model, &p, &c, target, weights, prior)?;
        let mut g = l.grad_theta;
        g.extend_from_slice(&l.grad_beta);
        g.extend_from_slice(&l.grad_translation);
        Ok((l.total, g))
    };

    let mut x = pack(init.0, cam0);
    let (mut fx, mut gx) = eval(&x)?;
    let mut trace = vec![fx];
    if !fx.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            trace: trace_string(&trace),
        });
    }
    let initial_loss = fx;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        if gx.iter().fold(0.0f64, |m, v| m.max(v.abs())) < cfg.gradient_tolerance {
            converged = true;
            break;
        }
        // Two-loop recursion.
        let mut q = gx.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        } else {
            let gn = dot(&gx, &gx).sqrt();
            q.iter_mut().for_each(|v| *v /= gn.max(1.0));
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&gx, &dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = gx.iter().map(|v| -v).collect();
            slope = dot(&gx, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            match eval(&xn) {
                Ok((fn_, gn)) if fn_.is_finite() && fn_ <= fx + cfg.armijo * step * slope => {
                    accepted = Some((xn, fn_, gn));
                    break;
                }
                Ok((fn_, _)) if fn_.is_nan() && step == 1.0 && hist.is_empty() => {
                    return Err(Error::Diverged {
                        iteration: iterations,
                        trace: trace_string(&trace),
                    });
                }
                // Points behind the camera or above the Armijo line: shrink.
                _ => step *= 0.5,
            }
        }
        iterations += 1;
        let Some((xn, fn_, gn)) = accepted else {
            converged = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > cfg.history {
                hist.pop_front();
            }
        }
        let decrease = fx - fn_;
        x = xn;
        fx = fn_;
        gx = gn;
        trace.push(fx);
        if decrease <= cfg.function_tolerance * fx.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let (mut params, camera) = unpack(&x, cam0);
    params.canonicalize();
    Ok(FitResult {
        params,
        camera,
        initial_loss,
        loss: fx,
        iterations,
        converged,
        trace,
    })
}

/// Mean pixel distance between projected joints and the labeled target.
pub fn reprojection_error(
    model: &BodyModel,
    params: &BodyPoseParams,
    cam: &CameraParams,
    target: &[Option<[f64; 2]>],
) -> Result<f64> {
    let uv = super::camera::project_pinhole(&model.forward_kinematics(params)?, cam)?;
    let mut sum = 0.0;
    let mut n = 0;
    for (p, t) in uv.iter().zip(target) {
        if let Some(t) = t {
            sum += ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Input("target has no labeled joints".into()));
    }
    Ok(sum / n as f64)
}
