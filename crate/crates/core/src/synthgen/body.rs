//! Skeleton-only articulated body: axis-angle joint rotations, shape-scaled
//! bone lengths and forward kinematics.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::KeypointSchema;

const BODY24_MODEL_JSON: &str = include_str!("../../data/body24_model.json");

pub const NUM_BODY_JOINTS: usize = 24;
pub const NUM_POSE_PARAMS: usize = 3 * NUM_BODY_JOINTS;
pub const NUM_SHAPE_PARAMS: usize = 20;

/// `theta`: one axis-angle triple per joint, root (global orientation)
/// first. `beta`: limb-proportion coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyPoseParams {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BodyPoseParams {
    pub fn zeros() -> Self {
        Self {
            theta: vec![0.0; NUM_POSE_PARAMS],
            beta: vec![0.0; NUM_SHAPE_PARAMS],
        }
    }

    pub fn joint_rotation(&self, j: usize) -> Vector3<f64> {
        Vector3::new(self.theta[3 * j], self.theta[3 * j + 1], self.theta[3 * j + 2])
    }

    /// Pose without the root triple.
    pub fn body_pose(&self) -> &[f64] {
        &self.theta[3..]
    }

    pub fn check(&self) -> Result<()> {
        if self.theta.len() != NUM_POSE_PARAMS || self.beta.len() != NUM_SHAPE_PARAMS {
            return Err(Error::Input(format!(
                "pose has {} theta / {} beta values, expected {NUM_POSE_PARAMS} / {NUM_SHAPE_PARAMS}",
                self.theta.len(),
                self.beta.len()
            )));
        }
        if let Some(i) = self.theta.iter().chain(&self.beta).position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite pose parameter at index {i}")));
        }
        Ok(())
    }

    /// Wrap every axis-angle triple to rotation angle ≤ π.
    pub fn canonicalize(&mut self) {
        for j in 0..self.theta.len() / 3 {
            let w = self.joint_rotation(j);
            let c = canonical_axis_angle(w);
            self.theta[3 * j..3 * j + 3].copy_from_slice(c.as_slice());
        }
    }
}

/// Same rotation, angle in `[0, π]`.
pub fn canonical_axis_angle(w: Vector3<f64>) -> Vector3<f64> {
    let angle = w.norm();
    if angle <= PI {
        return w;
    }
    let axis = w / angle;
    let mut a = angle % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    axis * a
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
    let t2 = w.norm_squared();
    let k = skew(w);
    let (a, b) = if t2 < 1e-12 {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        let t = t2.sqrt();
        (t.sin() / t, (1.0 - t.cos()) / t2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// `∂R/∂w_i` for `i = 0, 1, 2`.
pub fn rodrigues_derivatives(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let t2 = w.norm_squared();
    let e = [Vector3::x(), Vector3::y(), Vector3::z()];
    if t2 < 1e-12 {
        let kw = skew(w);
        return e.map(|ei| {
            let ke = skew(&ei);
            ke + (ke * kw + kw * ke) * 0.5
        });
    }
    let r = rodrigues(w);
    let i_minus_r = Matrix3::identity() - r;
    let kw = skew(w);
    let mut out = [Matrix3::zeros(); 3];
    for i in 0..3 {
        let v = w.cross(&(i_minus_r * e[i]));
        out[i] = (kw * w[i] + skew(&v)) * r / t2;
    }
    out
}

/// Rest joints, shape basis and bending components for the 24-joint body.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub skeleton: KeypointSchema,
    /// Rest positions in metres (y up, +x toward the body's left, +z forward).
    pub rest_joints: Vec<Vector3<f64>>,
    /// Per-joint rows of the bone-length map: bone `j` (parent → j) is scaled
    /// by `1 + shape_basis[j] · β`.
    pub shape_basis: Vec<[f64; NUM_SHAPE_PARAMS]>,
    /// `(theta index, sign)`: components whose positive signed value bends an
    /// elbow or knee the wrong way.
    pub bend_components: Vec<(usize, f64)>,
}

#[derive(Deserialize)]
struct BodyModelFile {
    skeleton: String,
    rest_joints: Vec<[f64; 3]>,
    shape_basis: Vec<Vec<f64>>,
    bend_components: Vec<(usize, f64)>,
}

impl BodyModel {
    pub fn body24() -> Self {
        Self::from_json(BODY24_MODEL_JSON, KeypointSchema::body24()).expect("bundled body model")
    }

    pub fn from_json(text: &str, skeleton: KeypointSchema) -> Result<Self> {
        let f: BodyModelFile = serde_json::from_str(text)?;
        if f.skeleton != skeleton.name {
            return Err(Error::Config(format!(
                "body model is for skeleton '{}', got '{}'",
                f.skeleton, skeleton.name
            )));
        }
        let k = skeleton.num_joints();
        if f.rest_joints.len() != k || f.shape_basis.len() != k {
            return Err(Error::Config(format!("body model tables do not have {k} rows")));
        }
        let mut shape_basis = Vec::with_capacity(k);
        for row in &f.shape_basis {
            let arr: [f64; NUM_SHAPE_PARAMS] = row
                .as_slice()
                .try_into()
                .map_err(|_| Error::Config(format!("shape basis row has {} columns", row.len())))?;
            shape_basis.push(arr);
        }
        Ok(Self {
            skeleton,
            rest_joints: f.rest_joints.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            shape_basis,
            bend_components: f.bend_components,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.rest_joints.len()
    }

    pub fn bone_scale(&self, j: usize, beta: &[f64]) -> f64 {
        1.0 + self.shape_basis[j].iter().zip(beta).map(|(w, b)| w * b).sum::<f64>()
    }

    /// Joint positions and global rotations.
    pub fn posed(&self, params: &BodyPoseParams) -> Result<Posed> {
        params.check()?;
        let k = self.num_joints();
        let mut local = Vec::with_capacity(k);
        for j in 0..k {
            local.push(rodrigues(&params.joint_rotation(j)));
        }
        let mut global = vec![Matrix3::identity(); k];
        let mut joints = vec![Vector3::zeros(); k];
        for j in self.skeleton.topological_order() {
            match self.skeleton.parent[j] {
                None => {
                    global[j] = local[j];
                    joints[j] = self.rest_joints[j];
                }
                Some(p) => {
                    global[j] = global[p] * local[j];
                    let bone = (self.rest_joints[j] - self.rest_joints[p]) * self.bone_scale(j, &params.beta);
                    joints[j] = joints[p] + global[p] * bone;
                }
            }
        }
        Ok(Posed { joints, global, local })
    }

    pub fn forward_kinematics(&self, params: &BodyPoseParams) -> Result<Vec<Vector3<f64>>> {
        Ok(self.posed(params)?.joints)
    }

    /// Subtree membership: `descendants[k]` lists every joint strictly below k.
    pub fn descendants(&self) -> Vec<Vec<usize>> {
        let k = self.num_joints();
        let mut out = vec![Vec::new(); k];
        for j in 0..k {
            let mut p = self.skeleton.parent[j];
            while let Some(a) = p {
                out[a].push(j);
                p = self.skeleton.parent[a];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Posed {
    pub joints: Vec<Vector3<f64>>,
    pub global: Vec<Matrix3<f64>>,
    pub local: Vec<Matrix3<f64>>,
}

/// FK entry point taking an explicit skeleton, used when a caller swaps in a
/// different tree with the same joint count.
pub fn forward_kinematics(
    theta: &[f64],
    beta: &[f64],
    skeleton: &KeypointSchema,
    model: &BodyModel,
) -> Result<Vec<Vector3<f64>>> {
    skeleton.check()?;
    if skeleton.num_joints() != model.num_joints() {
        return Err(Error::Config(format!(
            "skeleton '{}' has {} joints, body model has {}",
            skeleton.name,
            skeleton.num_joints(),
            model.num_joints()
        )));
    }
    let m = BodyModel {
        skeleton: skeleton.clone(),
        ..model.clone()
    };
    m.forward_kinematics(&BodyPoseParams {
        theta: theta.to_vec(),
        beta: beta.to_vec(),
    })
}
