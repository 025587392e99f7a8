//! Anchor-to-joint prediction and the training loss.
//!
//! Every anchor proposes an offset towards every joint and a weight logit
//! for it. Weights are normalized over anchors, and each joint is the
//! weighted sum of its anchor-plus-offset proposals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParameterStore, Tensor, Var};
use crate::error::{AlftError, Result};
use crate::nn::{mean_rows, Linear, Mlp};
use crate::skeleton::Pose3D;

#[derive(Clone, Debug)]
pub struct EnsembleHeads {
    pub offset: Mlp,
    pub weight: Mlp,
    pub joints: usize,
}

impl EnsembleHeads {
    /// Heads whose output layers start at zero: zero offsets and uniform
    /// weights. The weight logits carry no output bias since a per-joint
    /// constant cancels in the softmax over anchors.
    pub fn new(store: &mut ParameterStore, model_dim: usize, joints: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            offset: Mlp::zero_output(store, "ensemble.offset", [model_dim, model_dim, joints * 3], rng)?,
            weight: Mlp {
                hidden: Linear::new(store, "ensemble.weight.fc1", model_dim, model_dim, rng)?,
                out: Linear::zeros_unbiased(store, "ensemble.weight.fc2", model_dim, joints)?,
            },
            joints,
        })
    }
}

/// `[A, J*3]` offsets and `[A, J]` weight logits.
pub fn predict_offsets_weights(g: &mut Graph, store: &ParameterStore, heads: &EnsembleHeads, queries: Var) -> (Var, Var) {
    let offsets = heads.offset.forward(g, store, queries);
    let logits = heads.weight.forward(g, store, queries);
    (offsets, logits)
}

/// Subtract joint 0 from every joint of a `[J, 3]` pose.
pub fn root_relative(g: &mut Graph, pose: Var) -> Var {
    let j = g.value(pose).rows();
    let root = g.gather_rows(pose, &vec![0; j]);
    g.sub(pose, root)
}

/// Ensemble output: root-relative joints and the normalized weights.
#[derive(Clone, Copy, Debug)]
pub struct Assembled {
    /// `[J, 3]`, root at the origin.
    pub pose: Var,
    /// `[J, A]`, each row summing to one.
    pub weights: Var,
}

/// `P_j = Σ_a softmax_a(logits[:, j])[a] · (P_a + O[a, j])`, root-centered.
pub fn anchor_to_joint(g: &mut Graph, anchors: Var, offsets: Var, logits: Var) -> Assembled {
    let t = g.transpose(logits);
    let weights = g.softmax_rows(t);
    let joints = g.ensemble(weights, anchors, offsets);
    Assembled {
        pose: root_relative(g, joints),
        weights,
    }
}

/// Direct regression from mean-pooled queries, the anchor-free baseline.
#[derive(Clone, Debug)]
pub struct DirectHead {
    pub mlp: Mlp,
    pub joints: usize,
}

impl DirectHead {
    pub fn new(store: &mut ParameterStore, model_dim: usize, joints: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::zero_output(store, "ensemble.direct", [model_dim, model_dim, joints * 3], rng)?,
            joints,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, queries: Var) -> Var {
        let pooled = mean_rows(g, queries);
        let out = self.mlp.forward(g, store, pooled);
        let pose = g.reshape(out, &[self.joints, 3]);
        root_relative(g, pose)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_pose: f64,
    pub lambda_depth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pose: 2.0,
            lambda_depth: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_pose < 0.0 || self.lambda_depth < 0.0 {
            return Err(AlftError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn combine(&self, pose_loss: f64, depth_loss: f64) -> f64 {
        self.lambda_pose * pose_loss + self.lambda_depth * depth_loss
    }
}

/// Differentiable MPJPE of a `[J, 3]` prediction against the root-centered
/// ground truth.
pub fn pose_loss(g: &mut Graph, pred: Var, gt: &Pose3D) -> Var {
    let gt = gt.root_centered();
    let t = g.constant(Tensor::matrix(gt.joint_count(), 3, gt.coords.iter().flatten().copied().collect()));
    let d = g.sub(pred, t);
    let n = g.row_norms(d);
    g.mean(n)
}

/// `λ₁ · L_pose + λ₂ · L_depth`.
pub fn total_loss(g: &mut Graph, pose: Var, depth: Option<Var>, cfg: &LossConfig) -> Var {
    let p = g.scale(pose, cfg.lambda_pose);
    match depth {
        Some(d) => {
            let d = g.scale(d, cfg.lambda_depth);
            g.add(p, d)
        }
        None => p,
    }
}

/// Plain-value prediction with per-anchor weights and offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosePrediction {
    pub pose: Pose3D,
    /// `[A][J]`, normalized over anchors.
    pub anchor_weights: Vec<Vec<f64>>,
    /// `[A][J]` offsets.
    pub anchor_offsets: Vec<Vec<[f64; 3]>>,
}

/// The `k` highest-weighted anchors of one joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopAnchors {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl PosePrediction {
    pub fn from_graph(g: &Graph, assembled: &Assembled, offsets: Var) -> Self {
        let (pose, w, o) = (g.value(assembled.pose), g.value(assembled.weights), g.value(offsets));
        let (j, a) = (w.rows(), w.cols());
        Self {
            pose: Pose3D::new((0..j).map(|i| [pose.at(i, 0), pose.at(i, 1), pose.at(i, 2)]).collect()),
            anchor_weights: (0..a).map(|ai| (0..j).map(|ji| w.at(ji, ai)).collect()).collect(),
            anchor_offsets: (0..a)
                .map(|ai| {
                    (0..j)
                        .map(|ji| [o.at(ai, ji * 3), o.at(ai, ji * 3 + 1), o.at(ai, ji * 3 + 2)])
                        .collect()
                })
                .collect(),
        }
    }

    /// Per joint, the `k` anchors with the largest weights (ties by index).
    pub fn top_anchors(&self, k: usize) -> Vec<TopAnchors> {
        let joints = self.pose.joint_count();
        (0..joints)
            .map(|j| {
                let mut idx: Vec<usize> = (0..self.anchor_weights.len()).collect();
                idx.sort_by(|&a, &b| self.anchor_weights[b][j].total_cmp(&self.anchor_weights[a][j]).then(a.cmp(&b)));
                idx.truncate(k);
                TopAnchors {
                    weights: idx.iter().map(|&a| self.anchor_weights[a][j]).collect(),
                    indices: idx,
                }
            })
            .collect()
    }

    /// `{"pose3d": ..., "top_anchors": ...}` with the top-50 anchors per joint.
    pub fn dump_json(&self) -> serde_json::Value {
        serde_json::json!({
            "pose3d": self.pose.coords,
            "top_anchors": self.top_anchors(50),
        })
    }
}
