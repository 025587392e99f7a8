//! The 3D anchor set: a fixed grid of global anchors on the root-depth plane
//! followed by learnable joint-wise local anchors.
//!
//! Anchor order is positional and stable: the global block comes first in
//! row-major grid order, then the local block in `(joint, slot)` order. The
//! decoder and the ensemble heads index anchors by this position.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParameterStore, Tensor, Var};
use crate::error::{AlftError, Result};
use crate::nn::Linear;
use crate::skeleton::Pose2D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Local anchors generated around every joint.
    pub local_per_joint: usize,
    /// Global grid size `[columns, rows]`.
    pub global_grid: [usize; 2],
    /// Depth of the global plane.
    pub global_depth: f64,
    pub use_global: bool,
    pub use_local: bool,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            local_per_joint: 16,
            global_grid: [16, 16],
            global_depth: 0.0,
            use_global: true,
            use_local: true,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_per_joint == 0 || self.global_grid.contains(&0) {
            return Err(AlftError::Config("anchor counts and grid dimensions must be at least 1".into()));
        }
        if !self.use_global && !self.use_local {
            return Err(AlftError::Config("at least one anchor family must be enabled".into()));
        }
        Ok(())
    }

    /// In-plane spacing of the global grid in normalized units.
    pub fn plane_stride(&self) -> [f64; 2] {
        [2.0 / self.global_grid[0] as f64, 2.0 / self.global_grid[1] as f64]
    }

    pub fn global_count(&self) -> usize {
        if self.use_global {
            self.global_grid[0] * self.global_grid[1]
        } else {
            0
        }
    }

    pub fn local_count(&self, joints: usize) -> usize {
        if self.use_local {
            joints * self.local_per_joint
        } else {
            0
        }
    }

    pub fn total(&self, joints: usize) -> usize {
        self.global_count() + self.local_count(joints)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Global { index: usize },
    Local { joint: usize, slot: usize },
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Global { .. } => write!(f, "global"),
            Provenance::Local { joint, slot } => write!(f, "local:{joint}:{slot}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub positions: Vec<[f64; 3]>,
    pub provenance: Vec<Provenance>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn concat(mut self, other: AnchorSet) -> AnchorSet {
        self.positions.extend(other.positions);
        self.provenance.extend(other.provenance);
        self
    }

    /// Anchors whose provenance satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&Provenance) -> bool) -> AnchorSet {
        let (positions, provenance) = self
            .positions
            .iter()
            .zip(&self.provenance)
            .filter(|(_, p)| keep(p))
            .map(|(x, p)| (*x, *p))
            .unzip();
        AnchorSet { positions, provenance }
    }

    /// `x,y,z,provenance` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,z,provenance\n");
        for (p, prov) in self.positions.iter().zip(&self.provenance) {
            let _ = writeln!(s, "{},{},{},{}", p[0], p[1], p[2], prov);
        }
        s
    }

    pub fn positions_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), 3, self.positions.iter().flat_map(|p| p.iter().copied()).collect())
    }
}

/// Regular grid of cell-centered anchors spanning `[-1, 1]²` at the global depth.
pub fn generate_global_anchors(cfg: &AnchorConfig) -> AnchorSet {
    let [gx, gy] = cfg.global_grid;
    let [sx, sy] = cfg.plane_stride();
    let mut positions = Vec::with_capacity(gx * gy);
    let mut provenance = Vec::with_capacity(gx * gy);
    for r in 0..gy {
        for c in 0..gx {
            positions.push([-1.0 + (c as f64 + 0.5) * sx, -1.0 + (r as f64 + 0.5) * sy, cfg.global_depth]);
            provenance.push(Provenance::Global { index: r * gx + c });
        }
    }
    AnchorSet { positions, provenance }
}

/// The learnable offset map `δ = Linear(flatten(pose))`, one shared layer
/// from the whole normalized 2D pose to every joint's `K × 3` offsets.
#[derive(Clone, Debug)]
pub struct LocalOffsetParams {
    pub map: Linear,
    pub joints: usize,
    pub per_joint: usize,
}

impl LocalOffsetParams {
    pub fn new(store: &mut ParameterStore, joints: usize, per_joint: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            map: Linear::new(store, "anchors.offsetmap", 2 * joints, joints * per_joint * 3, rng)?,
            joints,
            per_joint,
        })
    }

    pub fn zeros(store: &mut ParameterStore, joints: usize, per_joint: usize) -> Result<Self> {
        Ok(Self {
            map: Linear::zeros(store, "anchors.offsetmap", 2 * joints, joints * per_joint * 3)?,
            joints,
            per_joint,
        })
    }

    /// Scale the initial offset map so freshly generated anchors stay near
    /// their joints.
    pub fn scale_weights(&self, store: &mut ParameterStore, factor: f64) {
        store.value_mut(self.map.weight).data_mut().iter_mut().for_each(|w| *w *= factor);
    }

    /// Local anchor positions `[joints*K, 3]` from a `[1, 2*joints]` pose.
    pub fn positions(&self, g: &mut Graph, store: &ParameterStore, pose: Var) -> Result<Var> {
        let n = self.joints * self.per_joint;
        let delta = self.map.forward(g, store, pose);
        if !g.value(delta).is_finite() {
            return Err(AlftError::ParameterHealth("local anchor offsets are not finite".into()));
        }
        let delta = g.reshape(delta, &[n, 3]);
        let xy = g.reshape(pose, &[self.joints, 2]);
        let zero = g.constant(Tensor::zeros(&[self.joints, 1]));
        let base = g.concat_cols(&[xy, zero]);
        let rows: Vec<usize> = (0..n).map(|i| i / self.per_joint).collect();
        let base = g.gather_rows(base, &rows);
        Ok(g.add(base, delta))
    }
}

fn check_pose(pose: &Pose2D, joints: usize) -> Result<()> {
    if !pose.normalized {
        return Err(AlftError::Contract("anchor generation needs a normalized 2D pose".into()));
    }
    if pose.joint_count() != joints {
        return Err(AlftError::Contract(format!(
            "pose has {} joints, offset map expects {joints}",
            pose.joint_count()
        )));
    }
    Ok(())
}

/// Local anchor `(j, k)` at `(j_x, j_y, 0) + δ[j, k]`.
pub fn generate_local_anchors(pose: &Pose2D, params: &LocalOffsetParams, store: &ParameterStore) -> Result<AnchorSet> {
    check_pose(pose, params.joints)?;
    let mut g = Graph::new();
    let p = g.constant(Tensor::matrix(1, 2 * params.joints, pose.flatten()));
    let pos = params.positions(&mut g, store, p)?;
    let t = g.value(pos);
    let positions = (0..t.rows()).map(|i| [t.at(i, 0), t.at(i, 1), t.at(i, 2)]).collect();
    let provenance = (0..t.rows())
        .map(|i| Provenance::Local {
            joint: i / params.per_joint,
            slot: i % params.per_joint,
        })
        .collect();
    Ok(AnchorSet { positions, provenance })
}

/// Global block first, then the local block, as enabled by `cfg`.
pub fn build_anchor_set(pose: &Pose2D, params: &LocalOffsetParams, store: &ParameterStore, cfg: &AnchorConfig) -> Result<AnchorSet> {
    cfg.validate()?;
    let mut set = AnchorSet {
        positions: Vec::new(),
        provenance: Vec::new(),
    };
    if cfg.use_global {
        set = set.concat(generate_global_anchors(cfg));
    }
    if cfg.use_local {
        set = set.concat(generate_local_anchors(pose, params, store)?);
    }
    Ok(set)
}

/// Differentiable anchor positions `[A, 3]` in the stable global-then-local order.
pub fn anchor_positions(g: &mut Graph, store: &ParameterStore, params: &LocalOffsetParams, cfg: &AnchorConfig, pose: Var) -> Result<Var> {
    let mut parts = Vec::new();
    if cfg.use_global {
        parts.push(g.constant(generate_global_anchors(cfg).positions_tensor()));
    }
    if cfg.use_local {
        parts.push(params.positions(g, store, pose)?);
    }
    Ok(if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) })
}

/// Provenance of every anchor in the order produced by [`anchor_positions`].
pub fn provenance(cfg: &AnchorConfig, joints: usize) -> Vec<Provenance> {
    let mut out = Vec::with_capacity(cfg.total(joints));
    if cfg.use_global {
        out.extend((0..cfg.global_count()).map(|index| Provenance::Global { index }));
    }
    if cfg.use_local {
        for joint in 0..joints {
            out.extend((0..cfg.local_per_joint).map(|slot| Provenance::Local { joint, slot }));
        }
    }
    out
}
