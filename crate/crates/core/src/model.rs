//! The full lifting pipeline and its ablation variants.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{anchor_positions, provenance, AnchorConfig, LocalOffsetParams, Provenance};
use crate::decoder::{decode, DecoderConfig, DecoderParams};
use crate::depthfield::{default_window, depth_loss, uniform_output, DepthBinning, DepthMode, DepthNet, DepthNetConfig, DepthOutput};
use crate::diffcore::{Graph, ParameterStore, Tensor, Var};
use crate::ensemble::{
    anchor_to_joint, pose_loss, predict_offsets_weights, total_loss, DirectHead, EnsembleHeads, LossConfig, PosePrediction,
};
use crate::error::{AlftError, Result};
use crate::sampler::{lift_level, sample_tokens, token_count, FeaturePyramid, SamplerConfig, SamplerParams, SamplingMode};
use crate::skeleton::{Pose2D, Pose3D};

/// Ablation variants of the pipeline.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Pooled decoder queries regressed directly to the pose.
    NoAnchor,
    GlobalOnly,
    LocalOnly,
    SingleDepth,
    JointDepth,
    RandomSampling,
    PosePriorSampling,
    FullMapSampling,
    DepthRegression,
    NoDepth,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Full,
        Variant::NoAnchor,
        Variant::GlobalOnly,
        Variant::LocalOnly,
        Variant::SingleDepth,
        Variant::JointDepth,
        Variant::RandomSampling,
        Variant::PosePriorSampling,
        Variant::FullMapSampling,
        Variant::DepthRegression,
        Variant::NoDepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAnchor => "no_anchor",
            Variant::GlobalOnly => "global_only",
            Variant::LocalOnly => "local_only",
            Variant::SingleDepth => "single_depth",
            Variant::JointDepth => "joint_depth",
            Variant::RandomSampling => "random_sampling",
            Variant::PosePriorSampling => "pose_prior_sampling",
            Variant::FullMapSampling => "full_map_sampling",
            Variant::DepthRegression => "depth_regression",
            Variant::NoDepth => "no_depth",
        }
    }

    /// The configuration this variant trains with.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full | Variant::JointDepth | Variant::PosePriorSampling | Variant::NoAnchor => {}
            Variant::GlobalOnly => cfg.anchors.use_local = false,
            Variant::LocalOnly => cfg.anchors.use_global = false,
            Variant::SingleDepth => cfg.depth.mode = DepthMode::Single,
            Variant::DepthRegression => cfg.depth.mode = DepthMode::Regression,
            Variant::NoDepth => cfg.depth.mode = DepthMode::Off,
            Variant::RandomSampling => cfg.sampler.mode = SamplingMode::Random,
            Variant::FullMapSampling => cfg.sampler.mode = SamplingMode::FullMap,
        }
        cfg.direct_head = self == Variant::NoAnchor;
        cfg
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = AlftError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| AlftError::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub joints: usize,
    pub anchors: AnchorConfig,
    pub binning: DepthBinning,
    pub depth: DepthNetConfig,
    pub sampler: SamplerConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    /// Depth-loss window at the depth-map resolution; `None` uses `max(1, H_d / 8)`.
    pub depth_window: Option<usize>,
    /// Factor applied to the initial local-offset weights.
    pub offset_init_scale: f64,
    pub direct_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: 17,
            anchors: AnchorConfig::default(),
            binning: DepthBinning::default(),
            depth: DepthNetConfig::default(),
            sampler: SamplerConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossConfig::default(),
            depth_window: None,
            offset_init_scale: 0.1,
            direct_head: false,
        }
    }
}

impl ModelConfig {
    /// Reduced widths that train in minutes on one core.
    pub fn desk() -> Self {
        Self {
            anchors: AnchorConfig {
                local_per_joint: 4,
                global_grid: [8, 8],
                ..Default::default()
            },
            binning: DepthBinning {
                bins: 64,
                ..Default::default()
            },
            depth: DepthNetConfig {
                hidden: 16,
                ..Default::default()
            },
            sampler: SamplerConfig {
                token_dim: 16,
                ..Default::default()
            },
            decoder: DecoderConfig {
                layers: 2,
                heads: 2,
                model_dim: 32,
                sample_points: 4,
                frequencies: 4,
                shared_offsets: false,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.binning.validate()?;
        self.decoder.validate()?;
        self.loss.validate()?;
        if self.joints == 0 || self.sampler.token_dim == 0 || self.depth.hidden == 0 {
            return Err(AlftError::Config("joint count and widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Ensemble(EnsembleHeads),
    Direct(DirectHead),
}

/// Parameters and structure of one pipeline instance.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
    pub offsets: LocalOffsetParams,
    pub depth: Option<DepthNet>,
    pub sampler: SamplerParams,
    pub decoder: DecoderParams,
    pub head: Head,
    pub provenance: Vec<Provenance>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[J, 3]` root-relative joints.
    pub pose: Var,
    /// `[A, 3]` anchor positions.
    pub anchors: Var,
    /// `[J, A]` ensemble weights and `[A, J*3]` offsets, absent for the direct head.
    pub weights: Option<Var>,
    pub offsets: Option<Var>,
    pub depth: DepthOutput,
    pub depth_hw: (usize, usize),
    pub queries: Var,
    pub attention_weights: Vec<Var>,
    pub tokens: usize,
}

/// Losses of one sample.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub pose: Var,
    pub depth: Option<Var>,
}

impl Model {
    pub fn new(cfg: ModelConfig, pyramid_channels: &[usize], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let j = cfg.joints;
        let k = cfg.anchors.local_per_joint;
        let offsets = LocalOffsetParams::new(&mut store, j, k, &mut rng)?;
        offsets.scale_weights(&mut store, cfg.offset_init_scale);
        let coarse = *pyramid_channels.last().ok_or_else(|| AlftError::Config("empty pyramid".into()))?;
        let depth = match cfg.depth.mode {
            DepthMode::Off => None,
            _ => Some(DepthNet::new(&mut store, cfg.depth.clone(), cfg.binning, j, coarse, &mut rng)?),
        };
        let sampler = SamplerParams::new(&mut store, pyramid_channels, cfg.sampler.token_dim, &mut rng)?;
        let decoder = DecoderParams::new(
            &mut store,
            cfg.decoder.clone(),
            j,
            k,
            cfg.depth.hidden,
            cfg.sampler.token_dim,
            &mut rng,
        )?;
        let head = if cfg.direct_head {
            Head::Direct(DirectHead::new(&mut store, cfg.decoder.model_dim, j, &mut rng)?)
        } else {
            Head::Ensemble(EnsembleHeads::new(&mut store, cfg.decoder.model_dim, j, &mut rng)?)
        };
        Ok(Self {
            provenance: provenance(&cfg.anchors, j),
            cfg,
            store,
            offsets,
            depth,
            sampler,
            decoder,
            head,
        })
    }

    /// Forward pass on one sample. `sample_seed` drives random token sampling.
    pub fn forward(&self, g: &mut Graph, pyramid: &FeaturePyramid, input2d: &Pose2D, sample_seed: u64) -> Result<Forward> {
        let store = &self.store;
        let j = self.cfg.joints;
        if input2d.joint_count() != j || !input2d.normalized {
            return Err(AlftError::Contract(format!("expected {j} normalized 2D joints")));
        }
        pyramid.validate()?;
        let pose = g.constant(Tensor::matrix(1, 2 * j, input2d.flatten()));
        let anchors = anchor_positions(g, store, &self.offsets, &self.cfg.anchors, pose)?;

        let coarse = pyramid.coarsest();
        let depth_hw = (coarse.height, coarse.width);
        let depth = match &self.depth {
            Some(net) => {
                let f = g.constant(coarse.as_tensor());
                net.forward(g, store, f, coarse.height, coarse.width)?
            }
            None => uniform_output(g, coarse.height * coarse.width, self.cfg.binning.bins),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let selection = sample_tokens(pyramid, input2d, &self.cfg.sampler, &mut rng)?;
        let levels: Vec<_> = pyramid
            .levels
            .iter()
            .zip(&selection)
            .enumerate()
            .map(|(l, (level, sel))| lift_level(g, store, &self.sampler, l, level, sel, &depth, depth_hw, self.cfg.binning.bins))
            .collect();

        let decoded = decode(
            g,
            store,
            &self.decoder,
            anchors,
            &self.provenance,
            depth.embedding,
            &levels,
            &self.cfg.binning,
        )?;
        let (pose, weights, offsets) = match &self.head {
            Head::Ensemble(heads) => {
                let (offsets, logits) = predict_offsets_weights(g, store, heads, decoded.queries);
                let a = anchor_to_joint(g, anchors, offsets, logits);
                (a.pose, Some(a.weights), Some(offsets))
            }
            Head::Direct(head) => (head.forward(g, store, decoded.queries), None, None),
        };
        if !g.value(pose).is_finite() {
            return Err(AlftError::NonFinite("predicted pose".into()));
        }
        Ok(Forward {
            pose,
            anchors,
            weights,
            offsets,
            depth,
            depth_hw,
            queries: decoded.queries,
            attention_weights: decoded.attention_weights,
            tokens: token_count(&selection),
        })
    }

    /// Pose and depth losses against the ground truth.
    pub fn losses(&self, g: &mut Graph, fwd: &Forward, gt3d: &Pose3D, gt2d: &Pose2D) -> Result<Losses> {
        let pose = pose_loss(g, fwd.pose, gt3d);
        let (h, w) = fwd.depth_hw;
        let r = self.cfg.depth_window.unwrap_or_else(|| default_window(h));
        let depth = depth_loss(
            g,
            &fwd.depth,
            self.cfg.depth.mode,
            &gt3d.root_centered(),
            gt2d,
            &self.cfg.binning,
            h,
            w,
            r,
        )?;
        Ok(Losses {
            total: total_loss(g, pose, depth, &self.cfg.loss),
            pose,
            depth,
        })
    }

    /// Plain-value prediction for one sample.
    pub fn predict(&self, pyramid: &FeaturePyramid, input2d: &Pose2D, sample_seed: u64) -> Result<Pose3D> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, pyramid, input2d, sample_seed)?;
        Ok(pose_of(&g, fwd.pose))
    }

    /// Prediction with per-anchor weights, for the direct head only the pose.
    pub fn predict_detailed(
        &self,
        pyramid: &FeaturePyramid,
        input2d: &Pose2D,
        sample_seed: u64,
    ) -> Result<(Pose3D, Option<PosePrediction>)> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, pyramid, input2d, sample_seed)?;
        let detail = match (fwd.weights, fwd.offsets) {
            (Some(weights), Some(offsets)) => Some(PosePrediction::from_graph(
                &g,
                &crate::ensemble::Assembled { pose: fwd.pose, weights },
                offsets,
            )),
            _ => None,
        };
        Ok((pose_of(&g, fwd.pose), detail))
    }

    /// Anchor positions for a normalized 2D pose.
    pub fn anchor_set(&self, input2d: &Pose2D) -> Result<Vec<[f64; 3]>> {
        let mut g = Graph::new();
        let j = self.cfg.joints;
        let pose = g.constant(Tensor::matrix(1, 2 * j, input2d.flatten()));
        let a = anchor_positions(&mut g, &self.store, &self.offsets, &self.cfg.anchors, pose)?;
        let t = g.value(a);
        Ok((0..t.rows()).map(|i| [t.at(i, 0), t.at(i, 1), t.at(i, 2)]).collect())
    }
}

pub fn pose_of(g: &Graph, pose: Var) -> Pose3D {
    let t = g.value(pose);
    Pose3D::new((0..t.rows()).map(|i| [t.at(i, 0), t.at(i, 1), t.at(i, 2)]).collect())
}
