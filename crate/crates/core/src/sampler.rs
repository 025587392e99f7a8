//! Pose-prior feature sampling and outer-product lifting.
//!
//! The two finest pyramid levels contribute only the pixels inside square
//! windows around the 2D joints; the coarsest level contributes every pixel.
//! Each selected pixel becomes one token, projected to the shared token
//! width, and is lifted into a depth volume by its owning joints' depth
//! distributions.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::depthfield::{bilinear_taps, pixel_center, pixel_of, DepthOutput};
use crate::diffcore::{Graph, ParameterStore, Tensor, Var, VolumeLayout};
use crate::error::{AlftError, Result};
use crate::nn::Linear;
use crate::skeleton::Pose2D;

/// One `height × width × channels` grid, row-major over pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLevel {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureLevel {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::matrix(self.height * self.width, self.channels, self.data.clone())
    }
}

/// Feature grids ordered from the finest to the coarsest resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 3 {
            return Err(AlftError::Contract("feature pyramid needs at least 3 levels".into()));
        }
        for pair in self.levels.windows(2) {
            if pair[1].height * 2 != pair[0].height || pair[1].width * 2 != pair[0].width {
                return Err(AlftError::Contract("each pyramid level must halve the previous one".into()));
            }
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.data.len() != l.height * l.width * l.channels || l.data.iter().any(|v| !v.is_finite()) {
                return Err(AlftError::Contract(format!("pyramid level {i} is malformed or non-finite")));
            }
        }
        Ok(())
    }

    pub fn coarsest(&self) -> &FeatureLevel {
        self.levels.last().expect("validated pyramid")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Windows around the 2D joints on the fine levels.
    #[default]
    PosePrior,
    /// Every pixel of every level.
    FullMap,
    /// As many random pixels per fine level as pose-prior sampling would take.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: SamplingMode,
    pub token_dim: usize,
    /// Per-level window radius; `None` uses `max(1, H_l / 16)`.
    pub radii: Option<Vec<usize>>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::PosePrior,
            token_dim: 64,
            radii: None,
        }
    }
}

impl SamplerConfig {
    pub fn radius(&self, level: usize, height: usize) -> usize {
        match &self.radii {
            Some(r) => r.get(level).copied().unwrap_or(1),
            None => (height / 16).max(1),
        }
    }
}

/// Pixels chosen on one level and the joints owning each of them.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSelection {
    pub height: usize,
    pub width: usize,
    /// Ascending pixel indices.
    pub pixels: Vec<usize>,
    /// Owning joints of every selected pixel: the joints whose window holds
    /// it, or the nearest joint for pixels outside all windows.
    pub owners: Vec<Vec<usize>>,
}

impl LevelSelection {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Binary PGM image with occupied pixels white.
    pub fn occupancy_pgm(&self) -> Vec<u8> {
        let mut img = vec![0u8; self.height * self.width];
        for &p in &self.pixels {
            img[p] = 255;
        }
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(img);
        out
    }

    /// Normalized `(x, y)` of every token.
    pub fn pixel_coords(&self) -> Vec<[f64; 2]> {
        self.pixels
            .iter()
            .map(|&p| [pixel_center(p % self.width, self.width), pixel_center(p / self.width, self.height)])
            .collect()
    }
}

/// Pixels of the `(2r+1)²` window around every joint on an `h × w` grid.
fn window_members(pose: &Pose2D, h: usize, w: usize, r: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); h * w];
    let r = r as i64;
    for (j, c) in pose.coords.iter().enumerate() {
        let (px, py) = (pixel_of(c[0], w) as i64, pixel_of(c[1], h) as i64);
        for y in (py - r).max(0)..=(py + r).min(h as i64 - 1) {
            for x in (px - r).max(0)..=(px + r).min(w as i64 - 1) {
                members[y as usize * w + x as usize].push(j);
            }
        }
    }
    members
}

fn nearest_joint(pose: &Pose2D, p: usize, h: usize, w: usize) -> usize {
    let (x, y) = (pixel_center(p % w, w), pixel_center(p / w, h));
    let mut best = (f64::INFINITY, 0);
    for (j, c) in pose.coords.iter().enumerate() {
        let d = (c[0] - x).powi(2) + (c[1] - y).powi(2);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Select token pixels on every level.
pub fn sample_tokens(pyramid: &FeaturePyramid, pose: &Pose2D, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<Vec<LevelSelection>> {
    pyramid.validate()?;
    if !pose.normalized {
        return Err(AlftError::Contract("token sampling needs a normalized 2D pose".into()));
    }
    let last = pyramid.levels.len() - 1;
    let mut out = Vec::with_capacity(pyramid.levels.len());
    for (l, level) in pyramid.levels.iter().enumerate() {
        let (h, w) = (level.height, level.width);
        let members = window_members(pose, h, w, cfg.radius(l, h));
        let prior: Vec<usize> = (0..h * w).filter(|&p| !members[p].is_empty()).collect();
        let pixels: Vec<usize> = if l == last || cfg.mode == SamplingMode::FullMap {
            (0..h * w).collect()
        } else if cfg.mode == SamplingMode::Random {
            let mut picked = rand::seq::index::sample(rng, h * w, prior.len()).into_vec();
            picked.sort_unstable();
            picked
        } else {
            prior
        };
        let owners = pixels
            .iter()
            .map(|&p| {
                if members[p].is_empty() {
                    vec![nearest_joint(pose, p, h, w)]
                } else {
                    members[p].clone()
                }
            })
            .collect();
        out.push(LevelSelection {
            height: h,
            width: w,
            pixels,
            owners,
        });
    }
    Ok(out)
}

pub fn token_count(selection: &[LevelSelection]) -> usize {
    selection.iter().map(LevelSelection::len).sum()
}

/// Learnable per-level projections to the token width.
#[derive(Clone, Debug)]
pub struct SamplerParams {
    pub projections: Vec<Linear>,
    pub token_dim: usize,
}

impl SamplerParams {
    pub fn new(store: &mut ParameterStore, channels: &[usize], token_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let projections = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| Linear::new(store, &format!("sampler.proj{l}"), c, token_dim, rng))
            .collect::<Result<_>>()?;
        Ok(Self { projections, token_dim })
    }
}

/// A lifted level: `[tokens, bins * token_dim]` slabs and their layout.
#[derive(Clone, Debug)]
pub struct LiftedLevel {
    pub volume: Var,
    pub layout: Rc<VolumeLayout>,
    /// `[tokens, token_dim]` projected token features.
    pub tokens: Var,
    /// `[entries, bins]` distributions used for lifting.
    pub dist: Var,
}

/// Distribution rows for `(pixel, joint)` entries of an `h × w` level,
/// bilinearly resampled from the depth map and renormalized.
pub fn level_distributions(
    g: &mut Graph,
    depth: &DepthOutput,
    depth_hw: (usize, usize),
    level_hw: (usize, usize),
    entries: &[(usize, usize)],
) -> Var {
    let (dh, dw) = depth_hw;
    let (h, w) = level_hw;
    let taps = entries
        .iter()
        .map(|&(p, j)| {
            let map = if depth.maps == 1 { 0 } else { j };
            bilinear_taps(dh, dw, h, w, p % w, p / w)
                .into_iter()
                .filter(|&(_, wt)| wt != 0.0)
                .map(|(sp, wt)| (sp * depth.maps + map, wt))
                .collect()
        })
        .collect();
    let mixed = g.row_mix(depth.dist, taps);
    g.row_normalize(mixed)
}

/// Project the selected tokens of one level and lift them into its volume.
pub fn lift_level(
    g: &mut Graph,
    store: &ParameterStore,
    params: &SamplerParams,
    level_index: usize,
    level: &FeatureLevel,
    selection: &LevelSelection,
    depth: &DepthOutput,
    depth_hw: (usize, usize),
    bins: usize,
) -> LiftedLevel {
    let c = level.channels;
    let mut raw = Vec::with_capacity(selection.len() * c);
    for &p in &selection.pixels {
        raw.extend_from_slice(level.pixel(p));
    }
    let raw = g.constant(Tensor::matrix(selection.len(), c, raw));
    let tokens = params.projections[level_index].forward(g, store, raw);
    let mut slab_of_pixel = vec![None; level.height * level.width];
    let mut entries = Vec::new();
    let mut pixel_joint = Vec::new();
    for (t, (&p, owners)) in selection.pixels.iter().zip(&selection.owners).enumerate() {
        slab_of_pixel[p] = Some(t);
        for &j in owners {
            entries.push((t, t));
            pixel_joint.push((p, j));
        }
    }
    let dist = level_distributions(g, depth, depth_hw, (level.height, level.width), &pixel_joint);
    let volume = g.lift(tokens, dist, &entries, selection.len());
    LiftedLevel {
        volume,
        layout: Rc::new(VolumeLayout {
            height: level.height,
            width: level.width,
            depth: bins,
            channels: params.token_dim,
            slab_of_pixel,
        }),
        tokens,
        dist,
    }
}
