//! Depth discretization, the lightweight depth network and the sparse
//! ordinal depth loss.
//!
//! The depth net runs on the coarsest pyramid level. Its logits are laid out
//! as `[pixels, maps * bins]` where `maps` is the joint count for joint-wise
//! maps and one for a single shared map. Reshaped to `[pixels * maps, bins]`,
//! row `pixel * maps + map` holds one distribution.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::{AlftError, Result};
use crate::nn::{sinusoidal, Attention, Linear, Norm};
use crate::skeleton::{Pose2D, Pose3D};

/// Uniform bins over `[-d_min, d_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthBinning {
    pub d_min: f64,
    pub d_max: f64,
    pub bins: usize,
}

impl Default for DepthBinning {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 1.0,
            bins: 64,
        }
    }
}

impl DepthBinning {
    pub fn new(d_min: f64, d_max: f64, bins: usize) -> Result<Self> {
        let b = Self { d_min, d_max, bins };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_max > 0.0) || self.bins < 2 {
            return Err(AlftError::Config("depth range must be positive with at least 2 bins".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.d_min + self.d_max) / self.bins as f64
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        -self.d_min + (k as f64 + 0.5) * self.width()
    }

    pub fn depth_to_bin(&self, d: f64) -> usize {
        let b = ((d + self.d_min) / self.width()).floor();
        if b.is_nan() || b < 0.0 {
            0
        } else {
            (b as usize).min(self.bins - 1)
        }
    }

    /// Depth mapped onto the `[-1, 1]` z axis of a lifted volume.
    pub fn volume_z(&self, d: f64) -> f64 {
        2.0 * (d + self.d_min) / (self.d_min + self.d_max) - 1.0
    }
}

/// Pixel index holding a normalized coordinate on an `n`-pixel axis.
pub fn pixel_of(x: f64, n: usize) -> usize {
    let p = ((x + 1.0) * 0.5 * n as f64).floor();
    if p.is_nan() || p < 0.0 {
        0
    } else {
        (p as usize).min(n - 1)
    }
}

/// Normalized coordinate of the center of pixel `i` on an `n`-pixel axis.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    2.0 * (i as f64 + 0.5) / n as f64 - 1.0
}

/// Offsets of an `r`-wide window centered on a pixel.
pub fn window_offsets(r: usize) -> std::ops::RangeInclusive<i64> {
    -(((r as i64) - 1) / 2)..=(r as i64) / 2
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMode {
    /// One distribution per joint.
    #[default]
    JointWise,
    /// One distribution shared by all joints.
    Single,
    /// One scalar depth per joint, spread onto the two nearest bins.
    Regression,
    /// No depth branch: uniform distributions and no depth tokens.
    Off,
}

impl DepthMode {
    pub fn maps(self, joints: usize) -> usize {
        match self {
            DepthMode::JointWise | DepthMode::Regression => joints,
            DepthMode::Single | DepthMode::Off => 1,
        }
    }
}

/// How classification logits become the distribution used for lifting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionSource {
    /// Posterior over labels of the per-bin ordinal classifiers.
    #[default]
    Ordinal,
    /// Softmax of the logits over bins.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DepthNetConfig {
    pub mode: DepthMode,
    pub hidden: usize,
    /// Frequencies per axis of the 2D positional encoding.
    pub frequencies: usize,
    pub distribution: DistributionSource,
}

impl Default for DepthNetConfig {
    fn default() -> Self {
        Self {
            mode: DepthMode::JointWise,
            hidden: 64,
            frequencies: 4,
            distribution: DistributionSource::Ordinal,
        }
    }
}

/// `[bins, bins]` matrices selecting, for label `l` (column), the bins below
/// it (`lower`) and the bins at or above it (`upper`).
fn label_masks(bins: usize) -> (Tensor, Tensor) {
    let lower = Tensor::from_fn(&[bins, bins], |i| if i / bins < i % bins { 1.0 } else { 0.0 });
    let upper = Tensor::from_fn(&[bins, bins], |i| if i / bins >= i % bins { 1.0 } else { 0.0 });
    (lower, upper)
}

/// Label posterior of independent per-bin ordinal classifiers over `[m, bins]`
/// logits: `P(l) ∝ Π_{k<l} (1 − σ(x_k)) · Π_{k≥l} σ(x_k)`. Its negative log
/// is the ordinal loss of label `l`, so it peaks at the trained label.
pub fn ordinal_distribution(g: &mut Graph, logits: Var) -> Var {
    let bins = g.value(logits).cols();
    let (lower, upper) = label_masks(bins);
    let on = g.log_sigmoid(logits);
    let flipped = g.scale(logits, -1.0);
    let off = g.log_sigmoid(flipped);
    let upper = g.constant(upper);
    let lower = g.constant(lower);
    let a = g.matmul(on, upper);
    let b = g.matmul(off, lower);
    let scores = g.add(a, b);
    g.softmax_rows(scores)
}

/// Plain-value [`ordinal_distribution`] of one row.
pub fn ordinal_distribution_row(logits: &[f64]) -> Vec<f64> {
    let log_sigmoid = |x: f64| -((-x).max(0.0) + (-x.abs()).exp().ln_1p());
    let mut below = 0.0;
    let mut above: f64 = logits.iter().map(|&x| log_sigmoid(x)).sum();
    let mut scores = Vec::with_capacity(logits.len());
    for &x in logits {
        scores.push(below + above);
        below += log_sigmoid(-x);
        above -= log_sigmoid(x);
    }
    crate::diffcore::softmax_in_place(&mut scores);
    scores
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

impl Conv {
    fn new(store: &mut ParameterStore, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add_uniform(&format!("{name}.w"), &[9 * cin, cout], 9 * cin, rng)?,
            bias: store.add_zeros(&format!("{name}.b"), &[cout])?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var, h: usize, w: usize, dilation: usize) -> Var {
        let wt = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv3x3(x, wt, b, h, w, dilation)
    }
}

/// Projection, two 3×3 convolutions, a dilated residual block, a 1×1 head
/// and one self-attention encoder layer for the depth embedding.
#[derive(Clone, Debug)]
pub struct DepthNet {
    pub cfg: DepthNetConfig,
    pub binning: DepthBinning,
    pub joints: usize,
    projection: Linear,
    conv1: Conv,
    conv2: Conv,
    dilated: Conv,
    head: Linear,
    position: Linear,
    encoder: Attention,
    encoder_norm: Norm,
    /// Scalars registered by this network.
    pub parameter_count: usize,
}

/// Graph handles produced by one depth-net forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DepthOutput {
    /// `[pixels, maps * bins]` for classification, `[pixels, joints]` for
    /// regression; absent when the depth branch is off.
    pub logits: Option<Var>,
    /// `[pixels * maps, bins]` distributions.
    pub dist: Var,
    /// `[pixels, hidden]` depth tokens.
    pub embedding: Option<Var>,
    pub maps: usize,
}

fn check_finite(g: &Graph, v: Var, layer: usize, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(AlftError::NonFinite(format!("depth net layer {layer} ({what})")))
    }
}

impl DepthNet {
    pub fn new(
        store: &mut ParameterStore,
        cfg: DepthNetConfig,
        binning: DepthBinning,
        joints: usize,
        in_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        binning.validate()?;
        let before = store.scalar_count();
        let h = cfg.hidden;
        let head_out = match cfg.mode {
            DepthMode::Regression => joints,
            mode => mode.maps(joints) * binning.bins,
        };
        let net = Self {
            projection: Linear::new(store, "depthnet.proj", in_channels, h, rng)?,
            conv1: Conv::new(store, "depthnet.conv1", h, h, rng)?,
            conv2: Conv::new(store, "depthnet.conv2", h, h, rng)?,
            dilated: Conv::new(store, "depthnet.dilated", h, h, rng)?,
            head: Linear::new(store, "depthnet.head", h, head_out, rng)?,
            position: Linear::new(store, "depthnet.pos", 4 * cfg.frequencies, h, rng)?,
            encoder: Attention::new(store, "depthnet.encoder", h, h, h, 1, rng)?,
            encoder_norm: Norm::new(store, "depthnet.encoder.norm", h)?,
            parameter_count: 0,
            cfg,
            binning,
            joints,
        };
        Ok(Self {
            parameter_count: store.scalar_count() - before,
            ..net
        })
    }

    /// Distributions and depth tokens for a `[height * width, channels]` grid.
    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, features: Var, height: usize, width: usize) -> Result<DepthOutput> {
        let x = self.projection.forward(g, store, features);
        let x = g.gelu(x);
        check_finite(g, x, 0, "projection")?;
        let x = self.conv1.forward(g, store, x, height, width, 1);
        let x = g.gelu(x);
        check_finite(g, x, 1, "conv")?;
        let x = self.conv2.forward(g, store, x, height, width, 1);
        let x = g.gelu(x);
        check_finite(g, x, 2, "conv")?;
        let d = self.dilated.forward(g, store, x, height, width, 2);
        let d = g.gelu(d);
        let feats = g.add(x, d);
        check_finite(g, feats, 3, "dilated block")?;
        let logits = self.head.forward(g, store, feats);
        check_finite(g, logits, 4, "head")?;
        let pixels = height * width;
        let maps = self.cfg.mode.maps(self.joints);
        let dist = match self.cfg.mode {
            DepthMode::Regression => {
                let flat = g.reshape(logits, &[pixels * self.joints]);
                let b = self.binning;
                g.hat_dist(flat, -b.d_min, b.width(), b.bins)
            }
            DepthMode::Off => g.constant(Tensor::filled(&[pixels, self.binning.bins], 1.0 / self.binning.bins as f64)),
            _ => {
                let rows = g.reshape(logits, &[pixels * maps, self.binning.bins]);
                match self.cfg.distribution {
                    DistributionSource::Ordinal => ordinal_distribution(g, rows),
                    DistributionSource::Softmax => g.softmax_rows(rows),
                }
            }
        };
        let coords = Tensor::from_fn(&[pixels, 2], |i| {
            let (p, axis) = (i / 2, i % 2);
            if axis == 0 {
                pixel_center(p % width, width)
            } else {
                pixel_center(p / width, height)
            }
        });
        let coords = g.constant(coords);
        let pe = sinusoidal(g, coords, 2, self.cfg.frequencies);
        let pe = self.position.forward(g, store, pe);
        let tokens = g.add(feats, pe);
        let att = self.encoder.forward(g, store, tokens, tokens);
        let emb = g.add(tokens, att.output);
        let emb = self.encoder_norm.forward(g, store, emb);
        check_finite(g, emb, 5, "encoder")?;
        Ok(DepthOutput {
            logits: Some(logits),
            dist,
            embedding: Some(emb),
            maps,
        })
    }
}

/// Distributions for a network-free run: uniform over bins, one shared map.
pub fn uniform_output(g: &mut Graph, pixels: usize, bins: usize) -> DepthOutput {
    DepthOutput {
        logits: None,
        dist: g.constant(Tensor::filled(&[pixels, bins], 1.0 / bins as f64)),
        embedding: None,
        maps: 1,
    }
}

/// Window radius at the depth-map resolution.
pub fn default_window(height: usize) -> usize {
    (height / 8).max(1)
}

/// Pixels of the `r × r` window around each joint, clipped at the borders.
pub fn joint_windows(gt2d: &Pose2D, height: usize, width: usize, r: usize) -> Vec<Vec<usize>> {
    gt2d.coords
        .iter()
        .map(|c| {
            let (px, py) = (pixel_of(c[0], width) as i64, pixel_of(c[1], height) as i64);
            let mut out = Vec::new();
            for dy in window_offsets(r) {
                for dx in window_offsets(r) {
                    let (x, y) = (px + dx, py + dy);
                    if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                        out.push(y as usize * width + x as usize);
                    }
                }
            }
            out
        })
        .collect()
}

/// Ordinal targets `t_k = [k ≥ label]`.
pub fn ordinal_targets(label: usize, bins: usize) -> impl Iterator<Item = f64> {
    (0..bins).map(move |k| if k >= label { 1.0 } else { 0.0 })
}

/// Sparse ordinal depth loss: per-bin binary cross-entropy of the sigmoid
/// of the logits against ordinal targets, summed over bins and averaged over
/// the pixels inside each joint's `r × r` window. Regression heads use the
/// mean absolute depth error over the same pixels.
pub fn depth_loss(
    g: &mut Graph,
    out: &DepthOutput,
    mode: DepthMode,
    gt3d: &Pose3D,
    gt2d: &Pose2D,
    binning: &DepthBinning,
    height: usize,
    width: usize,
    r: usize,
) -> Result<Option<Var>> {
    if !gt2d.normalized {
        return Err(AlftError::Contract("depth loss needs normalized 2D joints".into()));
    }
    if r == 0 {
        return Err(AlftError::Contract("depth window must be at least 1".into()));
    }
    let Some(logits) = out.logits else { return Ok(None) };
    let joints = gt3d.joint_count();
    let windows = joint_windows(gt2d, height, width, r);
    let k = binning.bins;
    let mut idx = Vec::new();
    let mut targets = Vec::new();
    let mut depths = Vec::new();
    let mut count = 0usize;
    for (j, win) in windows.iter().enumerate() {
        let z = gt3d.coords[j][2];
        for &p in win {
            count += 1;
            match mode {
                DepthMode::Regression => {
                    idx.push(p * joints + j);
                    depths.push(z);
                }
                _ => {
                    let map = if out.maps == 1 { 0 } else { j };
                    let base = (p * out.maps + map) * k;
                    idx.extend(base..base + k);
                    targets.extend(ordinal_targets(binning.depth_to_bin(z), k));
                }
            }
        }
    }
    let picked = g.gather_elems(logits, &idx);
    let total = if mode == DepthMode::Regression {
        let gt = g.constant(Tensor::vector(depths));
        let diff = g.sub(picked, gt);
        let a = g.abs(diff);
        g.sum(a)
    } else {
        g.bce_logits_sum(picked, targets)
    };
    Ok(Some(g.scale(total, 1.0 / count as f64)))
}

/// Bilinear (half-pixel centers) taps from a `src_h × src_w` grid to pixel
/// `(x, y)` of a `dst_h × dst_w` grid, as `(source pixel, weight)` pairs.
pub fn bilinear_taps(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize, x: usize, y: usize) -> Vec<(usize, f64)> {
    let axis = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let u = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = (u.floor() as usize).min(src.saturating_sub(2));
        if src == 1 {
            (0, 0, 0.0)
        } else {
            (i0, i0 + 1, u - i0 as f64)
        }
    };
    let (x0, x1, fx) = axis(x, src_w, dst_w);
    let (y0, y1, fy) = axis(y, src_h, dst_h);
    vec![
        (y0 * src_w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * src_w + x1, fx * (1.0 - fy)),
        (y1 * src_w + x0, (1.0 - fx) * fy),
        (y1 * src_w + x1, fx * fy),
    ]
}

/// Plain-value depth distributions `[maps, height, width, bins]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthDistributionMap {
    pub maps: usize,
    pub height: usize,
    pub width: usize,
    pub bins: usize,
    pub logits: Vec<f64>,
    pub source: DistributionSource,
}

impl DepthDistributionMap {
    /// From `[pixels, maps * bins]` network logits.
    pub fn from_logits(logits: &Tensor, maps: usize, height: usize, width: usize, bins: usize, source: DistributionSource) -> Self {
        let mut out = vec![0.0; maps * height * width * bins];
        for p in 0..height * width {
            for m in 0..maps {
                let src = &logits.row(p)[m * bins..(m + 1) * bins];
                out[(m * height * width + p) * bins..][..bins].copy_from_slice(src);
            }
        }
        Self {
            maps,
            height,
            width,
            bins,
            logits: out,
            source,
        }
    }

    fn cell(&self, map: usize, pixel: usize) -> &[f64] {
        &self.logits[(map * self.height * self.width + pixel) * self.bins..][..self.bins]
    }

    /// Distribution over bins at every `(map, pixel)`.
    pub fn dist(&self) -> Vec<f64> {
        match self.source {
            DistributionSource::Ordinal => self.logits.chunks(self.bins).flat_map(ordinal_distribution_row).collect(),
            DistributionSource::Softmax => {
                let mut out = self.logits.clone();
                for row in out.chunks_mut(self.bins) {
                    crate::diffcore::softmax_in_place(row);
                }
                out
            }
        }
    }

    /// Per-bin sigmoid of the logits.
    pub fn ordinal(&self) -> Vec<f64> {
        self.logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()
    }

    /// Bilinear resampling of the distributions to `height × width`,
    /// renormalized over bins. Returns `[maps, height, width, bins]`.
    pub fn upsample_distribution(&self, height: usize, width: usize) -> Result<Vec<f64>> {
        if height < self.height || width < self.width {
            return Err(AlftError::Contract("upsampling target is smaller than the source".into()));
        }
        let dist = self.dist();
        let k = self.bins;
        let src_pixels = self.height * self.width;
        let mut out = vec![0.0; self.maps * height * width * k];
        for m in 0..self.maps {
            for y in 0..height {
                for x in 0..width {
                    let o = &mut out[((m * height + y) * width + x) * k..][..k];
                    for (sp, w) in bilinear_taps(self.height, self.width, height, width, x, y) {
                        let src = &dist[(m * src_pixels + sp) * k..][..k];
                        o.iter_mut().zip(src).for_each(|(a, b)| *a += w * b);
                    }
                    let s: f64 = o.iter().sum();
                    o.iter_mut().for_each(|v| *v /= s);
                }
            }
        }
        Ok(out)
    }

    /// `map,x,y,argmax_bin,expected_depth` rows for inspection.
    pub fn to_csv(&self, binning: &DepthBinning) -> String {
        let dist = self.dist();
        let mut s = String::from("map,x,y,argmax_bin,expected_depth\n");
        for m in 0..self.maps {
            for p in 0..self.height * self.width {
                let row = &dist[(m * self.height * self.width + p) * self.bins..][..self.bins];
                let arg = self.argmax(m, p);
                let e: f64 = row.iter().enumerate().map(|(k, w)| w * binning.bin_center(k)).sum();
                let _ = writeln!(s, "{m},{},{},{arg},{e}", p % self.width, p / self.width);
            }
        }
        s
    }

    /// Most probable bin of one `(map, pixel)` distribution.
    pub fn argmax(&self, map: usize, pixel: usize) -> usize {
        let cell = self.cell(map, pixel);
        let row = match self.source {
            DistributionSource::Ordinal => ordinal_distribution_row(cell),
            DistributionSource::Softmax => cell.to_vec(),
        };
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        best
    }
}
