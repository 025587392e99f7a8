//! The anchor-feature interaction decoder.
//!
//! Each layer applies, in order, depth cross-attention, inter-anchor
//! self-attention, 3D deformable cross-attention and a feed-forward block.
//! Every sublayer adds its output to its input and layer-normalizes the sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::Provenance;
use crate::depthfield::DepthBinning;
use crate::diffcore::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::{AlftError, Result};
use crate::nn::{sinusoidal, Attended, Attention, Linear, Mlp, Norm};
use crate::sampler::LiftedLevel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub sample_points: usize,
    /// Frequencies per axis of the anchor positional encoding.
    pub frequencies: usize,
    /// One set of sampling offsets shared by all heads instead of one per head.
    pub shared_offsets: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 4,
            model_dim: 64,
            sample_points: 4,
            frequencies: 4,
            shared_offsets: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(AlftError::Config("model_dim must be divisible by heads".into()));
        }
        if self.sample_points == 0 || self.frequencies == 0 {
            return Err(AlftError::Config("sample_points and frequencies must be at least 1".into()));
        }
        Ok(())
    }
}

/// Row of the provenance embedding table used by an anchor.
pub fn provenance_row(p: &Provenance, per_joint: usize) -> usize {
    match *p {
        Provenance::Global { .. } => 0,
        Provenance::Local { joint, slot } => 1 + joint * per_joint + slot,
    }
}

#[derive(Clone, Debug)]
pub struct DeformableParams {
    pub offsets: Linear,
    pub weights: Linear,
    pub out: Linear,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub depth_attention: Attention,
    pub depth_norm: Norm,
    pub self_attention: Attention,
    pub self_norm: Norm,
    pub deformable: DeformableParams,
    pub ffn: Mlp,
    pub ffn_norm: Norm,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    pub per_joint: usize,
    pub provenance: ParamId,
    pub position: Linear,
    pub layers: Vec<DecoderLayer>,
}

impl DecoderParams {
    pub fn new(
        store: &mut ParameterStore,
        cfg: DecoderConfig,
        joints: usize,
        per_joint: usize,
        depth_dim: usize,
        token_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.model_dim;
        let (h, n) = (cfg.heads, cfg.sample_points);
        let provenance = store.add_uniform("decoder.query.provenance", &[1 + joints * per_joint, c], 1, rng)?;
        let position = Linear::new(store, "decoder.query.pos", 6 * cfg.frequencies, c, rng)?;
        let offset_rows = if cfg.shared_offsets { n * 3 } else { h * n * 3 };
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                Ok(DecoderLayer {
                    depth_attention: Attention::new(store, &format!("{p}.depth_attn"), c, depth_dim, c, h, rng)?,
                    depth_norm: Norm::new(store, &format!("{p}.depth_norm"), c)?,
                    self_attention: Attention::new(store, &format!("{p}.self_attn"), c, c, c, h, rng)?,
                    self_norm: Norm::new(store, &format!("{p}.self_norm"), c)?,
                    deformable: DeformableParams {
                        offsets: Linear::zeros(store, &format!("{p}.deform.offsets"), c, offset_rows)?,
                        weights: Linear::zeros(store, &format!("{p}.deform.weights"), c, h * n)?,
                        out: Linear::new(store, &format!("{p}.deform.out"), h * token_dim, c, rng)?,
                        norm: Norm::new(store, &format!("{p}.deform.norm"), c)?,
                    },
                    ffn: Mlp::new(store, &format!("{p}.ffn"), [c, 2 * c, c], rng)?,
                    ffn_norm: Norm::new(store, &format!("{p}.ffn_norm"), c)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            per_joint,
            provenance,
            position,
            layers,
        })
    }
}

/// Anchor queries `[A, C]`: provenance embedding plus a projected sinusoidal
/// encoding of the anchor position.
pub fn encode_anchor_queries(
    g: &mut Graph,
    store: &ParameterStore,
    params: &DecoderParams,
    positions: Var,
    provenance: &[Provenance],
) -> Var {
    let table = g.param(store, params.provenance);
    let rows: Vec<usize> = provenance.iter().map(|p| provenance_row(p, params.per_joint)).collect();
    let base = g.gather_rows(table, &rows);
    let pe = sinusoidal(g, positions, 3, params.cfg.frequencies);
    let pe = params.position.forward(g, store, pe);
    g.add(base, pe)
}

/// `LN(q + MHA(q, F_D))`.
pub fn depth_cross_attention(g: &mut Graph, store: &ParameterStore, layer: &DecoderLayer, q: Var, depth_tokens: Var) -> (Var, Attended) {
    let att = layer.depth_attention.forward(g, store, q, depth_tokens);
    let x = g.add(q, att.output);
    (layer.depth_norm.forward(g, store, x), att)
}

/// `LN(q + MHA(q, q))`.
pub fn anchor_self_attention(g: &mut Graph, store: &ParameterStore, layer: &DecoderLayer, q: Var) -> (Var, Attended) {
    let att = layer.self_attention.forward(g, store, q, q);
    let x = g.add(q, att.output);
    (layer.self_norm.forward(g, store, x), att)
}

/// Handles exposed by one deformable sublayer.
#[derive(Clone, Copy, Debug)]
pub struct Deformed {
    pub output: Var,
    /// `[A * heads, points]` softmax weights.
    pub weights: Var,
    /// `[A * heads * points, 3]` sampling locations.
    pub points: Var,
    /// `[A * heads, token_dim]` weighted samples before the projection.
    pub aggregated: Var,
}

/// Reference points in volume coordinates: `z` mapped from depth units onto `[-1, 1]`.
pub fn reference_points(g: &mut Graph, positions: Var, binning: &DepthBinning) -> Var {
    let s = 2.0 / (binning.d_min + binning.d_max);
    let o = binning.volume_z(0.0);
    let scale = g.constant(Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, s]));
    let shift = g.constant(Tensor::vector(vec![0.0, 0.0, o]));
    let p = g.matmul(positions, scale);
    g.add_row(p, shift)
}

/// `LN(q + W_o · [Σ_n W_n φ(F_3D, P_a + ΔS_n)]_heads)`, with the levels
/// averaged at every sampling point.
pub fn deformable_cross_attention_3d(
    g: &mut Graph,
    store: &ParameterStore,
    cfg: &DecoderConfig,
    params: &DeformableParams,
    q: Var,
    reference: Var,
    levels: &[LiftedLevel],
) -> Result<Deformed> {
    let a = g.value(q).rows();
    let (h, n) = (cfg.heads, cfg.sample_points);
    let off = params.offsets.forward(g, store, q);
    if !g.value(off).is_finite() {
        return Err(AlftError::NonFinite("deformable sampling offsets".into()));
    }
    let off = if cfg.shared_offsets {
        let o = g.reshape(off, &[a * n, 3]);
        let rows: Vec<usize> = (0..a * h * n).map(|i| (i / (h * n)) * n + i % n).collect();
        g.gather_rows(o, &rows)
    } else {
        g.reshape(off, &[a * h * n, 3])
    };
    let rows: Vec<usize> = (0..a * h * n).map(|i| i / (h * n)).collect();
    let base = g.gather_rows(reference, &rows);
    let points = g.add(base, off);
    let mut sampled = None;
    for level in levels {
        let s = g.trilinear(level.volume, &level.layout, points);
        sampled = Some(match sampled {
            None => s,
            Some(acc) => g.add(acc, s),
        });
    }
    let sampled = sampled.ok_or_else(|| AlftError::Contract("deformable attention needs at least one volume".into()))?;
    let sampled = g.scale(sampled, 1.0 / levels.len() as f64);
    let logits = params.weights.forward(g, store, q);
    let logits = g.reshape(logits, &[a * h, n]);
    let weights = g.softmax_rows(logits);
    let aggregated = g.group_weighted_sum(weights, sampled);
    let c_i = g.value(aggregated).cols();
    let merged = g.reshape(aggregated, &[a, h * c_i]);
    let proj = params.out.forward(g, store, merged);
    let x = g.add(q, proj);
    Ok(Deformed {
        output: params.norm.forward(g, store, x),
        weights,
        points,
        aggregated,
    })
}

/// `LN(q + FFN(q))`.
pub fn feed_forward(g: &mut Graph, store: &ParameterStore, layer: &DecoderLayer, q: Var) -> Var {
    let f = layer.ffn.forward(g, store, q);
    let x = g.add(q, f);
    layer.ffn_norm.forward(g, store, x)
}

/// Final queries and every attention weight matrix produced on the way.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub queries: Var,
    pub attention_weights: Vec<Var>,
}

/// Encode the anchors and run every decoder layer. Depth cross-attention is
/// skipped when no depth tokens are given.
pub fn decode(
    g: &mut Graph,
    store: &ParameterStore,
    params: &DecoderParams,
    positions: Var,
    provenance: &[Provenance],
    depth_tokens: Option<Var>,
    levels: &[LiftedLevel],
    binning: &DepthBinning,
) -> Result<Decoded> {
    let mut q = encode_anchor_queries(g, store, params, positions, provenance);
    let reference = reference_points(g, positions, binning);
    let mut attention_weights = Vec::new();
    for layer in &params.layers {
        if let Some(f_d) = depth_tokens {
            let (x, att) = depth_cross_attention(g, store, layer, q, f_d);
            attention_weights.extend(att.weights);
            q = x;
        }
        let (x, att) = anchor_self_attention(g, store, layer, q);
        attention_weights.extend(att.weights);
        let d = deformable_cross_attention_3d(g, store, &params.cfg, &layer.deformable, x, reference, levels)?;
        attention_weights.push(d.weights);
        q = feed_forward(g, store, layer, d.output);
        if !g.value(q).is_finite() {
            return Err(AlftError::NonFinite("decoder layer output".into()));
        }
    }
    Ok(Decoded {
        queries: q,
        attention_weights,
    })
}
