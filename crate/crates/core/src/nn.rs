//! Small parameterized layers shared by the depth net, decoder and heads.

use rand::Rng;

use crate::diffcore::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::Result;

/// Affine map `x · W + b` with `W: [inputs, outputs]`; the bias is optional.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add_uniform(&format!("{name}.w"), &[inputs, outputs], inputs, rng)?,
            bias: Some(store.add_zeros(&format!("{name}.b"), &[outputs])?),
            inputs,
            outputs,
        })
    }

    /// Map without a bias, for outputs whose constant shift cannot matter
    /// (it is cancelled by a following softmax).
    pub fn unbiased(store: &mut ParameterStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add_uniform(&format!("{name}.w"), &[inputs, outputs], inputs, rng)?,
            bias: None,
            inputs,
            outputs,
        })
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParameterStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add_zeros(&format!("{name}.w"), &[inputs, outputs])?,
            bias: Some(store.add_zeros(&format!("{name}.b"), &[outputs])?),
            inputs,
            outputs,
        })
    }

    /// All-zero weights and no bias.
    pub fn zeros_unbiased(store: &mut ParameterStore, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add_zeros(&format!("{name}.w"), &[inputs, outputs])?,
            bias: None,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.linear(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }
}

/// Layer normalization with learnable gain (initialized to one) and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_filled(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_zeros(&format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParameterStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], rng)?,
            out: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], rng)?,
        })
    }

    /// Perceptron whose output layer starts at zero.
    pub fn zero_output(store: &mut ParameterStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], rng)?,
            out: Linear::zeros(store, &format!("{name}.fc2"), dims[1], dims[2])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Var {
        let h = self.hidden.forward(g, store, x);
        let h = g.gelu(h);
        self.out.forward(g, store, h)
    }
}

/// Scaled dot-product multi-head attention with separate query, key, value
/// and output projections. The key projection has no bias: a key bias only
/// shifts every score of a query by the same amount.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Attention output together with the per-head weight matrices.
pub struct Attended {
    pub output: Var,
    /// Before the output projection, heads concatenated.
    pub mixed: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        query_dim: usize,
        memory_dim: usize,
        model_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), query_dim, model_dim, rng)?,
            key: Linear::unbiased(store, &format!("{name}.k"), memory_dim, model_dim, rng)?,
            value: Linear::new(store, &format!("{name}.v"), memory_dim, model_dim, rng)?,
            out: Linear::new(store, &format!("{name}.o"), model_dim, query_dim, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, queries: Var, memory: Var) -> Attended {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, memory);
        let v = self.value.forward(g, store, memory);
        let dh = self.query.outputs / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let s = g.matmul_t(qh, kh);
            let s = g.scale(s, scale);
            let w = g.softmax_rows(s);
            outs.push(g.matmul(w, vh));
            weights.push(w);
        }
        let mixed = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let output = self.out.forward(g, store, mixed);
        Attended { output, mixed, weights }
    }
}

/// Constant `[3, 3F]` matrix whose column `axis*F + i` holds `π·2^i` on row `axis`.
pub fn frequency_matrix(axes: usize, freqs: usize) -> Tensor {
    let cols = axes * freqs;
    Tensor::from_fn(&[axes, cols], |idx| {
        let (r, c) = (idx / cols, idx % cols);
        if c / freqs == r {
            std::f64::consts::PI * (1u64 << (c % freqs)) as f64
        } else {
            0.0
        }
    })
}

/// Sinusoidal encoding `[sin(p·Ω), cos(p·Ω)]` of `positions: [n, axes]`.
pub fn sinusoidal(g: &mut Graph, positions: Var, axes: usize, freqs: usize) -> Var {
    let omega = g.constant(frequency_matrix(axes, freqs));
    let phase = g.matmul(positions, omega);
    let s = g.sin(phase);
    let c = g.cos(phase);
    g.concat_cols(&[s, c])
}

/// Encoding of a position at the origin: zeros for the sine half, ones for
/// the cosine half.
pub fn zero_phase_encoding(axes: usize, freqs: usize) -> Vec<f64> {
    let n = axes * freqs;
    (0..2 * n).map(|i| if i < n { 0.0 } else { 1.0 }).collect()
}

/// Mean over rows as `[1, n] · x`.
pub fn mean_rows(g: &mut Graph, x: Var) -> Var {
    let n = g.value(x).rows();
    let avg = g.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
    g.matmul(avg, x)
}
