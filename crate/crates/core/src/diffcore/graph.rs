//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node appended to a flat list, so
//! node indices already form a topological order. [`Graph::backward`] walks the
//! list once in reverse and accumulates exact analytic gradients into the
//! parents of every node that lies on a path to the loss.
//!
//! Nodes that do not depend on a differentiable leaf are constants: they are
//! skipped during backward and never allocate gradient buffers.

use std::rc::Rc;

use super::params::{ParamId, ParameterStore};
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floor applied to `log` inputs so finite inputs never produce `-inf`.
pub const LOG_FLOOR: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Occupancy table of a lifted feature volume.
///
/// The volume is conceptually a dense `height × width × depth × channels`
/// grid that is zero everywhere except at occupied pixels. Only occupied
/// pixels own a slab of `depth × channels` values.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeLayout {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub channels: usize,
    /// `height * width` entries, each the slab index of an occupied pixel.
    pub slab_of_pixel: Vec<Option<usize>>,
}

impl VolumeLayout {
    pub fn slab_count(&self) -> usize {
        self.slab_of_pixel.iter().filter(|s| s.is_some()).count()
    }
}

/// One corner of a trilinear stencil: slab-relative flat offset (or `None`
/// for an unoccupied, all-zero pixel), the corner weight, and the partial
/// derivatives of that weight with respect to the three point coordinates.
#[derive(Clone, Copy, Debug)]
struct Corner {
    base: Option<usize>,
    weight: f64,
    dweight: [f64; 3],
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Gelu(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        height: usize,
        width: usize,
        cin: usize,
        cout: usize,
        dilation: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherElems {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    RowNorms(Var),
    RowNormalize(Var),
    RowMix {
        src: Var,
        taps: Vec<Vec<(usize, f64)>>,
    },
    Lift {
        feats: Var,
        dist: Var,
        entries: Vec<(usize, usize)>,
    },
    Trilinear {
        vol: Var,
        points: Var,
        stencils: Vec<[Corner; 8]>,
        channels: usize,
    },
    GroupWeightedSum {
        weights: Var,
        values: Var,
    },
    Ensemble {
        weights: Var,
        anchors: Var,
        offsets: Var,
    },
    BceLogitsSum {
        logits: Var,
        targets: Vec<f64>,
    },
    HatDist {
        depths: Var,
        lower: f64,
        bin_width: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of `len` when `var` does not influence the loss.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Recording computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
}

fn shape_check(op: &str, ok: bool, a: &[usize], b: &[usize]) {
    if !ok {
        panic!("shape mismatch in {op}: {a:?} vs {b:?}");
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Continuous grid coordinate for a normalized coordinate in `[-1, 1]` over
/// `n` cells whose centers sit at `2(i + 0.5)/n - 1`. Returns the clamped
/// coordinate and its derivative with respect to the normalized input.
pub fn grid_coordinate(x: f64, n: usize) -> (f64, f64) {
    let u = (x + 1.0) * 0.5 * n as f64 - 0.5;
    let hi = (n - 1) as f64;
    if u < 0.0 {
        (0.0, 0.0)
    } else if u > hi {
        (hi, 0.0)
    } else {
        (u, 0.5 * n as f64)
    }
}

/// Lower cell index and fractional weight of a clamped grid coordinate.
fn cell(u: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, i0 + 1, u - i0 as f64)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Differentiable leaf holding a copy of a stored parameter. Its gradient
    /// is routed back by [`Graph::accumulate_into`].
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let var = self.push(store.value(id).clone(), Op::Leaf, true);
        self.bindings.push((var, id));
        var
    }

    pub fn bindings(&self) -> &[(Var, ParamId)] {
        &self.bindings
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        shape_check("add", va.shape() == vb.shape(), va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        shape_check("sub", va.shape() == vb.shape(), va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        shape_check("mul", va.shape() == vb.shape(), va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x + c).collect());
        let ng = self.ng(&[a]);
        self.push(t, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect());
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln σ(x)`, computed as `-softplus(-x)` so it never saturates.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| -softplus(-x), Op::LogSigmoid(a))
    }

    /// Natural log with the input floored at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(LOG_FLOOR).ln(), Op::Log(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    // ---- matrices ----------------------------------------------------

    /// `[n, m] + [m]`, broadcasting the vector over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(row));
        let m = va.cols();
        shape_check("add_row", vb.len() == m, va.shape(), vb.shape());
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(m) {
            for (x, b) in chunk.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(&[a, row]);
        self.push(t, Op::AddRow(a, row), ng)
    }

    /// `[n, k] × [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k) = (va.rows(), va.cols());
        let m = vb.cols();
        shape_check("matmul", vb.rows() == k, va.shape(), vb.shape());
        let mut out = vec![0.0; n * m];
        matmul_into(va.data(), vb.data(), &mut out, n, k, m);
        let ng = self.ng(&[a, b]);
        self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), ng)
    }

    /// `[n, k] × [m, k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k) = (va.rows(), va.cols());
        let m = vb.rows();
        shape_check("matmul_t", vb.cols() == k, va.shape(), vb.shape());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &va.data()[i * k..(i + 1) * k];
            for j in 0..m {
                let br = &vb.data()[j * k..(j + 1) * k];
                out[i * m + j] = dot(ar, br);
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(Tensor::matrix(n, m, out), Op::MatMulT(a, b), ng)
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (n, m) = (va.rows(), va.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = va.data()[i * m + j];
            }
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::matrix(m, n, out), Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape);
        let ng = self.ng(&[a]);
        self.push(t, Op::Reshape(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(m) {
            softmax_in_place(row);
        }
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(&[a]);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// Layer normalization over the columns of `x: [n, c]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = vx.cols();
        shape_check("layer_norm", vg.len() == c && vb.len() == c, vx.shape(), vg.shape());
        let n = vx.rows();
        let mut normalized = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &vx.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let h = (row[j] - mean) * r;
                normalized[i * c + j] = h;
                out[i * c + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            },
            ng,
        )
    }

    /// 3×3 convolution, stride 1, zero padding equal to `dilation`, over an
    /// `[height, width, cin]` grid. `w` is laid out `[(ky*3 + kx)*cin + ci, co]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, height: usize, width: usize, dilation: usize) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let cin = vx.len() / (height * width);
        shape_check("conv3x3 input", cin * height * width == vx.len(), vx.shape(), &[height, width]);
        let cout = vb.len();
        shape_check("conv3x3 weight", vw.len() == 9 * cin * cout, vw.shape(), &[9 * cin, cout]);
        let mut out = vec![0.0; height * width * cout];
        for h in 0..height {
            for wd in 0..width {
                let o = &mut out[(h * width + wd) * cout..(h * width + wd + 1) * cout];
                o.copy_from_slice(vb.data());
                for ky in 0..3 {
                    let sy = h as isize + (ky as isize - 1) * dilation as isize;
                    if sy < 0 || sy >= height as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = wd as isize + (kx as isize - 1) * dilation as isize;
                        if sx < 0 || sx >= width as isize {
                            continue;
                        }
                        let src = &vx.data()[(sy as usize * width + sx as usize) * cin..][..cin];
                        let wbase = (ky * 3 + kx) * cin;
                        for (ci, &xv) in src.iter().enumerate() {
                            let wrow = &vw.data()[(wbase + ci) * cout..][..cout];
                            for (ov, wv) in o.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[x, w, b]);
        self.push(
            Tensor::new(vec![height * width, cout], out),
            Op::Conv2d {
                x,
                w,
                b,
                height,
                width,
                cin,
                cout,
                dilation,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (n, m) = (vx.rows(), vx.cols());
        shape_check("slice_cols", start + len <= m, vx.shape(), &[start, len]);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&vx.data()[i * m + start..i * m + start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::matrix(n, len, out), Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            let vp = self.value(p);
            shape_check("concat_cols", vp.rows() == n, vp.shape(), self.shape(parts[0]));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        self.push(Tensor::matrix(n, total, out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let m = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let vp = self.value(p);
            shape_check("concat_rows", vp.cols() == m, vp.shape(), self.shape(parts[0]));
            out.extend_from_slice(vp.data());
            n += vp.rows();
        }
        let ng = self.ng(parts);
        self.push(Tensor::matrix(n, m, out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let vx = self.value(x);
        let m = vx.cols();
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            assert!(r < vx.rows(), "gather_rows: row {r} out of range for {:?}", vx.shape());
            out.extend_from_slice(vx.row(r));
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::matrix(rows.len(), m, out), Op::GatherRows { x, rows: rows.to_vec() }, ng)
    }

    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Var {
        let vx = self.value(x);
        let out = idx.iter().map(|&i| vx.data()[i]).collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::vector(out), Op::GatherElems { x, idx: idx.to_vec() }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Euclidean norm of every row; the gradient at a zero row is zero.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = (0..va.rows()).map(|i| dot(va.row(i), va.row(i)).sqrt()).collect();
        let ng = self.ng(&[a]);
        self.push(Tensor::vector(out), Op::RowNorms(a), ng)
    }

    /// Divide every row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(m) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(&[a]);
        self.push(t, Op::RowNormalize(a), ng)
    }

    /// Output row `e` is `Σ weight · src[row]` over the taps of `e`.
    /// Expresses bilinear resampling as a fixed sparse linear map.
    pub fn row_mix(&mut self, src: Var, taps: Vec<Vec<(usize, f64)>>) -> Var {
        let vs = self.value(src);
        let m = vs.cols();
        let mut out = vec![0.0; taps.len() * m];
        for (e, tap) in taps.iter().enumerate() {
            let o = &mut out[e * m..(e + 1) * m];
            for &(r, w) in tap {
                for (ov, sv) in o.iter_mut().zip(vs.row(r)) {
                    *ov += w * sv;
                }
            }
        }
        let ng = self.ng(&[src]);
        self.push(Tensor::matrix(taps.len(), m, out), Op::RowMix { src, taps }, ng)
    }

    // ---- fused geometry ops --------------------------------------------

    /// Outer-product scatter: for every entry `(token, slab)`, slab
    /// `[depth, channels]` accumulates `dist[entry] ⊗ feats[token]`.
    pub fn lift(&mut self, feats: Var, dist: Var, entries: &[(usize, usize)], slabs: usize) -> Var {
        let (vf, vd) = (self.value(feats), self.value(dist));
        let c = vf.cols();
        let k = vd.cols();
        shape_check("lift", vd.rows() == entries.len(), vd.shape(), &[entries.len(), k]);
        let mut out = vec![0.0; slabs * k * c];
        for (e, &(tok, slab)) in entries.iter().enumerate() {
            let f = vf.row(tok);
            let d = vd.row(e);
            let base = slab * k * c;
            for (kk, &dk) in d.iter().enumerate() {
                let o = &mut out[base + kk * c..base + (kk + 1) * c];
                for (ov, fv) in o.iter_mut().zip(f) {
                    *ov += dk * fv;
                }
            }
        }
        let ng = self.ng(&[feats, dist]);
        self.push(
            Tensor::new(vec![slabs, k * c], out),
            Op::Lift {
                feats,
                dist,
                entries: entries.to_vec(),
            },
            ng,
        )
    }

    /// Trilinear interpolation of a lifted volume at `points: [p, 3]` in
    /// normalized `(x, y, z) ∈ [-1, 1]³` coordinates, clamped at the border.
    pub fn trilinear(&mut self, vol: Var, layout: &Rc<VolumeLayout>, points: Var) -> Var {
        let (vv, vp) = (self.value(vol), self.value(points));
        let (k, c) = (layout.depth, layout.channels);
        shape_check(
            "trilinear volume",
            vv.len() == layout.slab_count() * k * c,
            vv.shape(),
            &[layout.slab_count(), k * c],
        );
        shape_check("trilinear points", vp.cols() == 3, vp.shape(), &[vp.rows(), 3]);
        let p = vp.rows();
        let mut stencils = Vec::with_capacity(p);
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let pt = vp.row(i);
            let (u, du) = grid_coordinate(pt[0], layout.width);
            let (v, dv) = grid_coordinate(pt[1], layout.height);
            let (s, ds) = grid_coordinate(pt[2], layout.depth);
            let (x0, x1, fx) = cell(u, layout.width);
            let (y0, y1, fy) = cell(v, layout.height);
            let (z0, z1, fz) = cell(s, layout.depth);
            let mut st = [Corner {
                base: None,
                weight: 0.0,
                dweight: [0.0; 3],
            }; 8];
            for (n, corner) in st.iter_mut().enumerate() {
                let (bx, by, bz) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
                let (xi, wx, dwx) = if bx == 1 { (x1, fx, 1.0) } else { (x0, 1.0 - fx, -1.0) };
                let (yi, wy, dwy) = if by == 1 { (y1, fy, 1.0) } else { (y0, 1.0 - fy, -1.0) };
                let (zi, wz, dwz) = if bz == 1 { (z1, fz, 1.0) } else { (z0, 1.0 - fz, -1.0) };
                let base = layout.slab_of_pixel[yi * layout.width + xi].map(|slab| (slab * k + zi) * c);
                *corner = Corner {
                    base,
                    weight: wx * wy * wz,
                    dweight: [dwx * wy * wz * du, wx * dwy * wz * dv, wx * wy * dwz * ds],
                };
                if let Some(b) = base {
                    let o = &mut out[i * c..(i + 1) * c];
                    let w = corner.weight;
                    for (ov, src) in o.iter_mut().zip(&vv.data()[b..b + c]) {
                        *ov += w * src;
                    }
                }
            }
            stencils.push(st);
        }
        let ng = self.ng(&[vol, points]);
        self.push(
            Tensor::matrix(p, c, out),
            Op::Trilinear {
                vol,
                points,
                stencils,
                channels: c,
            },
            ng,
        )
    }

    /// `weights: [g, n]`, `values: [g*n, c]` → `[g, c]` with row `i` equal to
    /// `Σ_j weights[i, j] · values[i*n + j]`.
    pub fn group_weighted_sum(&mut self, weights: Var, values: Var) -> Var {
        let (vw, vv) = (self.value(weights), self.value(values));
        let (g, n) = (vw.rows(), vw.cols());
        let c = vv.cols();
        shape_check("group_weighted_sum", vv.rows() == g * n, vw.shape(), vv.shape());
        let mut out = vec![0.0; g * c];
        for i in 0..g {
            let o = &mut out[i * c..(i + 1) * c];
            for j in 0..n {
                let w = vw.data()[i * n + j];
                for (ov, vx) in o.iter_mut().zip(vv.row(i * n + j)) {
                    *ov += w * vx;
                }
            }
        }
        let ng = self.ng(&[weights, values]);
        self.push(Tensor::matrix(g, c, out), Op::GroupWeightedSum { weights, values }, ng)
    }

    /// Anchor ensemble: `weights: [j, a]` (rows sum to one), `anchors: [a, 3]`,
    /// `offsets: [a, j*3]` → joints `[j, 3]` with
    /// `P_j = Σ_a weights[j, a] · (anchors[a] + offsets[a, j])`.
    pub fn ensemble(&mut self, weights: Var, anchors: Var, offsets: Var) -> Var {
        let (vw, va, vo) = (self.value(weights), self.value(anchors), self.value(offsets));
        let (nj, na) = (vw.rows(), vw.cols());
        shape_check("ensemble anchors", va.rows() == na && va.cols() == 3, vw.shape(), va.shape());
        shape_check("ensemble offsets", vo.rows() == na && vo.cols() == nj * 3, vw.shape(), vo.shape());
        let mut out = vec![0.0; nj * 3];
        for j in 0..nj {
            for a in 0..na {
                let w = vw.data()[j * na + a];
                for d in 0..3 {
                    out[j * 3 + d] += w * (va.data()[a * 3 + d] + vo.data()[a * nj * 3 + j * 3 + d]);
                }
            }
        }
        let ng = self.ng(&[weights, anchors, offsets]);
        self.push(Tensor::matrix(nj, 3, out), Op::Ensemble { weights, anchors, offsets }, ng)
    }

    /// `Σ_i softplus(x_i) − t_i x_i`, the summed binary cross-entropy of
    /// `sigmoid(x)` against targets `t ∈ [0, 1]`.
    pub fn bce_logits_sum(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let vl = self.value(logits);
        shape_check("bce_logits_sum", vl.len() == targets.len(), vl.shape(), &[targets.len()]);
        let s = vl.data().iter().zip(&targets).map(|(&x, &t)| softplus(x) - t * x).sum();
        let ng = self.ng(&[logits]);
        self.push(Tensor::scalar(s), Op::BceLogitsSum { logits, targets }, ng)
    }

    /// Spread each scalar depth onto its two nearest bin centers with
    /// linear ("hat") weights, giving a `[m, bins]` distribution.
    pub fn hat_dist(&mut self, depths: Var, lower: f64, bin_width: f64, bins: usize) -> Var {
        let vd = self.value(depths);
        let m = vd.len();
        let mut out = vec![0.0; m * bins];
        for (i, &d) in vd.data().iter().enumerate() {
            let s = ((d - lower) / bin_width - 0.5).clamp(0.0, (bins - 1) as f64);
            let (k0, k1, f) = cell(s, bins);
            out[i * bins + k0] += 1.0 - f;
            out[i * bins + k1] += f;
        }
        let ng = self.ng(&[depths]);
        self.push(Tensor::matrix(m, bins, out), Op::HatDist { depths, lower, bin_width }, ng)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`, seeding its gradient with one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.backward_seeded(loss, vec![1.0])
    }

    /// Reverse pass from `out` with an explicit upstream gradient, i.e. a
    /// vector-Jacobian product.
    pub fn backward_seeded(&self, out: Var, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.value(out).len(), "seed length must match output");
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(out.0 + 1);
        grads.resize_with(out.0 + 1, || None);
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Move a gradient buffer out of `grads` so two buffers can be borrowed
    /// mutably at once; the caller puts it back.
    fn take_slot(&self, grads: &mut [Option<Vec<f64>>], v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![0.0; n]))
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, *c);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let m = gb.len();
                    for chunk in g.chunks(m) {
                        axpy(gb, chunk, 1.0);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    // ga[n,k] += g[n,m] · bᵀ
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for kk in 0..k {
                            ga[r * k + kk] += dot(gr, &vb.data()[kk * m..(kk + 1) * m]);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // gb[k,m] += aᵀ · g
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let av = va.data()[r * k + kk];
                            if av != 0.0 {
                                axpy(&mut gb[kk * m..(kk + 1) * m], gr, av);
                            }
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.rows());
                if let Some(ga) = self.slot(grads, *a) {
                    // ga[n,k] += g[n,m] · b[m,k]
                    for r in 0..n {
                        for j in 0..m {
                            let gv = g[r * m + j];
                            if gv != 0.0 {
                                axpy(&mut ga[r * k..(r + 1) * k], &vb.data()[j * k..(j + 1) * k], gv);
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // gb[m,k] += gᵀ · a
                    for r in 0..n {
                        for j in 0..m {
                            let gv = g[r * m + j];
                            if gv != 0.0 {
                                axpy(&mut gb[j * k..(j + 1) * k], &va.data()[r * k..(r + 1) * k], gv);
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let va = self.value(*a);
                let (n, m) = (va.rows(), va.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..n {
                        for c in 0..m {
                            ga[r * m + c] += g[c * n + r];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let m = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gar, yr), gr) in ga.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m)) {
                        let s = dot(gr, yr);
                        for ((x, yi), gi) in gar.iter_mut().zip(yr).zip(gr) {
                            *x += yi * (gi - s);
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, yi), gi) in ga.iter_mut().zip(y).zip(g) {
                        *x += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, ai), gi) in ga.iter_mut().zip(va).zip(g) {
                        *x += gi * sigmoid(-ai);
                    }
                }
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, ai), gi) in ga.iter_mut().zip(va).zip(g) {
                        if *ai >= LOG_FLOOR {
                            *x += gi / ai;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, &ai), gi) in ga.iter_mut().zip(va).zip(g) {
                        *x += gi * gelu_parts(ai).1;
                    }
                }
            }
            Op::Sin(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, ai), gi) in ga.iter_mut().zip(va).zip(g) {
                        *x += gi * ai.cos();
                    }
                }
            }
            Op::Cos(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, ai), gi) in ga.iter_mut().zip(va).zip(g) {
                        *x -= gi * ai.sin();
                    }
                }
            }
            Op::Abs(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, ai), gi) in ga.iter_mut().zip(va).zip(g) {
                        if *ai > 0.0 {
                            *x += gi;
                        } else if *ai < 0.0 {
                            *x -= gi;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let c = node.value.cols();
                let n = node.value.rows();
                let vg = self.value(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for r in 0..n {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * normalized[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for chunk in g.chunks(c) {
                        axpy(gb, chunk, 1.0);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut gh = vec![0.0; c];
                    for r in 0..n {
                        let hr = &normalized[r * c..(r + 1) * c];
                        for j in 0..c {
                            gh[j] = g[r * c + j] * vg[j];
                        }
                        let mean_gh = gh.iter().sum::<f64>() / c as f64;
                        let mean_ghh = dot(&gh, hr) / c as f64;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                height,
                width,
                cin,
                cout,
                dilation,
            } => {
                let (height, width, cin, cout, dil) = (*height, *width, *cin, *cout, *dilation as isize);
                let vx = self.value(*x).data();
                let vw = self.value(*w).data();
                if let Some(gb) = self.slot(grads, *b) {
                    for chunk in g.chunks(cout) {
                        axpy(gb, chunk, 1.0);
                    }
                }
                let mut gw = self.take_slot(grads, *w);
                let mut gx = self.take_slot(grads, *x);
                for h in 0..height {
                    for wd in 0..width {
                        let go = &g[(h * width + wd) * cout..][..cout];
                        for ky in 0..3 {
                            let sy = h as isize + (ky as isize - 1) * dil;
                            if sy < 0 || sy >= height as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = wd as isize + (kx as isize - 1) * dil;
                                if sx < 0 || sx >= width as isize {
                                    continue;
                                }
                                let sbase = (sy as usize * width + sx as usize) * cin;
                                let wbase = (ky * 3 + kx) * cin;
                                for ci in 0..cin {
                                    let wrow = (wbase + ci) * cout;
                                    if let Some(gw) = gw.as_deref_mut() {
                                        axpy(&mut gw[wrow..wrow + cout], go, vx[sbase + ci]);
                                    }
                                    if let Some(gx) = gx.as_deref_mut() {
                                        gx[sbase + ci] += dot(go, &vw[wrow..wrow + cout]);
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(v) = gw {
                    grads[w.0] = Some(v);
                }
                if let Some(v) = gx {
                    grads[x.0] = Some(v);
                }
            }
            Op::SliceCols { x, start } => {
                let m = self.value(*x).cols();
                let len = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, gr) in g.chunks(len).enumerate() {
                        axpy(&mut gx[r * m + start..r * m + start + len], gr, 1.0);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for (r, gr) in g.chunks(total).enumerate() {
                            axpy(&mut gp[r * w..(r + 1) * w], &gr[off..off + w], 1.0);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        axpy(gp, &g[off..off + n], 1.0);
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, rows } => {
                let m = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (gr, &r) in g.chunks(m).zip(rows) {
                        axpy(&mut gx[r * m..(r + 1) * m], gr, 1.0);
                    }
                }
            }
            Op::GatherElems { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (gi, &k) in g.iter().zip(idx) {
                        gx[k] += gi;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::RowNorms(a) => {
                let va = self.value(*a);
                let m = va.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..va.rows() {
                        if y[r] > 0.0 {
                            axpy(&mut ga[r * m..(r + 1) * m], va.row(r), g[r] / y[r]);
                        }
                    }
                }
            }
            Op::RowNormalize(a) => {
                let va = self.value(*a);
                let m = va.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..va.rows() {
                        let ar = va.row(r);
                        let gr = &g[r * m..(r + 1) * m];
                        let s: f64 = ar.iter().sum();
                        let ga_dot = dot(gr, ar) / (s * s);
                        for j in 0..m {
                            ga[r * m + j] += gr[j] / s - ga_dot;
                        }
                    }
                }
            }
            Op::RowMix { src, taps } => {
                let m = node.value.cols();
                if let Some(gs) = self.slot(grads, *src) {
                    for (e, tap) in taps.iter().enumerate() {
                        let gr = &g[e * m..(e + 1) * m];
                        for &(r, w) in tap {
                            axpy(&mut gs[r * m..(r + 1) * m], gr, w);
                        }
                    }
                }
            }
            Op::Lift { feats, dist, entries } => {
                let (vf, vd) = (self.value(*feats), self.value(*dist));
                let (c, k) = (vf.cols(), vd.cols());
                if let Some(gd) = self.slot(grads, *dist) {
                    for (e, &(tok, slab)) in entries.iter().enumerate() {
                        let f = vf.row(tok);
                        for kk in 0..k {
                            let base = (slab * k + kk) * c;
                            gd[e * k + kk] += dot(&g[base..base + c], f);
                        }
                    }
                }
                if let Some(gf) = self.slot(grads, *feats) {
                    for (e, &(tok, slab)) in entries.iter().enumerate() {
                        let d = vd.row(e);
                        for (kk, &dk) in d.iter().enumerate() {
                            let base = (slab * k + kk) * c;
                            axpy(&mut gf[tok * c..(tok + 1) * c], &g[base..base + c], dk);
                        }
                    }
                }
            }
            Op::Trilinear {
                vol,
                points,
                stencils,
                channels,
            } => {
                let c = *channels;
                let vv = self.value(*vol).data();
                if let Some(gp) = self.slot(grads, *points) {
                    for (i, st) in stencils.iter().enumerate() {
                        let gr = &g[i * c..(i + 1) * c];
                        for corner in st {
                            if let Some(b) = corner.base {
                                let s = dot(gr, &vv[b..b + c]);
                                for d in 0..3 {
                                    gp[i * 3 + d] += s * corner.dweight[d];
                                }
                            }
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, *vol) {
                    for (i, st) in stencils.iter().enumerate() {
                        let gr = &g[i * c..(i + 1) * c];
                        for corner in st {
                            if let Some(b) = corner.base {
                                axpy(&mut gv[b..b + c], gr, corner.weight);
                            }
                        }
                    }
                }
            }
            Op::GroupWeightedSum { weights, values } => {
                let (vw, vv) = (self.value(*weights), self.value(*values));
                let (gcount, n) = (vw.rows(), vw.cols());
                let c = vv.cols();
                if let Some(gw) = self.slot(grads, *weights) {
                    for i in 0..gcount {
                        for j in 0..n {
                            gw[i * n + j] += dot(&g[i * c..(i + 1) * c], vv.row(i * n + j));
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, *values) {
                    for i in 0..gcount {
                        for j in 0..n {
                            let r = i * n + j;
                            axpy(&mut gv[r * c..(r + 1) * c], &g[i * c..(i + 1) * c], vw.data()[i * n + j]);
                        }
                    }
                }
            }
            Op::Ensemble { weights, anchors, offsets } => {
                let (vw, va, vo) = (self.value(*weights), self.value(*anchors), self.value(*offsets));
                let (nj, na) = (vw.rows(), vw.cols());
                if let Some(gw) = self.slot(grads, *weights) {
                    for j in 0..nj {
                        for a in 0..na {
                            let mut s = 0.0;
                            for d in 0..3 {
                                s += g[j * 3 + d] * (va.data()[a * 3 + d] + vo.data()[a * nj * 3 + j * 3 + d]);
                            }
                            gw[j * na + a] += s;
                        }
                    }
                }
                if let Some(ga) = self.slot(grads, *anchors) {
                    for j in 0..nj {
                        for a in 0..na {
                            let w = vw.data()[j * na + a];
                            for d in 0..3 {
                                ga[a * 3 + d] += w * g[j * 3 + d];
                            }
                        }
                    }
                }
                if let Some(go) = self.slot(grads, *offsets) {
                    for j in 0..nj {
                        for a in 0..na {
                            let w = vw.data()[j * na + a];
                            for d in 0..3 {
                                go[a * nj * 3 + j * 3 + d] += w * g[j * 3 + d];
                            }
                        }
                    }
                }
            }
            Op::BceLogitsSum { logits, targets } => {
                let vl = self.value(*logits).data();
                if let Some(gl) = self.slot(grads, *logits) {
                    for ((x, &l), t) in gl.iter_mut().zip(vl).zip(targets) {
                        *x += g[0] * (sigmoid(l) - t);
                    }
                }
            }
            Op::HatDist { depths, lower, bin_width } => {
                let bins = node.value.cols();
                let vd = self.value(*depths).data();
                if let Some(gd) = self.slot(grads, *depths) {
                    for (i, &d) in vd.iter().enumerate() {
                        let raw = (d - lower) / bin_width - 0.5;
                        if raw <= 0.0 || raw >= (bins - 1) as f64 || bins == 1 {
                            continue;
                        }
                        let (k0, k1, _) = cell(raw, bins);
                        gd[i] += (g[i * bins + k1] - g[i * bins + k0]) / bin_width;
                    }
                }
            }
        }
    }

    /// Add the gradients of every parameter leaf into `store`.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParameterStore) {
        for &(var, id) in &self.bindings {
            if let Some(g) = grads.get(var) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let o = &mut out[i * m..(i + 1) * m];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                axpy(o, &b[kk * m..(kk + 1) * m], av);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}
