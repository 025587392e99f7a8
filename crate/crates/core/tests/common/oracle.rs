//! Brute-force reference implementations, written with plain loops over
//! row-major vectors.

use std::rc::Rc;

use alft::diffcore::{Graph, ParameterStore, Tensor, Var, VolumeLayout};
use alft::nn::{Attention, Linear, Norm};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

pub fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

pub fn affine(x: &[Vec<f64>], store: &ParameterStore, l: &Linear) -> Vec<Vec<f64>> {
    let mut y = mm(x, &mat(store.value(l.weight)));
    if let Some(b) = l.bias {
        for row in &mut y {
            for (v, bv) in row.iter_mut().zip(store.value(b).data()) {
                *v += bv;
            }
        }
    }
    y
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn layer_norm(x: &[Vec<f64>], store: &ParameterStore, norm: &Norm) -> Vec<Vec<f64>> {
    let (gamma, beta) = (store.value(norm.gamma).data(), store.value(norm.beta).data());
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub fn add(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// One-head attention `softmax(QKᵀ/√d)V` followed by the output projection.
pub fn attention_oracle(store: &ParameterStore, att: &Attention, q: &[Vec<f64>], mem: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (qq, k, v) = (
        affine(q, store, &att.query),
        affine(mem, store, &att.key),
        affine(mem, store, &att.value),
    );
    let d = qq[0].len() as f64;
    let w: Vec<Vec<f64>> = qq
        .iter()
        .map(|qr| {
            softmax(
                &k.iter()
                    .map(|kr| qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let mixed = mm(&w, &v);
    (affine(&mixed, store, &att.out), w)
}

pub fn close(a: &[Vec<f64>], b: &Tensor, tol: f64) {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    assert_eq!(flat.len(), b.len());
    for (x, y) in flat.iter().zip(b.data()) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn constant(g: &mut Graph, x: &[Vec<f64>]) -> Var {
    g.constant(Tensor::matrix(x.len(), x[0].len(), x.iter().flatten().copied().collect()))
}

/// Fully occupied `h × w × k` volume with random features.
pub fn dense_volume(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, c: usize) -> (Tensor, Rc<VolumeLayout>) {
    let layout = Rc::new(VolumeLayout {
        height: h,
        width: w,
        depth: k,
        channels: c,
        slab_of_pixel: (0..h * w).map(Some).collect(),
    });
    (Tensor::from_fn(&[h * w, k * c], |_| rng.gen_range(-1.0..1.0)), layout)
}

pub fn node(vol: &Tensor, layout: &VolumeLayout, x: usize, y: usize, z: usize) -> Vec<f64> {
    let c = layout.channels;
    match layout.slab_of_pixel[y * layout.width + x] {
        Some(s) => vol.row(s)[z * c..(z + 1) * c].to_vec(),
        None => vec![0.0; c],
    }
}

/// Brute-force trilinear interpolation over the eight corners, with clamping
/// and half-pixel node centers.
pub fn trilinear_oracle(vol: &Tensor, layout: &VolumeLayout, p: [f64; 3]) -> Vec<f64> {
    let axis = |x: f64, n: usize| {
        let u = ((x + 1.0) * 0.5 * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let (x0, x1, fx) = axis(p[0], layout.width);
    let (y0, y1, fy) = axis(p[1], layout.height);
    let (z0, z1, fz) = axis(p[2], layout.depth);
    let mut out = vec![0.0; layout.channels];
    for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
        for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
            for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
                for (o, v) in out.iter_mut().zip(node(vol, layout, xi, yi, zi)) {
                    *o += wx * wy * wz * v;
                }
            }
        }
    }
    out
}

pub fn sample(vol: &Tensor, layout: &Rc<VolumeLayout>, pts: &[[f64; 3]]) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(vol.clone());
    let p = g.constant(Tensor::matrix(pts.len(), 3, pts.iter().flatten().copied().collect()));
    let s = g.trilinear(v, layout, p);
    g.value(s).clone()
}

/// Normalized coordinate of node `i` on an `n`-node axis.
pub fn node_coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Absolute (not root-centered) weighted-sum joints from plain values.
#[allow(clippy::needless_range_loop)]
pub fn weighted_sum_oracle(anchors: &Tensor, offsets: &Tensor, logits: &Tensor) -> (Vec<[f64; 3]>, Vec<Vec<f64>>) {
    let (a, j) = (logits.rows(), logits.cols());
    let mut joints = Vec::new();
    let mut weights = Vec::new();
    for jj in 0..j {
        let m = (0..a).map(|ai| logits.at(ai, jj)).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..a).map(|ai| (logits.at(ai, jj) - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|v| v / s).collect();
        let mut p = [0.0; 3];
        for ai in 0..a {
            for d in 0..3 {
                p[d] += w[ai] * (anchors.at(ai, d) + offsets.at(ai, jj * 3 + d));
            }
        }
        joints.push(p);
        weights.push(w);
    }
    (joints, weights)
}
