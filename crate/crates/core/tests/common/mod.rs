#![allow(dead_code)]

use alft::anchors::AnchorConfig;
use alft::decoder::DecoderConfig;
use alft::depthfield::{DepthBinning, DepthNetConfig};
use alft::diffcore::{grad_check, grad_check_at, GradCheck, Graph, ParameterStore, Tensor, Var};
use alft::model::{Model, ModelConfig, Variant};
use alft::sampler::{FeatureLevel, FeaturePyramid, SamplerConfig};
use alft::skeleton::{Pose2D, Pose3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod oracle;

/// 4 joints, 2 local anchors each, a 4×3 global grid (20 anchors), 8 bins,
/// model width 8.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        joints: 4,
        anchors: AnchorConfig {
            local_per_joint: 2,
            global_grid: [4, 3],
            ..Default::default()
        },
        binning: DepthBinning {
            bins: 8,
            ..Default::default()
        },
        depth: DepthNetConfig {
            hidden: 4,
            frequencies: 2,
            ..Default::default()
        },
        sampler: SamplerConfig {
            token_dim: 4,
            ..Default::default()
        },
        decoder: DecoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            sample_points: 2,
            frequencies: 2,
            shared_offsets: false,
        },
        ..Default::default()
    }
}

pub struct MicroInstance {
    pub model: Model,
    pub pyramid: FeaturePyramid,
    pub input2d: Pose2D,
    pub gt2d: Pose2D,
    pub gt3d: Pose3D,
}

pub fn random_pyramid(rng: &mut impl Rng, sizes: &[usize], channels: usize) -> FeaturePyramid {
    FeaturePyramid {
        levels: sizes
            .iter()
            .map(|&s| FeatureLevel {
                height: s,
                width: s,
                channels,
                data: (0..s * s * channels).map(|_| rng.gen_range(0.0..1.0)).collect(),
            })
            .collect(),
    }
}

/// A micro pipeline with every parameter moved off its initialization so
/// that zero-initialized heads carry gradient too.
pub fn micro_instance(variant: Variant, seed: u64) -> MicroInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pyramid = random_pyramid(&mut rng, &[8, 4, 2], 3);
    let cfg = variant.apply(&micro_config());
    let mut model = Model::new(cfg, &[3, 3, 3], seed).unwrap();
    let jittered: Vec<f64> = model.store.flat_values().iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect();
    model.store.set_flat_values(&jittered);
    let gt3d = Pose3D::new(
        (0..4)
            .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.6..0.6)])
            .collect(),
    );
    let gt2d = Pose2D {
        coords: gt3d.coords.iter().map(|c| [c[0], c[1]]).collect(),
        normalized: true,
    };
    let input2d = Pose2D {
        coords: gt2d
            .coords
            .iter()
            .map(|c| [c[0] + rng.gen_range(-0.05..0.05), c[1] + rng.gen_range(-0.05..0.05)])
            .collect(),
        normalized: true,
    };
    MicroInstance {
        model,
        pyramid,
        input2d,
        gt2d,
        gt3d,
    }
}

/// Total loss and its gradient with respect to every parameter.
pub fn loss_and_grad(inst: &mut MicroInstance, values: &[f64]) -> (f64, Vec<f64>) {
    inst.model.store.set_flat_values(values);
    inst.model.store.zero_grads();
    let mut g = Graph::new();
    let fwd = inst.model.forward(&mut g, &inst.pyramid, &inst.input2d, 7).unwrap();
    let losses = inst.model.losses(&mut g, &fwd, &inst.gt3d, &inst.gt2d).unwrap();
    let grads = g.backward(losses.total);
    g.accumulate_into(&grads, &mut inst.model.store);
    (g.scalar(losses.total), inst.model.store.flat_grads())
}

/// Central-difference step for whole-pipeline checks. At 1e-6 the roundoff
/// of a loss near 2 (about 1e-10 absolute) swamps gradients below 1e-6.
pub const PIPELINE_EPSILON: f64 = 1e-5;

pub fn pipeline_grad_check(variant: Variant, seed: u64) -> GradCheck {
    let mut inst = micro_instance(variant, seed);
    let x0 = inst.model.store.flat_values();
    grad_check(|x| loss_and_grad(&mut inst, x), &x0, PIPELINE_EPSILON).unwrap()
}

/// Gradient check of a scalar built from the parameters in `store`.
pub fn store_grad_check(store: &mut ParameterStore, epsilon: f64, build: impl Fn(&mut Graph, &ParameterStore) -> Var) -> GradCheck {
    let all: Vec<usize> = (0..store.scalar_count()).collect();
    store_grad_check_at(store, epsilon, &all, build)
}

/// [`store_grad_check`] restricted to the given flat coordinates.
pub fn store_grad_check_at(
    store: &mut ParameterStore,
    epsilon: f64,
    coords: &[usize],
    build: impl Fn(&mut Graph, &ParameterStore) -> Var,
) -> GradCheck {
    let x0 = store.flat_values();
    let eval = |x: &[f64]| {
        store.set_flat_values(x);
        store.zero_grads();
        let mut g = Graph::new();
        let out = build(&mut g, store);
        let grads = g.backward(out);
        g.accumulate_into(&grads, store);
        (g.scalar(out), store.flat_grads())
    };
    let r = grad_check_at(eval, &x0, epsilon, coords).unwrap();
    store.set_flat_values(&x0);
    r
}

/// `Σ r ⊙ x` for a fixed pseudo-random `r`, turning any output into a scalar.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let r = g.constant(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let m = g.mul(x, r);
    g.sum(m)
}

pub fn random_pose2d(rng: &mut impl Rng, joints: usize, spread: f64) -> Pose2D {
    Pose2D {
        coords: (0..joints)
            .map(|_| [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)])
            .collect(),
        normalized: true,
    }
}
