#![allow(clippy::needless_range_loop)]

use alft::model::{Model, ModelConfig, Variant};
use alft::skeleton::{Pose2D, Pose3D, SkeletonTopology};
use alft::synthgym::{
    add_noise, evaluate, evaluate_predictor, generate_dataset, generate_skeleton, load_checkpoint, mixing_matrix, project, pyramid_energy,
    sample_rng, save_checkpoint, synthesize_features, train, Camera, Scene, SynthConfig, TrainConfig, CHANNELS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(seed: u64, n: usize) -> SynthConfig {
    SynthConfig {
        seed,
        sample_count: n,
        ..Default::default()
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn zero_angle_ranges_give_the_rest_pose() {
    let topo = SkeletonTopology::h36m();
    let mut rest = vec![[0.0; 3]; topo.joint_count()];
    for j in 1..topo.joint_count() {
        let p = topo.parents[j].unwrap();
        for d in 0..3 {
            rest[j][d] = rest[p][d] + topo.rest_directions[j][d] * topo.bone_lengths[j];
        }
    }
    let rest = Pose3D::new(rest).root_centered();
    for seed in 0..3 {
        let pose = generate_skeleton(&mut ChaCha8Rng::seed_from_u64(seed), &topo, 0.0, 0.0);
        for (a, b) in pose.coords.iter().zip(&rest.coords) {
            assert!(dist(*a, *b) < 1e-12);
        }
    }
}

#[test]
fn bone_lengths_are_preserved_and_seeds_matter() {
    let topo = SkeletonTopology::h36m();
    for seed in 0..20 {
        let pose = generate_skeleton(&mut ChaCha8Rng::seed_from_u64(seed), &topo, 0.8, 3.0);
        assert_eq!(pose.coords[0], [0.0, 0.0, 0.0]);
        for j in 1..topo.joint_count() {
            let p = topo.parents[j].unwrap();
            assert!((dist(pose.coords[j], pose.coords[p]) - topo.bone_lengths[j]).abs() < 1e-12);
        }
    }
    let draw = |s| generate_skeleton(&mut ChaCha8Rng::seed_from_u64(s), &topo, 0.5, 1.0);
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5), draw(6));
}

#[test]
fn pinhole_projection() {
    let cam = Camera {
        focal: 100.0,
        distance: 4.0,
    };
    let on_axis = Pose3D::new(vec![[0.0, 0.0, 0.7]]);
    assert_eq!(project(&on_axis, &cam, 64, 48).unwrap().coords[0], [32.0, 24.0]);

    let p = Pose3D::new(vec![[0.31, -0.47, 0.22], [-0.9, 0.15, -1.3]]);
    let a = project(&p, &cam, 64, 48).unwrap();
    let b = project(&p, &Camera { focal: 200.0, ..cam }, 64, 48).unwrap();
    for (ca, cb) in a.coords.iter().zip(&b.coords) {
        assert!((cb[0] - 32.0 - 2.0 * (ca[0] - 32.0)).abs() < 1e-12);
        assert!((cb[1] - 24.0 - 2.0 * (ca[1] - 24.0)).abs() < 1e-12);
    }
    for (c, q) in a.coords.iter().zip(&p.coords) {
        assert!((c[0] - (32.0 + 100.0 * q[0] / (q[2] + 4.0))).abs() < 1e-12);
        assert!((c[1] - (24.0 + 100.0 * q[1] / (q[2] + 4.0))).abs() < 1e-12);
    }
    assert!(project(&Pose3D::new(vec![[0.0, 0.0, -4.5]]), &cam, 64, 48).is_err());
}

#[test]
fn projections_behind_the_camera_are_rejected_and_redrawn() {
    let cfg = SynthConfig {
        camera: Camera {
            focal: 20.0,
            distance: 0.5,
        },
        ..small(3, 20)
    };
    let d = generate_dataset(&cfg, &SkeletonTopology::h36m()).unwrap();
    assert_eq!(d.samples.len(), 20);
    assert!(d.rejected > 0);
    assert!(d.samples.iter().all(|s| s.gt3d.coords.iter().all(|c| c[2] + 0.5 > 0.0)));
}

fn scene_pyramid(joints: Vec<[f64; 2]>, depths: &[f64], occlusion: f64) -> alft::sampler::FeaturePyramid {
    let pose = Pose2D::pixels(joints);
    synthesize_features(&Scene {
        joints2d: &pose,
        depths,
        occlusion,
        image_size: [64, 64],
        blob_sigma: 1.0,
        depth_range: (-1.0, 1.0),
    })
}

#[test]
fn single_blob_peaks_at_its_joint() {
    let p = scene_pyramid(vec![[20.3, 41.7]], &[0.5], 0.0);
    let dims: Vec<[usize; 3]> = p.levels.iter().map(|l| [l.height, l.width, l.channels]).collect();
    assert_eq!(dims, vec![[32, 32, CHANNELS], [16, 16, CHANNELS], [8, 8, CHANNELS]]);
    let mix = mixing_matrix(1);
    for (l, level) in p.levels.iter().enumerate() {
        let scale = level.width as f64 / 64.0;
        let (jx, jy) = ((20.3 * scale) as usize, (41.7 * scale) as usize);
        let at = |x: usize, y: usize, c: usize| level.data[(y * level.width + x) * CHANNELS + c];
        let best = (0..level.height * level.width)
            .max_by(|&a, &b| at(a % level.width, a / level.width, 0).total_cmp(&at(b % level.width, b / level.width, 0)))
            .unwrap();
        assert_eq!((best % level.width, best / level.width), (jx, jy), "level {l}");
        // Depth 0.5 in [-1, 1] is 0.75 on the depth channel.
        assert!((at(jx, jy, CHANNELS - 1) / at(jx, jy, 0) - 0.75 / mix[0][0]).abs() < 1e-12);
    }
}

#[test]
fn full_occlusion_removes_the_farther_joint_on_fine_levels() {
    let both = scene_pyramid(vec![[30.0, 30.0], [30.0, 30.0]], &[-0.2, 0.4], 1.0);
    let near_only = scene_pyramid(vec![[30.0, 30.0], [-1e6, -1e6]], &[-0.2, 0.4], 1.0);
    for l in 0..2 {
        assert_eq!(both.levels[l].data, near_only.levels[l].data);
    }
    assert_ne!(both.levels[2].data, near_only.levels[2].data);
}

#[test]
fn energy_decreases_with_occlusion() {
    let energies: Vec<f64> = (0..=10)
        .map(|i| pyramid_energy(&scene_pyramid(vec![[30.0, 30.0], [30.8, 30.4]], &[-0.2, 0.4], i as f64 / 10.0)))
        .collect();
    assert!(energies.windows(2).all(|w| w[1] < w[0]), "{energies:?}");
}

#[test]
fn noise_statistics() {
    let pose = Pose2D::pixels(vec![[10.0, 20.0]]);
    assert_eq!(add_noise(&pose, 0.0, &mut ChaCha8Rng::seed_from_u64(0)), pose);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let p = add_noise(&pose, 2.0, &mut rng);
        xs.push(p.coords[0][0] - 10.0);
        ys.push(p.coords[0][1] - 20.0);
    }
    for v in [xs, ys] {
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((sd - 2.0).abs() < 0.04, "sd {sd}");
        assert!(mean.abs() < 3.0 * 2.0 / (n as f64).sqrt(), "mean {mean}");
    }
}

#[test]
fn datasets_are_determined_by_seed_and_config() {
    let topo = SkeletonTopology::h36m();
    let a = generate_dataset(&small(7, 12), &topo).unwrap();
    let b = generate_dataset(&small(7, 12), &topo).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.samples[0].gt3d, generate_dataset(&small(8, 12), &topo).unwrap().samples[0].gt3d);
    // A sample depends only on (seed, index), not on the dataset size.
    let c = generate_dataset(&small(7, 5), &topo).unwrap();
    assert_eq!(c.samples[..], a.samples[..5]);
    let mut r1 = sample_rng(7, 3);
    let mut r2 = sample_rng(7, 4);
    assert_ne!(rand::Rng::gen::<u64>(&mut r1), rand::Rng::gen::<u64>(&mut r2));
    for s in &a.samples {
        assert_eq!(s.gt2d, project(&s.gt3d, &a.config.camera, 64, 64).unwrap());
        assert!((0.0..=1.0).contains(&s.occlusion));
    }
}

#[test]
fn dataset_files_round_trip() {
    let topo = SkeletonTopology::h36m();
    let d = generate_dataset(&small(9, 4), &topo).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path(), "train").unwrap();
    let back = alft::synthgym::Dataset::load(dir.path(), "train").unwrap();
    assert_eq!(back, d);
}

#[test]
fn noise_resampling_keeps_the_scenes() {
    let d = generate_dataset(&small(10, 30), &SkeletonTopology::h36m()).unwrap();
    let clean = d.with_noise(0.0, 1);
    let noisy = d.with_noise(8.0, 1);
    for ((s, c), n) in d.samples.iter().zip(&clean.samples).zip(&noisy.samples) {
        assert_eq!(c.input2d, s.gt2d);
        assert!(!c.challenging);
        assert_eq!(n.gt3d, s.gt3d);
        assert_eq!(n.pyramid, s.pyramid);
    }
    assert!(noisy.samples.iter().any(|s| s.challenging));
    assert_eq!(d.with_noise(3.0, 2), d.with_noise(3.0, 2));
}

#[test]
fn oracle_predictor_scores_zero_and_splits_partition() {
    let d = generate_dataset(&small(11, 60), &SkeletonTopology::h36m())
        .unwrap()
        .with_noise(4.0, 3);
    let ev = evaluate_predictor(&d, 0.15, |_, s| Ok(s.gt3d.clone())).unwrap();
    let (ch, non) = (ev.challenging.as_ref().unwrap(), ev.non_challenging.as_ref().unwrap());
    assert_eq!(ev.full.as_ref().unwrap().sample_count, ch.sample_count + non.sample_count);
    for r in [ev.full.as_ref(), Some(ch), Some(non), ev.high_occlusion.as_ref()]
        .into_iter()
        .flatten()
    {
        assert_eq!(r.mpjpe, 0.0);
        assert_eq!(r.pck, 100.0);
    }
    let clean = d.with_noise(0.0, 0);
    let ev = evaluate_predictor(&clean, 0.15, |_, s| Ok(s.gt3d.clone())).unwrap();
    assert!(ev.challenging.is_none());
}

#[test]
fn untrained_model_predicts_the_collapsed_pose() {
    let d = generate_dataset(&small(12, 40), &SkeletonTopology::h36m()).unwrap();
    let model = Model::new(ModelConfig::desk(), &[CHANNELS; 3], 0).unwrap();
    let ev = evaluate(&model, &d, 0.15).unwrap();
    let mpjpe = ev.full.unwrap().mpjpe;
    let reference = d.mean_joint_to_root();
    assert!((mpjpe - reference).abs() < 0.05 * reference, "{mpjpe} vs {reference}");
}

fn quick(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.optimizer.epochs = epochs;
    cfg.optimizer.batch_size = 4;
    cfg.optimizer.learning_rate = 1e-3;
    cfg.probe_count = 8;
    cfg
}

#[test]
fn one_epoch_smoke_run_writes_a_loadable_checkpoint() {
    let d = generate_dataset(&small(13, 10), &SkeletonTopology::h36m()).unwrap();
    let out = train(&ModelConfig::desk(), Variant::Full, &d, Some(&d), &quick(1)).unwrap();
    assert_eq!(out.curve.len(), 1);
    assert!(out.curve[0].val_mpjpe.is_some());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.alft");
    save_checkpoint(&out.model, Variant::Full, &path).unwrap();
    let (model, variant) = load_checkpoint(&path).unwrap();
    assert_eq!(variant, Variant::Full);
    assert_eq!(model.store.flat_values(), out.model.store.flat_values());
    let (a, b) = (evaluate(&model, &d, 0.15).unwrap(), evaluate(&out.model, &d, 0.15).unwrap());
    assert_eq!(a, b);
    assert!(out.curve_csv().starts_with(alft::synthgym::CURVE_HEADER));
}

#[test]
fn first_epoch_reduces_the_loss_and_runs_are_reproducible() {
    let d = generate_dataset(&small(14, 48), &SkeletonTopology::h36m()).unwrap();
    let a = train(&ModelConfig::desk(), Variant::Full, &d, None, &quick(2)).unwrap();
    assert!(
        a.curve[0].probe_loss < a.initial_loss,
        "{} vs {}",
        a.curve[0].probe_loss,
        a.initial_loss
    );
    let b = train(&ModelConfig::desk(), Variant::Full, &d, None, &quick(2)).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.model.store.flat_values(), b.model.store.flat_values());
}

#[test]
fn variants_train_without_error() {
    let d = generate_dataset(&small(15, 4), &SkeletonTopology::h36m()).unwrap();
    for v in Variant::ALL {
        let out = train(&ModelConfig::desk(), v, &d, None, &quick(1)).unwrap();
        assert!(out.curve[0].train_loss.is_finite(), "{v}");
    }
}
