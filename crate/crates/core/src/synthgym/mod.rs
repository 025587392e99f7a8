//! Synthetic skeletons, pinhole projection, feature pyramids with planted
//! self-occlusion, 2D noise, and the dataset file format.

mod experiment;
mod train;

pub use experiment::{
    ablation_rows, noise_sweep, run_arm, sweep_csv, Arm, ArmResult, ExperimentConfig, Suite, ABLATION_HEADER, SWEEP_HEADER,
};
pub use train::{
    evaluate, evaluate_predictor, load_checkpoint, save_checkpoint, train, EpochRecord, Evaluation, Split, TrainConfig, TrainOutcome,
    CURVE_HEADER,
};

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Container, Tensor};
use crate::error::{AlftError, Result};
use crate::sampler::{FeatureLevel, FeaturePyramid};
use crate::skeleton::{select_challenging, ErrorReduction, Pose2D, Pose3D, PoseRecord, SkeletonTopology};

/// Seed of the fixed joint-to-channel mixing matrix.
const MIX_SEED: u64 = 0x5eed_f00d;
/// Feature channels per level; the last one carries depth.
pub const CHANNELS: usize = 8;
/// Occlusion level at and above which a sample belongs to the high-occlusion split.
pub const HIGH_OCCLUSION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    /// Distance from the camera to the root joint along the optical axis.
    pub distance: f64,
}

impl Camera {
    /// Focal length that maps the root plane onto normalized image units.
    pub fn for_width(width: usize, distance: f64) -> Self {
        Self {
            focal: distance * width as f64 / 2.0,
            distance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub sample_count: usize,
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    pub camera: Camera,
    /// Per-bone rotation range in radians around each axis.
    pub joint_angle_range: f64,
    /// Whole-body rotation range around the vertical axis.
    pub yaw_range: f64,
    /// Largest per-sample occlusion strength; each sample draws its own
    /// strength uniformly from `[0, occlusion_rate]`.
    pub occlusion_rate: f64,
    /// Standard deviation of the 2D input noise in pixels.
    pub noise_sigma: f64,
    /// Blob width in pixels of each level.
    pub blob_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_count: 2000,
            image_size: [64, 64],
            camera: Camera::for_width(64, 5.0),
            joint_angle_range: 0.5,
            yaw_range: std::f64::consts::PI,
            occlusion_rate: 1.0,
            noise_sigma: 1.0,
            blob_sigma: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(AlftError::Config("image size must be a positive multiple of 8".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(AlftError::Config("occlusion_rate must lie in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 || self.blob_sigma <= 0.0 || self.joint_angle_range < 0.0 || self.yaw_range < 0.0 {
            return Err(AlftError::Config("noise, blob width and angle ranges must be non-negative".into()));
        }
        if self.camera.focal <= 0.0 || self.camera.distance <= 0.0 {
            return Err(AlftError::Config("camera focal length and distance must be positive".into()));
        }
        Ok(())
    }
}

/// Random angles per joint plus a global yaw for one skeleton.
pub fn generate_skeleton(rng: &mut impl Rng, topology: &SkeletonTopology, angle_range: f64, yaw_range: f64) -> Pose3D {
    let draw = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let yaw = draw(rng, yaw_range);
    let n = topology.joint_count();
    let mut frames: Vec<Matrix3<f64>> = vec![Matrix3::identity(); n];
    let mut pos = vec![Vector3::zeros(); n];
    frames[0] = *Rotation3::from_axis_angle(&Vector3::y_axis(), yaw).matrix();
    for j in 1..n {
        let p = topology.parents[j].expect("non-root joints have parents");
        let local = Rotation3::from_euler_angles(draw(rng, angle_range), draw(rng, angle_range), draw(rng, angle_range));
        frames[j] = frames[p] * local.matrix();
        let d = topology.rest_directions[j];
        pos[j] = pos[p] + frames[j] * Vector3::new(d[0], d[1], d[2]) * topology.bone_lengths[j];
    }
    Pose3D::new(pos.iter().map(|v| [v.x, v.y, v.z]).collect()).root_centered()
}

/// Pinhole projection with the root on the optical axis:
/// `x = W/2 + f·X/(Z + distance)`, likewise `y`.
pub fn project(pose: &Pose3D, camera: &Camera, width: usize, height: usize) -> Result<Pose2D> {
    let mut coords = Vec::with_capacity(pose.joint_count());
    for p in &pose.coords {
        let depth = p[2] + camera.distance;
        if depth <= 0.0 {
            return Err(AlftError::Contract("joint behind the camera".into()));
        }
        coords.push([
            width as f64 / 2.0 + camera.focal * p[0] / depth,
            height as f64 / 2.0 + camera.focal * p[1] / depth,
        ]);
    }
    Ok(Pose2D::pixels(coords))
}

/// I.i.d. Gaussian perturbation of every pixel coordinate.
pub fn add_noise(pose: &Pose2D, sigma: f64, rng: &mut impl Rng) -> Pose2D {
    if sigma == 0.0 {
        return pose.clone();
    }
    let n = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    Pose2D {
        coords: pose.coords.iter().map(|c| [c[0] + n.sample(rng), c[1] + n.sample(rng)]).collect(),
        normalized: pose.normalized,
    }
}

/// Fixed non-negative joint-to-channel mixing weights `[joints][CHANNELS - 1]`.
pub fn mixing_matrix(joints: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(MIX_SEED);
    (0..joints).map(|_| (0..CHANNELS - 1).map(|_| rng.gen::<f64>()).collect()).collect()
}

/// Inputs to the feature synthesizer for one scene.
pub struct Scene<'a> {
    /// Joint positions in image pixels.
    pub joints2d: &'a Pose2D,
    /// Root-relative joint depths; larger is farther from the camera.
    pub depths: &'a [f64],
    pub occlusion: f64,
    pub image_size: [usize; 2],
    pub blob_sigma: f64,
    /// Depth range mapped onto `[0, 1]` in the depth channel.
    pub depth_range: (f64, f64),
}

/// Three-level pyramid at `H/2`, `H/4`, `H/8`. Each joint adds a Gaussian
/// blob mixed into the first seven channels and, scaled by its depth in
/// `[0, 1]`, into the last. On the two fine levels a joint whose blob center
/// lies within two blob widths of a nearer joint is attenuated by
/// `1 - occlusion`.
pub fn synthesize_features(scene: &Scene<'_>) -> FeaturePyramid {
    let [h, w] = scene.image_size;
    let joints = scene.joints2d.joint_count();
    let mix = mixing_matrix(joints);
    let (lo, hi) = scene.depth_range;
    let levels = (1..=3)
        .map(|l| {
            let (lh, lw) = (h >> l, w >> l);
            let scale = lw as f64 / w as f64;
            let centers: Vec<[f64; 2]> = scene.joints2d.coords.iter().map(|c| [c[0] * scale, c[1] * scale]).collect();
            let s2 = scene.blob_sigma * scene.blob_sigma;
            let gain: Vec<f64> = (0..joints)
                .map(|j| {
                    let occluded = l <= 2
                        && (0..joints).any(|i| {
                            i != j
                                && scene.depths[i] < scene.depths[j]
                                && (centers[i][0] - centers[j][0]).powi(2) + (centers[i][1] - centers[j][1]).powi(2) < 4.0 * s2
                        });
                    if occluded {
                        1.0 - scene.occlusion
                    } else {
                        1.0
                    }
                })
                .collect();
            let mut level = FeatureLevel::zeros(lh, lw, CHANNELS);
            for y in 0..lh {
                for x in 0..lw {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let cell = &mut level.data[(y * lw + x) * CHANNELS..][..CHANNELS];
                    for j in 0..joints {
                        let d2 = (px - centers[j][0]).powi(2) + (py - centers[j][1]).powi(2);
                        let b = gain[j] * (-d2 / (2.0 * s2)).exp();
                        if b == 0.0 {
                            continue;
                        }
                        for (c, m) in cell.iter_mut().zip(&mix[j]) {
                            *c += b * m;
                        }
                        let depth01 = ((scene.depths[j] - lo) / (hi - lo)).clamp(0.0, 1.0);
                        cell[CHANNELS - 1] += b * depth01;
                    }
                }
            }
            level
        })
        .collect();
    FeaturePyramid { levels }
}

/// Sum of squares over every level and channel.
pub fn pyramid_energy(p: &FeaturePyramid) -> f64 {
    p.levels.iter().flat_map(|l| &l.data).map(|v| v * v).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub gt3d: Pose3D,
    /// Exact projection in pixels.
    pub gt2d: Pose2D,
    /// Noisy 2D input in pixels.
    pub input2d: Pose2D,
    pub occlusion: f64,
    pub pyramid: FeaturePyramid,
    pub challenging: bool,
}

impl Sample {
    pub fn normalized_input(&self, size: [usize; 2]) -> Pose2D {
        self.input2d.normalize(size[1], size[0]).expect("pixel pose").0
    }

    pub fn normalized_gt2d(&self, size: [usize; 2]) -> Pose2D {
        self.gt2d.normalize(size[1], size[0]).expect("pixel pose").0
    }

    pub fn high_occlusion(&self) -> bool {
        self.occlusion >= HIGH_OCCLUSION
    }
}

/// Per-sample generator seeded by `(seed, index)` as an independent stream.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<Sample>,
    /// Projections rejected for joints behind the camera.
    pub rejected: usize,
}

fn build_sample(cfg: &SynthConfig, topology: &SkeletonTopology, gt3d: Pose3D, gt2d: Pose2D, occlusion: f64, rng: &mut impl Rng) -> Sample {
    let input2d = add_noise(&gt2d, cfg.noise_sigma, rng);
    let depths: Vec<f64> = gt3d.coords.iter().map(|c| c[2]).collect();
    let pyramid = synthesize_features(&Scene {
        joints2d: &gt2d,
        depths: &depths,
        occlusion,
        image_size: cfg.image_size,
        blob_sigma: cfg.blob_sigma,
        depth_range: (-1.0, 1.0),
    });
    let challenging = select_challenging(&input2d, &gt2d, 5.0, ErrorReduction::Mean).expect("matching joint counts");
    debug_assert_eq!(gt3d.joint_count(), topology.joint_count());
    Sample {
        gt3d,
        gt2d,
        input2d,
        occlusion,
        pyramid,
        challenging,
    }
}

/// Generate `cfg.sample_count` samples; sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(cfg: &SynthConfig, topology: &SkeletonTopology) -> Result<Dataset> {
    cfg.validate()?;
    let [h, w] = cfg.image_size;
    let mut samples = Vec::with_capacity(cfg.sample_count);
    let mut rejected = 0;
    for i in 0..cfg.sample_count {
        let mut rng = sample_rng(cfg.seed, i);
        let (gt3d, gt2d) = loop {
            let pose = generate_skeleton(&mut rng, topology, cfg.joint_angle_range, cfg.yaw_range);
            match project(&pose, &cfg.camera, w, h) {
                Ok(p) => break (pose, p),
                Err(_) => rejected += 1,
            }
        };
        let occlusion = rng.gen::<f64>() * cfg.occlusion_rate;
        samples.push(build_sample(cfg, topology, gt3d, gt2d, occlusion, &mut rng));
    }
    Ok(Dataset {
        config: cfg.clone(),
        samples,
        rejected,
    })
}

impl Dataset {
    /// Same scenes with the 2D inputs re-drawn at a different noise level.
    pub fn with_noise(&self, sigma: f64, seed: u64) -> Dataset {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = sample_rng(seed ^ 0x9e37_79b9_7f4a_7c15, i);
                let input2d = add_noise(&s.gt2d, sigma, &mut rng);
                Sample {
                    challenging: select_challenging(&input2d, &s.gt2d, 5.0, ErrorReduction::Mean).expect("matching joint counts"),
                    input2d,
                    ..s.clone()
                }
            })
            .collect();
        Dataset {
            config: SynthConfig {
                noise_sigma: sigma,
                ..self.config.clone()
            },
            samples,
            rejected: self.rejected,
        }
    }

    /// Mean distance of root-relative joints from the root.
    pub fn mean_joint_to_root(&self) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for s in &self.samples {
            for c in &s.gt3d.root_centered().coords {
                total += (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
                n += 1;
            }
        }
        total / n as f64
    }

    pub fn records(&self) -> Vec<PoseRecord> {
        self.samples
            .iter()
            .map(|s| PoseRecord {
                gt3d: s.gt3d.coords.clone(),
                gt2d: s.gt2d.coords.clone(),
                pred2d: s.input2d.coords.clone(),
            })
            .collect()
    }

    /// Write `<stem>.json` (pose records) and `<stem>.alft` (pyramids and metadata).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string(&self.records())?;
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        let meta = serde_json::json!({
            "config": self.config,
            "rejected": self.rejected,
            "occlusion": self.samples.iter().map(|s| s.occlusion).collect::<Vec<_>>(),
            "levels": self.samples.first().map(|s| s.pyramid.levels.iter().map(|l| [l.height, l.width, l.channels]).collect::<Vec<_>>()),
        });
        let mut c = Container::new(meta);
        for (i, s) in self.samples.iter().enumerate() {
            for (l, level) in s.pyramid.levels.iter().enumerate() {
                c.push(
                    format!("sample{i}.level{l}"),
                    Tensor::new(vec![level.height, level.width, level.channels], level.data.clone()),
                );
            }
        }
        c.write_to(&dir.join(format!("{stem}.alft")))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Dataset> {
        let records: Vec<PoseRecord> = serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
        let c = Container::read_from(&dir.join(format!("{stem}.alft")))?;
        let config: SynthConfig = serde_json::from_value(c.meta["config"].clone())?;
        let occlusion: Vec<f64> = serde_json::from_value(c.meta["occlusion"].clone())?;
        let rejected: usize = serde_json::from_value(c.meta["rejected"].clone())?;
        if occlusion.len() != records.len() {
            return Err(AlftError::Container("sidecar and pose file disagree on sample count".into()));
        }
        let mut samples = Vec::with_capacity(records.len());
        for (i, (r, occ)) in records.into_iter().zip(occlusion).enumerate() {
            let mut levels = Vec::new();
            for l in 0.. {
                let Some(t) = c.get(&format!("sample{i}.level{l}")) else { break };
                let s = t.shape();
                if s.len() != 3 {
                    return Err(AlftError::Container(format!("sample {i} level {l} is not a 3D grid")));
                }
                levels.push(FeatureLevel {
                    height: s[0],
                    width: s[1],
                    channels: s[2],
                    data: t.data().to_vec(),
                });
            }
            let gt2d = Pose2D::pixels(r.gt2d);
            let input2d = Pose2D::pixels(r.pred2d);
            samples.push(Sample {
                challenging: select_challenging(&input2d, &gt2d, 5.0, ErrorReduction::Mean)?,
                gt3d: Pose3D::new(r.gt3d),
                gt2d,
                input2d,
                occlusion: occ,
                pyramid: FeaturePyramid { levels },
            });
        }
        Ok(Dataset { config, samples, rejected })
    }
}
