//! Pose data types, the kinematic tree, and evaluation metrics.
//!
//! The per-pair metrics expect root-relative inputs and measure distances
//! as given; [`MetricReport`] root-centers both poses before scoring.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{AlftError, Result};

/// Kinematic tree with one root at index 0 and parents preceding children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    pub names: Vec<String>,
    /// `None` for the root.
    pub parents: Vec<Option<usize>>,
    /// Distance from each joint to its parent; zero for the root.
    pub bone_lengths: Vec<f64>,
    /// Unit direction of each bone in the rest pose (x right, y down, z away
    /// from the camera); unused for the root.
    pub rest_directions: Vec<[f64; 3]>,
}

impl SkeletonTopology {
    pub fn new(names: Vec<String>, parents: Vec<Option<usize>>, bone_lengths: Vec<f64>, rest_directions: Vec<[f64; 3]>) -> Result<Self> {
        let n = parents.len();
        if n == 0 || names.len() != n || bone_lengths.len() != n || rest_directions.len() != n {
            return Err(AlftError::Config("topology arrays must be non-empty and equally long".into()));
        }
        if parents[0].is_some() {
            return Err(AlftError::Config("joint 0 must be the root".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => return Err(AlftError::Config(format!("joint {j} needs a parent with a smaller index"))),
            }
        }
        if bone_lengths[0] != 0.0 || bone_lengths.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(AlftError::Config(
                "bone lengths must be finite, non-negative, and zero at the root".into(),
            ));
        }
        Ok(Self {
            names,
            parents,
            bone_lengths,
            rest_directions,
        })
    }

    /// The 17-joint Human3.6M-style tree rooted at the pelvis, sized so that
    /// every joint stays within one unit of the root.
    pub fn h36m() -> Self {
        const S: f64 = 0.8;
        let table: [(&str, Option<usize>, f64, [f64; 3]); 17] = [
            ("pelvis", None, 0.0, [0.0, 0.0, 0.0]),
            ("r_hip", Some(0), 0.13, [-1.0, 0.0, 0.0]),
            ("r_knee", Some(1), 0.45, [0.0, 1.0, 0.0]),
            ("r_ankle", Some(2), 0.44, [0.0, 1.0, 0.0]),
            ("l_hip", Some(0), 0.13, [1.0, 0.0, 0.0]),
            ("l_knee", Some(4), 0.45, [0.0, 1.0, 0.0]),
            ("l_ankle", Some(5), 0.44, [0.0, 1.0, 0.0]),
            ("spine", Some(0), 0.23, [0.0, -1.0, 0.0]),
            ("thorax", Some(7), 0.25, [0.0, -1.0, 0.0]),
            ("neck", Some(8), 0.10, [0.0, -1.0, 0.0]),
            ("head", Some(9), 0.12, [0.0, -1.0, 0.0]),
            ("l_shoulder", Some(8), 0.15, [1.0, 0.0, 0.0]),
            ("l_elbow", Some(11), 0.28, [0.0, 1.0, 0.0]),
            ("l_wrist", Some(12), 0.25, [0.0, 1.0, 0.0]),
            ("r_shoulder", Some(8), 0.15, [-1.0, 0.0, 0.0]),
            ("r_elbow", Some(14), 0.28, [0.0, 1.0, 0.0]),
            ("r_wrist", Some(15), 0.25, [0.0, 1.0, 0.0]),
        ];
        Self::new(
            table.iter().map(|t| t.0.to_string()).collect(),
            table.iter().map(|t| t.1).collect(),
            table.iter().map(|t| t.2 * S).collect(),
            table.iter().map(|t| t.3).collect(),
        )
        .expect("built-in topology is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    /// Parent index with the conventional `-1` sentinel for the root.
    pub fn parent_index(&self) -> Vec<i64> {
        self.parents.iter().map(|p| p.map_or(-1, |p| p as i64)).collect()
    }
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        Self::h36m()
    }
}

/// 2D joint coordinates, in pixels or normalized to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub coords: Vec<[f64; 2]>,
    pub normalized: bool,
}

impl Pose2D {
    pub fn pixels(coords: Vec<[f64; 2]>) -> Self {
        Self { coords, normalized: false }
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len()
    }

    /// Affine map from `[0, width] × [0, height]` onto `[-1, 1]²`. Coordinates
    /// outside the image are clamped; the second value counts clamped axes.
    pub fn normalize(&self, width: usize, height: usize) -> Result<(Pose2D, usize)> {
        if self.normalized {
            return Err(AlftError::Contract("pose is already normalized".into()));
        }
        if width == 0 || height == 0 {
            return Err(AlftError::Contract("image size must be positive".into()));
        }
        let mut clamped = 0;
        let mut map = |v: f64, extent: usize| {
            let n = 2.0 * v / extent as f64 - 1.0;
            if !(-1.0..=1.0).contains(&n) {
                clamped += 1;
            }
            n.clamp(-1.0, 1.0)
        };
        let coords = self.coords.iter().map(|c| [map(c[0], width), map(c[1], height)]).collect();
        Ok((Pose2D { coords, normalized: true }, clamped))
    }

    /// Flattened `[x0, y0, x1, y1, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.coords.iter().flat_map(|c| c.iter().copied()).collect()
    }
}

/// Free-function form of [`Pose2D::normalize`].
pub fn normalize_pose_2d(pose: &Pose2D, width: usize, height: usize) -> Result<(Pose2D, usize)> {
    pose.normalize(width, height)
}

/// Root-relative 3D joint coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose3D {
    pub coords: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self { coords }
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len()
    }

    pub fn root_centered(&self) -> Pose3D {
        let r = self.coords[0];
        Pose3D {
            coords: self.coords.iter().map(|c| [c[0] - r[0], c[1] - r[1], c[2] - r[2]]).collect(),
        }
    }

    /// Apply `s · R · p + t` to every joint.
    pub fn transformed(&self, rotation: &Matrix3<f64>, scale: f64, translation: [f64; 3]) -> Pose3D {
        let t = Vector3::from(translation);
        Pose3D {
            coords: self
                .coords
                .iter()
                .map(|c| {
                    let p = rotation * Vector3::from(*c) * scale + t;
                    [p.x, p.y, p.z]
                })
                .collect(),
        }
    }
}

fn dist3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn same_joints(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(AlftError::Contract(format!("joint count mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(AlftError::Contract("poses have no joints".into()));
    }
    Ok(())
}

/// Euclidean error of every joint.
pub fn per_joint_errors(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<f64>> {
    same_joints(pred.joint_count(), gt.joint_count())?;
    Ok(pred.coords.iter().zip(&gt.coords).map(|(a, b)| dist3(a, b)).collect())
}

/// Mean per-joint position error.
pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let e = per_joint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Result of a Procrustes-aligned error computation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aligned {
    pub error: f64,
    /// The ground truth was (near-)collinear and only translation was fitted.
    pub degenerate: bool,
}

/// Optimal similarity alignment (rotation, isotropic scale, translation) of
/// `pred` onto `gt`, returned as the aligned prediction.
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<(Pose3D, bool)> {
    same_joints(pred.joint_count(), gt.joint_count())?;
    let n = pred.joint_count() as f64;
    let to_v = |c: &[f64; 3]| Vector3::new(c[0], c[1], c[2]);
    let mu_p = pred.coords.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let mu_g = gt.coords.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let xs: Vec<Vector3<f64>> = pred.coords.iter().map(|c| to_v(c) - mu_p).collect();
    let ys: Vec<Vector3<f64>> = gt.coords.iter().map(|c| to_v(c) - mu_g).collect();

    let mut gt_cov = Matrix3::zeros();
    for y in &ys {
        gt_cov += y * y.transpose();
    }
    let gt_sv = gt_cov.symmetric_eigenvalues();
    let mut sv: Vec<f64> = gt_sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let degenerate = pred.joint_count() < 3 || sv[1] <= 1e-12 * sv[0].max(1e-300);
    let var_x: f64 = xs.iter().map(|x| x.norm_squared()).sum();

    let aligned: Vec<[f64; 3]> = if degenerate || var_x <= 0.0 {
        xs.iter().map(|x| x + mu_g).map(|p| [p.x, p.y, p.z]).collect()
    } else {
        let mut m = Matrix3::zeros();
        for (x, y) in xs.iter().zip(&ys) {
            m += y * x.transpose();
        }
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        let r = u * d * v_t;
        let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
        let s = trace / var_x;
        xs.iter().map(|x| r * x * s + mu_g).map(|p| [p.x, p.y, p.z]).collect()
    };
    Ok((Pose3D::new(aligned), degenerate))
}

/// MPJPE after optimal similarity alignment of `pred` onto `gt`.
pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<Aligned> {
    let (aligned, degenerate) = procrustes_align(pred, gt)?;
    let e: f64 = aligned.coords.iter().zip(&gt.coords).map(|(a, b)| dist3(a, b)).sum();
    Ok(Aligned {
        error: e / gt.joint_count() as f64,
        degenerate,
    })
}

/// Number of thresholds in the AUC grid, uniform on `[0, pck_threshold]`.
pub const AUC_STEPS: usize = 31;

fn pck_of(errors: &[f64], threshold: f64) -> f64 {
    100.0 * errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64
}

/// PCK (percentage of joints with error strictly below the threshold) and
/// AUC (mean PCK over [`AUC_STEPS`] thresholds from 0 to the threshold).
pub fn pck_auc_from_errors(errors: &[f64], pck_threshold: f64) -> Result<(f64, f64)> {
    if !(pck_threshold > 0.0) {
        return Err(AlftError::Contract("pck threshold must be positive".into()));
    }
    if errors.is_empty() {
        return Err(AlftError::Contract("no joints to score".into()));
    }
    let pck = pck_of(errors, pck_threshold);
    let auc = (0..AUC_STEPS)
        .map(|i| pck_of(errors, pck_threshold * i as f64 / (AUC_STEPS - 1) as f64))
        .sum::<f64>()
        / AUC_STEPS as f64;
    Ok((pck, auc))
}

pub fn pck_auc(pred: &Pose3D, gt: &Pose3D, pck_threshold: f64) -> Result<(f64, f64)> {
    pck_auc_from_errors(&per_joint_errors(pred, gt)?, pck_threshold)
}

/// How per-joint 2D errors are reduced before the challenging threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorReduction {
    #[default]
    Mean,
    Max,
}

/// Whether a sample's input 2D pose deviates from the ground truth by more
/// than `threshold` pixels.
pub fn select_challenging(pred2d: &Pose2D, gt2d: &Pose2D, threshold: f64, reduction: ErrorReduction) -> Result<bool> {
    same_joints(pred2d.joint_count(), gt2d.joint_count())?;
    let errs = pred2d
        .coords
        .iter()
        .zip(&gt2d.coords)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
    let e = match reduction {
        ErrorReduction::Mean => errs.sum::<f64>() / pred2d.joint_count() as f64,
        ErrorReduction::Max => errs.fold(0.0, f64::max),
    };
    Ok(e > threshold)
}

/// Euclidean distance between the mean positions of two point sets.
pub fn centroid_distance(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(AlftError::Contract("centroid of an empty set".into()));
    }
    let centroid = |s: &[[f64; 3]]| {
        let mut c = [0.0; 3];
        for p in s {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        c.map(|v| v / s.len() as f64)
    };
    Ok(dist3(&centroid(a), &centroid(b)))
}

/// Aggregated 3D metrics over a set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pck: f64,
    pub auc: f64,
    pub per_joint_error: Vec<f64>,
    pub sample_count: usize,
    pub degenerate_alignments: usize,
}

impl MetricReport {
    /// Deterministic sequential reduction over `(prediction, ground truth)`
    /// pairs, root-centering both poses first. Returns `None` for an empty set.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a Pose3D, &'a Pose3D)>, pck_threshold: f64) -> Result<Option<MetricReport>> {
        let mut n = 0usize;
        let mut joint_sum: Vec<f64> = Vec::new();
        let (mut pa, mut pck, mut auc) = (0.0, 0.0, 0.0);
        let mut degenerate = 0;
        for (pred, gt) in pairs {
            let (pred, gt) = (&pred.root_centered(), &gt.root_centered());
            let e = per_joint_errors(pred, gt)?;
            if joint_sum.is_empty() {
                joint_sum = vec![0.0; e.len()];
            } else if joint_sum.len() != e.len() {
                return Err(AlftError::Contract("samples disagree on joint count".into()));
            }
            for (s, v) in joint_sum.iter_mut().zip(&e) {
                *s += v;
            }
            let a = pa_mpjpe(pred, gt)?;
            pa += a.error;
            degenerate += a.degenerate as usize;
            let (p, u) = pck_auc_from_errors(&e, pck_threshold)?;
            pck += p;
            auc += u;
            n += 1;
        }
        if n == 0 {
            return Ok(None);
        }
        let nf = n as f64;
        let per_joint_error: Vec<f64> = joint_sum.iter().map(|s| s / nf).collect();
        Ok(Some(MetricReport {
            mpjpe: per_joint_error.iter().sum::<f64>() / per_joint_error.len() as f64,
            pa_mpjpe: pa / nf,
            pck: pck / nf,
            auc: auc / nf,
            per_joint_error,
            sample_count: n,
            degenerate_alignments: degenerate,
        }))
    }

    pub const CSV_HEADER: &'static str = "mpjpe,pa_mpjpe,pck,auc,n";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            csv_float(self.mpjpe),
            csv_float(self.pa_mpjpe),
            csv_float(self.pck),
            csv_float(self.auc),
            self.sample_count
        )
    }
}

/// Platform-independent decimal rendering with 17 significant digits.
pub fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// One record of the pose JSON file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub gt3d: Vec<[f64; 3]>,
    pub gt2d: Vec<[f64; 2]>,
    pub pred2d: Vec<[f64; 2]>,
}
