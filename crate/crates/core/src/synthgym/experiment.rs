use serde::{Deserialize, Serialize};

use super::train::{evaluate, train, Evaluation, TrainConfig, TrainOutcome};
use super::{generate_dataset, Dataset, SynthConfig};
use crate::error::{AlftError, Result};
use crate::model::{ModelConfig, Variant};
use crate::skeleton::{csv_float, MetricReport, SkeletonTopology};

/// Everything needed to reproduce a train/test experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Training-set generator; the test set uses `seed + 1` and `test_count`.
    pub synth: SynthConfig,
    pub test_count: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            test_count: 500,
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn test_synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.synth.seed.wrapping_add(1),
            sample_count: self.test_count,
            ..self.synth.clone()
        }
    }

    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let topo = SkeletonTopology::h36m();
        Ok((generate_dataset(&self.synth, &topo)?, generate_dataset(&self.test_synth(), &topo)?))
    }
}

/// Ablation suites and their arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Anchors,
    Depth,
    Sampling,
    Bins,
}

impl std::str::FromStr for Suite {
    type Err = AlftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anchors" => Ok(Suite::Anchors),
            "depth" => Ok(Suite::Depth),
            "sampling" => Ok(Suite::Sampling),
            "bins" => Ok(Suite::Bins),
            other => Err(AlftError::Config(format!("unknown suite `{other}`"))),
        }
    }
}

/// One configuration trained and evaluated inside a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub variant: Variant,
    pub model: ModelConfig,
}

impl Suite {
    pub fn arms(self, base: &ModelConfig) -> Vec<Arm> {
        let arm = |v: Variant| Arm {
            name: v.name().to_string(),
            variant: v,
            model: base.clone(),
        };
        match self {
            Suite::Anchors => [Variant::Full, Variant::LocalOnly, Variant::GlobalOnly, Variant::NoAnchor]
                .map(arm)
                .to_vec(),
            Suite::Depth => [
                Variant::JointDepth,
                Variant::SingleDepth,
                Variant::NoDepth,
                Variant::DepthRegression,
            ]
            .map(arm)
            .to_vec(),
            Suite::Sampling => [Variant::PosePriorSampling, Variant::FullMapSampling, Variant::RandomSampling]
                .map(arm)
                .to_vec(),
            Suite::Bins => {
                let mut arms: Vec<Arm> = [16, 64, 128]
                    .into_iter()
                    .map(|bins| {
                        let mut model = base.clone();
                        model.binning.bins = bins;
                        Arm {
                            name: format!("bins{bins}"),
                            variant: Variant::Full,
                            model,
                        }
                    })
                    .collect();
                arms.push(arm(Variant::DepthRegression));
                arms
            }
        }
    }
}

/// A trained arm with its test evaluation.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub name: String,
    pub outcome: TrainOutcome,
    pub evaluation: Evaluation,
}

pub fn run_arm(arm: &Arm, train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> Result<ArmResult> {
    let outcome = train(&arm.model, arm.variant, train_set, None, cfg)?;
    let evaluation = evaluate(&outcome.model, test_set, cfg.pck_threshold)?;
    Ok(ArmResult {
        name: arm.name.clone(),
        outcome,
        evaluation,
    })
}

pub const ABLATION_HEADER: &str = "arm,variant,split,mpjpe,pa_mpjpe,pck,auc,n,mean_tokens";

/// One CSV row per arm and non-empty split.
pub fn ablation_rows(results: &[ArmResult]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in results {
        let e = &r.evaluation;
        for (split, rep) in [
            ("full", &e.full),
            ("challenging", &e.challenging),
            ("non", &e.non_challenging),
            ("high_occlusion", &e.high_occlusion),
        ] {
            if let Some(rep) = rep {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.name,
                    r.outcome.variant,
                    split,
                    rep.csv_row(),
                    csv_float(e.mean_tokens)
                ));
            }
        }
    }
    out
}

pub const SWEEP_HEADER: &str = "sigma,mpjpe,pa_mpjpe,pck,auc";

/// Full-split metrics of one model on the test scenes re-noised at every sigma.
pub fn noise_sweep(
    model: &crate::model::Model,
    test_set: &Dataset,
    sigmas: &[f64],
    pck_threshold: f64,
) -> Result<Vec<(f64, MetricReport)>> {
    sigmas
        .iter()
        .map(|&s| {
            let noisy = test_set.with_noise(s, test_set.config.seed);
            let ev = evaluate(model, &noisy, pck_threshold)?;
            let rep = ev.full.ok_or_else(|| AlftError::Config("empty test set".into()))?;
            Ok((s, rep))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(f64, MetricReport)]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for (s, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            csv_float(*s),
            csv_float(r.mpjpe),
            csv_float(r.pa_mpjpe),
            csv_float(r.pck),
            csv_float(r.auc)
        ));
    }
    out
}
