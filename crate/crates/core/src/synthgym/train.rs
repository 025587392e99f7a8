use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, CHANNELS};
use crate::diffcore::{AdamW, Container, Graph, OptimizerConfig};
use crate::error::{AlftError, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::skeleton::{csv_float, MetricReport, Pose3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Training samples whose loss is tracked after every epoch.
    pub probe_count: usize,
    pub pck_threshold: f64,
    /// Abort when the probe loss exceeds this multiple of its initial value ...
    pub divergence_factor: f64,
    /// ... for this many consecutive epochs.
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            seed: 0,
            probe_count: 64,
            pck_threshold: 0.15,
            divergence_factor: 10.0,
            divergence_patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean pose error over the epoch's batches.
    pub train_mpjpe: f64,
    pub val_mpjpe: Option<f64>,
    /// Mean total loss on the probe samples after the epoch.
    pub probe_loss: f64,
}

pub const CURVE_HEADER: &str = "epoch,learning_rate,train_loss,train_mpjpe,val_mpjpe,probe_loss";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            csv_float(self.learning_rate),
            csv_float(self.train_loss),
            csv_float(self.train_mpjpe),
            self.val_mpjpe.map(csv_float).unwrap_or_default(),
            csv_float(self.probe_loss)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub variant: Variant,
    /// Probe loss at initialization.
    pub initial_loss: f64,
    pub curve: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        let mut s = format!("{CURVE_HEADER}\n");
        for r in &self.curve {
            let _ = writeln!(s, "{}", r.csv_row());
        }
        s
    }
}

/// Seed for the per-sample token sampler.
fn sampling_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64
}

/// Total loss, pose loss and backpropagated gradients for one sample.
fn sample_step(model: &mut Model, sample: &Sample, index: usize, seed: u64, scale: f64, learn: bool) -> Result<(f64, f64)> {
    let size = model_image_size(sample);
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &sample.pyramid, &sample.normalized_input(size), sampling_seed(seed, index))?;
    let losses = model.losses(&mut g, &fwd, &sample.gt3d, &sample.normalized_gt2d(size))?;
    let total = g.scalar(losses.total);
    if !total.is_finite() {
        return Err(AlftError::NonFinite("training loss".into()));
    }
    if learn {
        let grads = g.backward_seeded(losses.total, vec![scale]);
        g.accumulate_into(&grads, &mut model.store);
    }
    Ok((total, g.scalar(losses.pose)))
}

fn model_image_size(sample: &Sample) -> [usize; 2] {
    let l = &sample.pyramid.levels[0];
    [l.height * 2, l.width * 2]
}

fn probe_loss(model: &mut Model, data: &Dataset, count: usize, seed: u64) -> Result<f64> {
    let n = count.min(data.samples.len()).max(1);
    let mut total = 0.0;
    for (i, s) in data.samples.iter().take(n).enumerate() {
        total += sample_step(model, s, i, seed, 0.0, false)?.0;
    }
    Ok(total / n as f64)
}

/// Train one variant with AdamW over shuffled mini-batches.
pub fn train(base: &ModelConfig, variant: Variant, data: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.optimizer.validate()?;
    if data.samples.is_empty() {
        return Err(AlftError::Config("training set is empty".into()));
    }
    let channels: Vec<usize> = data.samples[0].pyramid.levels.iter().map(|l| l.channels).collect();
    let mut model = Model::new(variant.apply(base), &channels, cfg.seed)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa11f_7000);
    let data_seed = data.config.seed;
    let initial_loss = probe_loss(&mut model, data, cfg.probe_count, data_seed)?;
    let mut curve = Vec::with_capacity(cfg.optimizer.epochs);
    let mut strikes = 0;
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    for epoch in 1..=cfg.optimizer.epochs {
        order.shuffle(&mut rng);
        let lr = opt.learning_rate();
        let (mut loss_sum, mut pose_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.optimizer.batch_size.max(1)) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (l, p) = sample_step(&mut model, &data.samples[i], i, data_seed, scale, true)?;
                loss_sum += l;
                pose_sum += p;
            }
            opt.step(&mut model.store)?;
        }
        opt.end_epoch();
        model.store.check_health()?;
        let n = data.samples.len() as f64;
        let probe = probe_loss(&mut model, data, cfg.probe_count, data_seed)?;
        let val_mpjpe = match val {
            Some(v) => evaluate(&model, v, cfg.pck_threshold)?.full.map(|r| r.mpjpe),
            None => None,
        };
        curve.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / n,
            train_mpjpe: pose_sum / n,
            val_mpjpe,
            probe_loss: probe,
        });
        if probe > cfg.divergence_factor * initial_loss {
            strikes += 1;
            if strikes >= cfg.divergence_patience {
                return Err(AlftError::Diverged(format!(
                    "probe loss {probe:.6e} exceeded {}x the initial {initial_loss:.6e} for {strikes} epochs (epoch {epoch}, lr {lr:.3e})",
                    cfg.divergence_factor
                )));
            }
        } else {
            strikes = 0;
        }
    }
    Ok(TrainOutcome {
        model,
        variant,
        initial_loss,
        curve,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Full,
    Challenging,
    Non,
    HighOcclusion,
}

impl std::str::FromStr for Split {
    type Err = AlftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Split::Full),
            "challenging" => Ok(Split::Challenging),
            "non" => Ok(Split::Non),
            "high_occlusion" => Ok(Split::HighOcclusion),
            other => Err(AlftError::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Metrics per split; an empty split is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub full: Option<MetricReport>,
    pub challenging: Option<MetricReport>,
    pub non_challenging: Option<MetricReport>,
    pub high_occlusion: Option<MetricReport>,
    pub mean_tokens: f64,
}

impl Evaluation {
    pub fn split(&self, s: Split) -> Option<&MetricReport> {
        match s {
            Split::Full => self.full.as_ref(),
            Split::Challenging => self.challenging.as_ref(),
            Split::Non => self.non_challenging.as_ref(),
            Split::HighOcclusion => self.high_occlusion.as_ref(),
        }
    }
}

/// Metrics of any per-sample predictor on every split.
pub fn evaluate_predictor(
    data: &Dataset,
    pck_threshold: f64,
    mut predict: impl FnMut(usize, &Sample) -> Result<Pose3D>,
) -> Result<Evaluation> {
    let preds = data
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| predict(i, s))
        .collect::<Result<Vec<_>>>()?;
    let pairs = |keep: &dyn Fn(&Sample) -> bool| {
        MetricReport::from_pairs(
            preds.iter().zip(&data.samples).filter(|(_, s)| keep(s)).map(|(p, s)| (p, &s.gt3d)),
            pck_threshold,
        )
    };
    Ok(Evaluation {
        full: pairs(&|_| true)?,
        challenging: pairs(&|s| s.challenging)?,
        non_challenging: pairs(&|s| !s.challenging)?,
        high_occlusion: pairs(&|s| s.high_occlusion())?,
        mean_tokens: 0.0,
    })
}

pub fn evaluate(model: &Model, data: &Dataset, pck_threshold: f64) -> Result<Evaluation> {
    let mut tokens = 0usize;
    let seed = data.config.seed;
    let mut ev = evaluate_predictor(data, pck_threshold, |i, s| {
        let size = model_image_size(s);
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &s.pyramid, &s.normalized_input(size), sampling_seed(seed, i))?;
        tokens += fwd.tokens;
        Ok(crate::model::pose_of(&g, fwd.pose))
    })?;
    ev.mean_tokens = tokens as f64 / data.samples.len().max(1) as f64;
    Ok(ev)
}

pub fn save_checkpoint(model: &Model, variant: Variant, path: &Path) -> Result<()> {
    let channels: Vec<usize> = model.sampler.projections.iter().map(|p| p.inputs).collect();
    let mut c = Container::new(serde_json::json!({
        "model": model.cfg,
        "variant": variant,
        "channels": channels,
    }));
    for (name, t) in model.store.named_tensors() {
        c.push(name, t.clone());
    }
    c.write_to(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Variant)> {
    let c = Container::read_from(path)?;
    let cfg: ModelConfig = serde_json::from_value(c.meta["model"].clone())?;
    let variant: Variant = serde_json::from_value(c.meta["variant"].clone())?;
    let channels: Vec<usize> = serde_json::from_value(c.meta["channels"].clone()).unwrap_or_else(|_| vec![CHANNELS; 3]);
    let mut model = Model::new(cfg, &channels, 0)?;
    model.store.load_named(&c.tensors)?;
    Ok((model, variant))
}
