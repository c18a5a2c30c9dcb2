//! Training and evaluation loops: seeded shuffles, per-epoch validation,
//! best-checkpoint tracking, JSON-lines logging, and a finite-loss guard
//! that aborts while keeping the last good checkpoint on disk.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::loss::mixed_loss;
use crate::metrics::{evaluate_predictions, MetricsReport};
use crate::net::{Model, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 50, batch: 1, lr: 5e-4, weight_decay: 0.01, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch != 1 {
            return Err(Error::config("only batch size 1 is supported"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub miou: f64,
    pub f1: f64,
    pub wall_ms: u64,
}

impl EpochLog {
    /// Copy with the wall-clock field cleared, for determinism comparisons.
    pub fn without_wall_time(&self) -> EpochLog {
        EpochLog { wall_ms: 0, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best_val_miou: f64,
    pub best_epoch: Option<usize>,
}

pub const BEST_CHECKPOINT: &str = "best.mxseg";
pub const LAST_CHECKPOINT: &str = "last.mxseg";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Sigmoid probabilities `[1,H,W]` for one image; the forward graph is
/// discarded afterwards.
pub fn predict<T: Scalar>(model: &Model<'_, T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = model.tape();
    let mark = tape.len();
    let out = model.forward(image, None).map(|(logits, _)| logits.sigmoid().value());
    tape.truncate(mark);
    out
}

/// Train with per-epoch validation. Writes `last.mxseg` after every epoch
/// (and once at start), `best.mxseg` whenever validation mean IoU improves,
/// and one JSON log line per epoch. A non-finite loss aborts with a numeric
/// error; checkpoints from the last completed epoch stay on disk.
pub fn train<T: Scalar>(
    model: &Model<'_, T>,
    train_set: &[SegSample<T>],
    val_set: &[SegSample<T>],
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let tape = model.tape();
    let named = model.named_params();
    let params: Vec<_> = named.iter().map(|(_, v)| *v).collect();
    let mut opt = AdamW::new(
        &params,
        AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
    );
    let mark = tape.len();

    model.save(&out_dir.join(LAST_CHECKPOINT))?;
    model.save(&out_dir.join(BEST_CHECKPOINT))?;
    let mut log_lines: Vec<String> = Vec::new();
    let mut logs = Vec::new();
    let mut best_val_miou = f64::NEG_INFINITY;
    let mut best_epoch = None;

    let shuffle_rng = Rng::new(cfg.seed);
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle_rng.derive(&format!("epoch{epoch}")).shuffle(&mut order);

        let mut loss_sum = 0.0f64;
        for &idx in &order {
            let sample = &train_set[idx];
            let (logits, _aux) = model.forward(&sample.image, None)?;
            let loss = mixed_loss(logits, &sample.mask);
            let loss_val = loss.value().item().to_f64();
            if !loss_val.is_finite() {
                tape.truncate(mark);
                return Err(Error::Numeric {
                    step: global_step,
                    what: format!("non-finite loss in epoch {epoch}"),
                });
            }
            loss_sum += loss_val;
            let grads = tape.backward(loss);
            opt.step(tape, &params, &grads);
            tape.truncate(mark);
            global_step += 1;
        }

        let mut ids = Vec::with_capacity(val_set.len());
        let mut preds = Vec::with_capacity(val_set.len());
        let mut masks = Vec::with_capacity(val_set.len());
        for s in val_set {
            ids.push(s.id.clone());
            preds.push(predict(model, &s.image)?);
            masks.push(s.mask.clone());
        }
        let (val_miou, val_f1) = if val_set.is_empty() {
            (0.0, 0.0)
        } else {
            let report = evaluate_predictions(&ids, &preds, &masks);
            (report.miou, report.f1)
        };

        let entry = EpochLog {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            miou: val_miou,
            f1: val_f1,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log_lines.push(serde_json::to_string(&entry).expect("log serializes"));
        std::fs::write(out_dir.join(LOG_FILE), log_lines.join("\n") + "\n")
            .map_err(|e| Error::io(out_dir.join(LOG_FILE).display().to_string(), e))?;
        logs.push(entry);

        model.save(&out_dir.join(LAST_CHECKPOINT))?;
        if val_miou > best_val_miou {
            best_val_miou = val_miou;
            best_epoch = Some(epoch);
            model.save(&out_dir.join(BEST_CHECKPOINT))?;
        }
    }

    if cfg.epochs == 0 {
        std::fs::write(out_dir.join(LOG_FILE), "")
            .map_err(|e| Error::io(out_dir.join(LOG_FILE).display().to_string(), e))?;
    }
    Ok(TrainOutcome { logs, best_val_miou, best_epoch })
}

pub fn read_logs(path: &Path) -> Result<Vec<EpochLog>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::config(format!("log line: {e}"))))
        .collect()
}

pub struct EvalArtifacts<T: Scalar> {
    pub report: MetricsReport,
    /// `(id, probability map)` per test image
    pub predictions: Vec<(String, Tensor<T>)>,
}

/// Run a model over a sample list and compute the full report.
pub fn evaluate_model<T: Scalar>(
    model: &Model<'_, T>,
    samples: &[SegSample<T>],
) -> Result<EvalArtifacts<T>> {
    let mut ids = Vec::with_capacity(samples.len());
    let mut preds = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        ids.push(s.id.clone());
        preds.push(predict(model, &s.image)?);
        masks.push(s.mask.clone());
    }
    let report = evaluate_predictions(&ids, &preds, &masks);
    let predictions = ids.into_iter().zip(preds).collect();
    Ok(EvalArtifacts { report, predictions })
}

/// Score prediction images already on disk against dataset masks; used to
/// confirm saved artifacts reproduce the reported numbers.
pub fn evaluate_saved<T: Scalar>(
    pred_dir: &Path,
    data_dir: &Path,
    ids: &[String],
) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(ids.len());
    let mut masks = Vec::with_capacity(ids.len());
    for id in ids {
        preds.push(crate::data::read_png::<T>(&pred_dir.join(format!("{id}.png")))?);
        let sample = crate::data::load_sample::<T>(data_dir, id)?;
        masks.push(sample.mask);
    }
    Ok(evaluate_predictions(ids, &preds, &masks))
}

/// The ablation grid exercised by the harness: global-channel ratio, local
/// pooling flavor, histogram bin count, and edge gating on/off.
pub fn ablation_matrix() -> Vec<(String, ModelConfig)> {
    let base = ModelConfig::desk_default();
    let mut out = Vec::new();
    for gamma in [0.0, 0.5, 1.0] {
        let mut cfg = base.clone();
        cfg.transmixer.gamma = gamma;
        out.push((format!("gamma_{gamma}"), cfg));
    }
    for pool in [crate::transmixer::PoolKind::Max, crate::transmixer::PoolKind::Avg] {
        let mut cfg = base.clone();
        cfg.transmixer.local_pool = pool;
        out.push((format!("pool_{pool:?}").to_lowercase(), cfg));
    }
    for nbins in [9usize, 36, 90, 180, 360] {
        let mut cfg = base.clone();
        cfg.degconv.nbins = nbins;
        out.push((format!("nbins_{nbins}"), cfg));
    }
    for enabled in [true, false] {
        let mut cfg = base.clone();
        cfg.degconv.enabled = enabled;
        out.push((format!("degconv_{enabled}"), cfg));
    }
    out
}
