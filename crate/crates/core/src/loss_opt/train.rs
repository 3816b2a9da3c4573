use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{cosine_lr, loss_and_gradients, LossConfig, ObjectiveInputs};
use crate::data::{restrict_labels_to_seen, ClassCatalog, LabelMatrix, ZslSplit};
use crate::encoders::EncoderBackend;
use crate::error::{Error, Result, Stage};
use crate::exec::ExecMode;
use crate::model::ProjectedImages;
use crate::prompts::{init_prompts, PromptBank, PromptConfig};
use crate::rng::substream;
use crate::scoring::ClassifierConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Cosine decay evaluated at every optimizer step.
    #[default]
    PerStep,
    /// Cosine decay held constant within an epoch.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    pub schedule: Schedule,
    pub exec: ExecMode,
    /// Wall-clock seconds in the history; off for byte-reproducible runs.
    pub record_wall_time: bool,
    pub loss: LossConfig,
    pub classifier: ClassifierConfig,
    pub prompt: PromptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.002,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            momentum: 0.0,
            schedule: Schedule::PerStep,
            exec: ExecMode::Deterministic,
            record_wall_time: true,
            loss: LossConfig::default(),
            classifier: ClassifierConfig::default(),
            prompt: PromptConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("lr0 must be non-negative, got {}", self.lr0)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        self.loss.validate()?;
        self.classifier.validate()?;
        self.prompt.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// CSV with columns `epoch,mean_loss,lr,seconds`, optionally preceded
    /// by a `# config_digest=...` comment line.
    pub fn write_csv<W: Write>(&self, mut out: W, config_digest: Option<&str>) -> Result<()> {
        if let Some(d) = config_digest {
            writeln!(out, "# config_digest={d}").map_err(|e| Error::io("<history>", e))?;
        }
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["epoch", "mean_loss", "lr", "seconds"])?;
        for r in &self.epochs {
            wtr.write_record([
                r.epoch.to_string(),
                format!("{:e}", r.mean_loss),
                format!("{:e}", r.lr),
                format!("{:.6}", r.seconds),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("<history>", e))?;
        Ok(())
    }
}

/// Diagnostics for a run stopped by a non-finite value.
#[derive(Debug, Clone, Serialize)]
pub struct TrainAbort {
    pub epoch: usize,
    pub step: usize,
    pub batch_index: usize,
    pub stage: Option<Stage>,
    pub reason: String,
    pub parameter_digest: String,
    #[serde(skip)]
    pub last_good: PromptBank,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training aborted at epoch {}, step {} (batch {}): {}",
            self.epoch, self.step, self.batch_index, self.reason
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bank: PromptBank,
    pub history: TrainHistory,
}

/// Hex SHA-256 of every prompt value's bit pattern.
pub fn bank_digest(bank: &PromptBank) -> String {
    let mut h = Sha256::new();
    h.update([bank.mode() as u8]);
    for n in [bank.pairs().len(), bank.n_ctx_pos(), bank.n_ctx_neg(), bank.dim()] {
        h.update((n as u64).to_le_bytes());
    }
    for v in bank.iter_values() {
        h.update(v.to_bits().to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// SGD with cosine annealing over the prompt contexts only.
///
/// With a split, unseen label columns are zeroed before training.
pub fn train(
    cfg: &TrainConfig,
    catalog: &ClassCatalog,
    encoder: &dyn EncoderBackend,
    images: &ProjectedImages,
    labels: &LabelMatrix,
    split: Option<&ZslSplit>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if !encoder.supports_gradients() {
        return Err(Error::Unsupported(
            "training needs an encoder backend with text gradients".into(),
        ));
    }
    let restricted;
    let labels = match split {
        Some(s) => {
            restricted = restrict_labels_to_seen(labels, s)?;
            &restricted
        }
        None => labels,
    };

    let mut bank = init_prompts(&cfg.prompt, catalog.len(), cfg.seed)?;
    let mut velocity = (cfg.momentum > 0.0).then(|| bank.zeros_like());
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = substream(cfg.seed, 0x5407);
    let n_batches = images.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * n_batches;
    let mut history = TrainHistory::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut epoch_lr = None;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let lr = match cfg.schedule {
                Schedule::PerStep => cosine_lr(step, total_steps, cfg.lr0),
                Schedule::PerEpoch => cosine_lr(epoch, cfg.epochs, cfg.lr0),
            };
            epoch_lr.get_or_insert(lr);
            let inputs = ObjectiveInputs {
                catalog,
                encoder,
                images,
                labels,
                batch,
                classifier: &cfg.classifier,
                loss: &cfg.loss,
                exec: cfg.exec,
            };
            let abort = |stage: Option<Stage>, reason: String, last_good: &PromptBank| {
                Error::Aborted(Box::new(TrainAbort {
                    epoch,
                    step,
                    batch_index: b,
                    stage,
                    reason,
                    parameter_digest: bank_digest(last_good),
                    last_good: last_good.clone(),
                }))
            };
            let (loss, grad) = match loss_and_gradients(&bank, &inputs) {
                Ok(x) => x,
                Err(Error::NonFinite { stage }) => {
                    return Err(abort(Some(stage), format!("non-finite value at stage {stage}"), &bank))
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(abort(Some(Stage::Loss), "non-finite loss".into(), &bank));
            }
            loss_sum += loss;
            if lr != 0.0 {
                let last_good = bank.clone();
                match velocity.as_mut() {
                    Some(v) => {
                        let mut nv = grad.clone();
                        nv.scaled_add(cfg.momentum, v);
                        *v = nv;
                        bank.scaled_add(-lr, v);
                    }
                    None => bank.scaled_add(-lr, &grad),
                }
                if bank.iter_values().any(|x| !x.is_finite()) {
                    return Err(abort(
                        Some(Stage::Gradient),
                        "parameter update produced non-finite prompts".into(),
                        &last_good,
                    ));
                }
            }
            step += 1;
        }
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / n_batches as f64,
            lr: epoch_lr.unwrap_or(0.0),
            seconds: if cfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(TrainOutcome { bank, history })
}
