//! Training loop: masked multi-task objective, Adam, learning-rate schedule,
//! validation scoring, best-model selection and early stopping.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Example};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::losses::{continuous_loss, cross_entropy, multitask_loss, MtlWeights, NUM_ATTRIBUTES};
use crate::metrics::{evaluate, EvalReport};
use crate::models::{Model, ModelConfig, ModelDims, ModelVariant};
use crate::numerics::{Matrix, Rng, Stream};
use crate::optim::{lr_at, non_improving_epochs, AdamConfig, AdamState, LrSchedule, IMPROVEMENT_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub dims: ModelDims,
    pub alpha: f64,
    pub beta: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub hier_stop_gradient: bool,
    /// Global gradient-norm clip, off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: ModelVariant::Multitask,
            dims: ModelDims::default(),
            alpha: 1.0,
            beta: 1.0,
            dropout: 0.2,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            schedule: LrSchedule::default(),
            seed: 0,
            hier_stop_gradient: false,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            dims: self.dims.clone(),
            dropout: self.dropout,
            hier_stop_gradient: self.hier_stop_gradient,
        }
    }

    pub fn weights(&self) -> Result<MtlWeights> {
        MtlWeights::new(self.alpha, self.beta)
    }

    /// Every problem with the configuration, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                out.push(e.to_string());
            }
        };
        check(self.dims.validate());
        check(self.weights().map(|_| ()));
        check(self.schedule.validate());
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            out.push("max_epochs must be >= 1".into());
        }
        if self.patience == 0 {
            out.push("patience must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                out.push(format!("grad_clip must be positive, got {c}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

/// Mean per-batch training loss terms for one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub total: f64,
    pub val: f64,
    pub aro: f64,
    pub dom: f64,
    pub disc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub losses: EpochLosses,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub valid: EvalReport,
    pub valid_score: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub stopped_early: bool,
    pub steps: u64,
}

pub const CSV_HEADER: &str = "epoch,loss_total,loss_val,loss_aro,loss_dom,loss_disc,lr,\
valid_ccc_v,valid_ccc_a,valid_ccc_d,valid_ccc_mean,valid_accuracy,valid_macro_recall,valid_macro_f1,valid_score,wall_secs";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    /// One line per epoch under [`CSV_HEADER`]; absent metrics are empty cells.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let v = &r.valid;
            let l = &r.losses;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}",
                r.epoch,
                l.total,
                l.val,
                l.aro,
                l.dom,
                l.disc,
                r.lr,
                opt(v.ccc_v),
                opt(v.ccc_a),
                opt(v.ccc_d),
                opt(v.ccc_mean),
                opt(v.accuracy),
                opt(v.macro_recall),
                opt(v.macro_f1),
                r.valid_score,
                r.wall_secs
            );
        }
        s
    }

    pub fn best(&self) -> Option<&EpochRow> {
        self.rows.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.valid_score).collect()
    }
}

/// True once the last `patience` epochs all failed to improve on the best
/// score by more than the improvement threshold.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut best = f64::NEG_INFINITY;
    let mut since = 0;
    for &s in history {
        if s > best + IMPROVEMENT_THRESHOLD {
            best = s;
            since = 0;
        } else {
            since += 1;
        }
    }
    patience > 0 && since >= patience
}

fn check_data(cfg: &TrainConfig, train: &[Example], valid: &[Example]) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Precondition("validation set is empty".into()));
    }
    let d = cfg.dims.d_in;
    if let Some(ex) = train.iter().chain(valid).find(|e| e.feature_dim() != d) {
        return Err(Error::Precondition(format!(
            "utterance `{}` has feature dim {}, model expects d_in = {d}",
            ex.id,
            ex.feature_dim()
        )));
    }
    let v = cfg.variant;
    let has = |set: &[Example], cont: bool| {
        set.iter().any(|e| if cont { e.label.vad.is_some() } else { e.label.disc.is_some() })
    };
    if v.has_cont() && !has(train, true) {
        return Err(Error::Precondition(format!("{v} needs continuous labels but the training set has none")));
    }
    if v.has_disc() && !has(train, false) {
        return Err(Error::Precondition(format!("{v} needs discrete labels but the training set has none")));
    }
    let valid_cont = v.has_cont() && valid.iter().filter(|e| e.label.vad.is_some()).count() >= 2;
    let valid_disc = v.has_disc() && has(valid, false);
    if !valid_cont && !valid_disc {
        return Err(Error::Precondition(format!(
            "validation set has no labels {v} can be scored on"
        )));
    }
    Ok(())
}

/// Loss terms and gradients of one batch, before weighting.
struct StepLoss {
    cont: [f64; NUM_ATTRIBUTES],
    disc: f64,
    total: f64,
}

/// Forward, masked loss and backward for one batch; leaves gradients in the
/// model. Terms without unmasked examples contribute 0.
fn batch_step(
    model: &mut Model<f32>,
    batch: &crate::data::Batch<f32>,
    w: MtlWeights,
    rng: &mut Rng,
) -> Result<StepLoss> {
    model.zero_grad();
    let out = model.forward(batch, Mode::Train, rng)?;
    let mut cont = [0.0f32; NUM_ATTRIBUTES];
    let mut disc = 0.0f32;
    let mut grad_c: Option<Matrix<f32>> = None;
    let mut grad_l: Option<Matrix<f32>> = None;
    if let Some(c_hat) = &out.c_hat {
        let l = continuous_loss(c_hat, &batch.vad, &batch.vad_mask)?;
        if !l.degenerate {
            cont = l.terms;
            grad_c = Some(l.grad.scale(w.alpha as f32));
        }
    }
    if let Some(logits) = &out.logits {
        let l = cross_entropy(logits, &batch.disc, &batch.disc_mask)?;
        if !l.degenerate {
            disc = l.loss;
            grad_l = Some(l.grad.scale(w.beta as f32));
        }
    }
    let total = multitask_loss(cont, disc, w);
    model.backward(grad_l.as_ref(), grad_c.as_ref())?;
    Ok(StepLoss {
        cont: cont.map(|x| x as f64),
        disc: disc as f64,
        total: total as f64,
    })
}

/// Trains from scratch and returns the model with the best validation score
/// together with the per-epoch log. Deterministic given `cfg.seed`.
pub fn train(cfg: &TrainConfig, train: &[Example], valid: &[Example]) -> Result<(Model<f32>, TrainLog)> {
    cfg.validate()?;
    check_data(cfg, train, valid)?;
    let w = cfg.weights()?;
    let mut init_rng = Rng::substream(cfg.seed, Stream::Init);
    let mut shuffle_rng = Rng::substream(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = Rng::substream(cfg.seed, Stream::Dropout);
    let mut model = Model::<f32>::build(cfg.model_config(), &mut init_rng)?;
    let mut adam = AdamState::new(AdamConfig {
        clip: cfg.grad_clip,
        ..Default::default()
    });
    log::info!(
        "training {} ({} params) on {} utterances, validating on {}",
        cfg.variant,
        model.num_params(),
        train.len(),
        valid.len()
    );

    let mut log = TrainLog {
        best_score: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best_model = model.clone();
    let mut history: Vec<f64> = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut sums = EpochLosses::default();
        let mut n_batches = 0usize;
        let mut lr = 0.0;
        for (b, batch) in make_batches(train, cfg.batch_size, &mut shuffle_rng, true).enumerate() {
            let batch = batch?;
            let s = batch_step(&mut model, &batch, w, &mut dropout_rng)?;
            if !s.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    terms: format!(
                        "val={} aro={} dom={} disc={} total={}",
                        s.cont[0], s.cont[1], s.cont[2], s.disc, s.total
                    ),
                });
            }
            lr = lr_at(&cfg.schedule, adam.step, &history);
            adam.step(&mut model.params_mut(), lr)?;
            sums.total += s.total;
            sums.val += s.cont[0];
            sums.aro += s.cont[1];
            sums.dom += s.cont[2];
            sums.disc += s.disc;
            n_batches += 1;
        }
        let n = n_batches as f64;
        let losses = EpochLosses {
            total: sums.total / n,
            val: sums.val / n,
            aro: sums.aro / n,
            dom: sums.dom / n,
            disc: sums.disc / n,
        };

        let report = evaluate(&mut model, valid, cfg.batch_size)?;
        let score = report.validation_score().ok_or_else(|| {
            Error::Precondition("validation report has neither accuracy nor CCC".into())
        })?;
        if !score.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: n_batches,
                terms: format!("validation score {score}"),
            });
        }
        if score > log.best_score + IMPROVEMENT_THRESHOLD {
            log.best_score = score;
            log.best_epoch = epoch;
            best_model = model.clone();
        }
        history.push(score);
        log::info!(
            "epoch {epoch}: loss {:.4} valid score {score:.4} lr {lr:.3e} (plateau count {})",
            losses.total,
            non_improving_epochs(&history, IMPROVEMENT_THRESHOLD)
        );
        log.rows.push(EpochRow {
            epoch,
            losses,
            lr,
            valid: report,
            valid_score: score,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if early_stop(&history, cfg.patience) {
            log.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    log.steps = adam.step;
    best_model.zero_grad();
    Ok((best_model, log))
}
