//! Cross-entropy training: scheduled sampling, Adadelta, elementwise
//! gradient clipping, dropout, and plateau-based learning-rate decay.
//!
//! One ChaCha rng drives everything random in a run. Draw order per epoch:
//! the shuffle first, then per (sample, caption) pair the scheduled-sampling
//! coin flips and dropout masks in decode-step order. Validation never
//! draws, so resuming from a checkpoint replays the identical stream.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::data::{Sample, PAD};
use crate::error::{Error, Result};
use crate::gradcheck::GradMap;
use crate::metrics::evaluate;
use crate::model::{ForwardOpts, Model};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Initial learning rate; decayed by the plateau rule.
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Elementwise gradient clamp range.
    pub clip_min: f64,
    pub clip_max: f64,
    /// Teacher-forcing probability at the first and last epoch; linear in
    /// between.
    pub teacher_forcing_start: f64,
    pub teacher_forcing_end: f64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub shuffle: bool,
    pub seed: u64,
    /// Beam width for in-loop validation decoding (1 = greedy).
    pub val_beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 50,
            lr: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 4,
            clip_min: -10.0,
            clip_max: 10.0,
            teacher_forcing_start: 1.0,
            teacher_forcing_end: 0.75,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            shuffle: true,
            seed: 7,
            val_beam: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau patience must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.plateau_factor) {
            return Err(Error::Config("plateau factor must lie in [0, 1]".into()));
        }
        if self.clip_min > self.clip_max {
            return Err(Error::Config("clip range is inverted".into()));
        }
        for (p, what) in [
            (self.teacher_forcing_start, "teacher_forcing_start"),
            (self.teacher_forcing_end, "teacher_forcing_end"),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{what} must lie in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.adadelta_rho) {
            return Err(Error::Config("adadelta rho must lie in [0, 1)".into()));
        }
        if self.adadelta_eps <= 0.0 {
            return Err(Error::Config("adadelta eps must be positive".into()));
        }
        if self.val_beam == 0 {
            return Err(Error::Config("val beam must be >= 1".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> SamplingSchedule {
        SamplingSchedule {
            start: self.teacher_forcing_start,
            end: self.teacher_forcing_end,
            epochs: self.max_epochs,
        }
    }
}

/// Linear teacher-forcing schedule over epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingSchedule {
    pub start: f64,
    pub end: f64,
    pub epochs: usize,
}

impl SamplingSchedule {
    /// Teacher-forcing probability at a 0-based epoch.
    pub fn prob_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.start;
        }
        let frac = (epoch.min(self.epochs - 1)) as f64 / (self.epochs - 1) as f64;
        self.start + (self.end - self.start) * frac
    }
}

/// Where the decoder input token at one step comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSource {
    GroundTruth,
    ModelArgmax,
}

/// Draws the token source for one step: ground truth with the scheduled
/// probability, otherwise the model's own previous argmax. Probability 1
/// draws nothing from the rng.
pub fn scheduled_sample(
    _step: usize,
    epoch: usize,
    schedule: &SamplingSchedule,
    rng: &mut ChaCha8Rng,
) -> TokenSource {
    let p = schedule.prob_at(epoch);
    if p >= 1.0 || rng.gen::<f64>() < p {
        TokenSource::GroundTruth
    } else {
        TokenSource::ModelArgmax
    }
}

/// Summed negative log-likelihood of the targets under the per-step
/// distributions. PAD targets are excluded from the sum; the caller divides
/// by the non-pad token count when aggregating a batch.
pub fn cross_entropy_loss(dists: &[Var], targets: &[u32]) -> Result<Var> {
    if dists.is_empty() || dists.len() != targets.len() {
        return Err(Error::shape(
            "cross_entropy_loss",
            format!("{} distributions", targets.len()),
            format!("{}", dists.len()),
        ));
    }
    let g = dists[0].graph();
    let stacked = g.concat_rows(dists)?;
    let gathered: Vec<Option<usize>> = targets
        .iter()
        .map(|&t| if t == PAD { None } else { Some(t as usize) })
        .collect();
    stacked.nll(&gathered)
}

/// Number of loss-bearing (non-pad) tokens.
pub fn non_pad_tokens(targets: &[u32]) -> usize {
    targets.iter().filter(|&&t| t != PAD).count()
}

/// Clamps every gradient entry into `[lo, hi]`.
pub fn clip_gradients(grads: &mut GradMap, lo: f64, hi: f64) {
    for g in grads.values_mut() {
        for v in g.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Per-parameter Adadelta accumulators.
#[derive(Debug, Clone, Default)]
pub struct AdadeltaState {
    /// Running average of squared gradients, by parameter name.
    pub accum_grad: GradMap,
    /// Running average of squared (unscaled) updates.
    pub accum_update: GradMap,
}

/// One Adadelta step over every model parameter.
///
/// `E[g^2] <- rho E[g^2] + (1-rho) g^2`; the raw update is
/// `sqrt(E[dx^2]+eps) / sqrt(E[g^2]+eps) * g`, accumulated unscaled into
/// `E[dx^2]` and applied to the parameter scaled by `lr`.
pub fn adadelta_update(
    model: &mut Model,
    grads: &GradMap,
    state: &mut AdadeltaState,
    rho: f64,
    eps: f64,
    lr: f64,
) -> Result<()> {
    for (name, tensor) in model.named_params_mut() {
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::Train(format!("no gradient for parameter `{name}`")))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Train(format!("non-finite gradient in `{name}`")));
        }
        let n = tensor.numel();
        let eg = state.accum_grad.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let eu = state.accum_update.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let values = tensor.values_mut();
        for i in 0..n {
            eg[i] = rho * eg[i] + (1.0 - rho) * g[i] * g[i];
            let delta = (eu[i] + eps).sqrt() / (eg[i] + eps).sqrt() * g[i];
            eu[i] = rho * eu[i] + (1.0 - rho) * delta * delta;
            values[i] -= lr * delta;
        }
    }
    Ok(())
}

/// Plateau learning-rate rule as a pure function of the full score history
/// (higher is better). The rate halves (by `factor`) whenever `patience`
/// consecutive epochs fail to beat the best score seen; the counter resets
/// on each decay.
pub fn lr_plateau(history: &[f64], initial_lr: f64, patience: usize, factor: f64) -> f64 {
    let mut lr = initial_lr;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    for &score in history {
        if score > best {
            best = score;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                lr *= factor;
                stale = 0;
            }
        }
    }
    lr
}

/// One row of the training metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_bleu4: f64,
    pub lr: f64,
    pub teacher_forcing_prob: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,train_loss,val_loss,val_bleu4,lr,teacher_forcing_prob";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.val_loss, self.val_bleu4, self.lr, self.teacher_forcing_prob
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut text = String::from(METRICS_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A training run: the model plus every piece of mutable trainer state
/// needed to stop, checkpoint, and resume bitwise-identically.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: AdadeltaState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Validation BLEU-4 per completed epoch (drives the plateau rule);
    /// empty when no validation split exists.
    pub val_history: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer {
            model,
            config,
            optimizer: AdadeltaState::default(),
            rng,
            epoch: 0,
            val_history: Vec::new(),
            metrics: Vec::new(),
        })
    }

    /// Current learning rate derived from the validation history.
    pub fn current_lr(&self) -> f64 {
        lr_plateau(
            &self.val_history,
            self.config.lr,
            self.config.plateau_patience,
            self.config.plateau_factor,
        )
    }

    /// Runs epochs until `epochs_target` total epochs have completed (or
    /// `max_epochs`, whichever is smaller), invoking `on_epoch` after each.
    pub fn run(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        epochs_target: usize,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Train("empty training set".into()));
        }
        let target = epochs_target.min(self.config.max_epochs);
        while self.epoch < target {
            let row = self.run_epoch(train, val)?;
            on_epoch(&row);
            self.metrics.push(row);
        }
        Ok(())
    }

    fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochMetrics> {
        let epoch = self.epoch;
        let schedule = self.config.schedule();
        let teacher_forcing = schedule.prob_at(epoch);
        let lr = self.current_lr();

        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (si, s) in train.iter().enumerate() {
            for ci in 0..s.captions.len() {
                pairs.push((si, ci));
            }
        }
        if self.config.shuffle {
            pairs.shuffle(&mut self.rng);
        }

        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for (batch_idx, batch) in pairs.chunks(self.config.batch_size).enumerate() {
            let mut grads = GradMap::new();
            let mut batch_tokens = 0usize;
            for &(si, ci) in batch {
                let sample = &train[si];
                let targets = &sample.captions[ci];
                let bound = self.model.bind();
                let pass = bound.forward_teacher_forced(
                    sample,
                    targets,
                    ForwardOpts {
                        dropout: self.model.config.dropout,
                        teacher_forcing,
                        rng: Some(&mut self.rng),
                    },
                )?;
                let loss = cross_entropy_loss(&pass.dists, targets)?;
                let loss_value = loss.item()?;
                if !loss_value.is_finite() {
                    return Err(Error::Train(format!(
                        "non-finite loss at epoch {epoch} batch {batch_idx} (sample {})",
                        sample.id
                    )));
                }
                loss.backward()?;
                for (name, g) in bound.grads() {
                    match grads.get_mut(&name) {
                        Some(acc) => {
                            for (a, b) in acc.iter_mut().zip(&g) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(name, g);
                        }
                    }
                }
                batch_tokens += non_pad_tokens(targets);
                epoch_loss += loss_value;
            }
            let scale = 1.0 / batch_tokens.max(1) as f64;
            for g in grads.values_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            clip_gradients(&mut grads, self.config.clip_min, self.config.clip_max);
            adadelta_update(
                &mut self.model,
                &grads,
                &mut self.optimizer,
                self.config.adadelta_rho,
                self.config.adadelta_eps,
                lr,
            )?;
            epoch_tokens += batch_tokens;
        }

        let train_loss = epoch_loss / epoch_tokens.max(1) as f64;
        let (val_loss, val_bleu) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let loss = validation_loss(&self.model, val)?;
            let report = evaluate(&self.model, val, self.config.val_beam)?;
            (loss, report.bleu4)
        };
        if !val.is_empty() {
            self.val_history.push(val_bleu);
        }
        self.epoch += 1;
        Ok(EpochMetrics {
            epoch: self.epoch,
            train_loss,
            val_loss,
            val_bleu4: val_bleu,
            lr,
            teacher_forcing_prob: teacher_forcing,
        })
    }
}

/// Learning curves of one variant from a comparison run.
pub struct CompareOutcome {
    pub variant: crate::decoder::ModelVariant,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains each variant on identical data with the identical seed and
/// returns the per-epoch learning curves, invoking `on_epoch` as rows
/// complete.
pub fn compare_variants(
    base: &crate::model::HacaConfig,
    train_cfg: &TrainConfig,
    variants: &[crate::decoder::ModelVariant],
    train: &[Sample],
    val: &[Sample],
    epochs: usize,
    mut on_epoch: impl FnMut(crate::decoder::ModelVariant, &EpochMetrics),
) -> Result<Vec<CompareOutcome>> {
    let mut outcomes = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut config = base.clone();
        config.variant = variant;
        let model = Model::build(config)?;
        let mut trainer = Trainer::new(model, train_cfg.clone())?;
        trainer.run(train, val, epochs, |row| on_epoch(variant, row))?;
        outcomes.push(CompareOutcome {
            variant,
            metrics: trainer.metrics,
        });
    }
    Ok(outcomes)
}

/// Writes one CSV per variant plus a merged `compare.csv` with a leading
/// `variant` column.
pub fn write_compare_csvs(dir: &Path, outcomes: &[CompareOutcome]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut merged = format!("variant,{METRICS_CSV_HEADER}\n");
    for outcome in outcomes {
        write_metrics_csv(&dir.join(format!("{}.csv", outcome.variant)), &outcome.metrics)?;
        for row in &outcome.metrics {
            merged.push_str(&format!("{},{}\n", outcome.variant, row.csv_row()));
        }
    }
    let path = dir.join("compare.csv");
    std::fs::write(&path, merged).map_err(|e| Error::io(&path, e))
}

/// Mean per-token teacher-forced loss (dropout off).
pub fn validation_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for sample in samples {
        for caption in &sample.captions {
            let bound = model.bind();
            let pass = bound.forward_teacher_forced(sample, caption, ForwardOpts::eval())?;
            let loss = cross_entropy_loss(&pass.dists, caption)?;
            total += loss.item()?;
            tokens += non_pad_tokens(caption);
        }
    }
    Ok(total / tokens.max(1) as f64)
}
