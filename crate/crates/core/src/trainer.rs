//! Multi-task training of `L_dst + alpha * L_lm` with delayed updates.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dst_autodiff::{Adam, Gradients, Graph, NodeId, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::context::build_vocabulary;
use crate::corpus::{Dialogue, Ontology};
use crate::error::{DstError, Result};
use crate::eval::{joint_accuracy, slot_accuracy, Percentage};
use crate::model::{DstModel, Instance, ModelConfig, Noise};
use crate::settings::{parse_field, parse_key_values};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub delay_update_steps: usize,
    pub batch_size: usize,
    pub hidden_dim: usize,
    /// Width of the composed token embedding (word part + char part).
    pub embedding_dim: usize,
    pub char_dim: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub tagging_enabled: bool,
    pub lm_enabled: bool,
    pub dropout: f64,
    pub word_dropout: f64,
    pub max_decode_len: usize,
    pub min_count: usize,
    /// Optional GloVe-format word vectors for the word part.
    pub pretrained_vectors: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.9,
            delay_update_steps: 4,
            batch_size: 8,
            hidden_dim: 400,
            embedding_dim: 400,
            char_dim: 100,
            learning_rate: 0.001,
            max_epochs: 30,
            patience: 6,
            seed: 7,
            tagging_enabled: true,
            lm_enabled: true,
            dropout: 0.2,
            word_dropout: 0.0,
            max_decode_len: 10,
            min_count: 1,
            pretrained_vectors: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 17] = [
        "alpha",
        "delay_update_steps",
        "batch_size",
        "hidden_dim",
        "embedding_dim",
        "char_dim",
        "learning_rate",
        "max_epochs",
        "patience",
        "seed",
        "tagging_enabled",
        "lm_enabled",
        "dropout",
        "word_dropout",
        "max_decode_len",
        "min_count",
        "pretrained_vectors",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = parse_field(key, value)?,
            "delay_update_steps" => self.delay_update_steps = parse_field(key, value)?,
            "batch_size" => self.batch_size = parse_field(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_field(key, value)?,
            "embedding_dim" => self.embedding_dim = parse_field(key, value)?,
            "char_dim" => self.char_dim = parse_field(key, value)?,
            "learning_rate" => self.learning_rate = parse_field(key, value)?,
            "max_epochs" => self.max_epochs = parse_field(key, value)?,
            "patience" => self.patience = parse_field(key, value)?,
            "seed" => self.seed = parse_field(key, value)?,
            "tagging_enabled" => self.tagging_enabled = parse_field(key, value)?,
            "lm_enabled" => self.lm_enabled = parse_field(key, value)?,
            "dropout" => self.dropout = parse_field(key, value)?,
            "word_dropout" => self.word_dropout = parse_field(key, value)?,
            "max_decode_len" => self.max_decode_len = parse_field(key, value)?,
            "min_count" => self.min_count = parse_field(key, value)?,
            "pretrained_vectors" => {
                self.pretrained_vectors = (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
            }
            _ => return Err(DstError::InvalidConfig(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_key_values(text, origin)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let pv = self
            .pretrained_vectors
            .as_ref()
            .map_or_else(|| "none".to_string(), |p| p.display().to_string());
        let values = [
            self.alpha.to_string(),
            self.delay_update_steps.to_string(),
            self.batch_size.to_string(),
            self.hidden_dim.to_string(),
            self.embedding_dim.to_string(),
            self.char_dim.to_string(),
            self.learning_rate.to_string(),
            self.max_epochs.to_string(),
            self.patience.to_string(),
            self.seed.to_string(),
            self.tagging_enabled.to_string(),
            self.lm_enabled.to_string(),
            self.dropout.to_string(),
            self.word_dropout.to_string(),
            self.max_decode_len.to_string(),
            self.min_count.to_string(),
            pv,
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.alpha.is_nan() {
            return Err(DstError::NegativeAlpha(self.alpha));
        }
        if self.delay_update_steps == 0 || self.batch_size == 0 {
            return Err(DstError::InvalidConfig(
                "delay_update_steps and batch_size must be positive".into(),
            ));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(DstError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.char_dim >= self.embedding_dim {
            return Err(DstError::InvalidConfig(format!(
                "char_dim ({}) must be smaller than embedding_dim ({})",
                self.char_dim, self.embedding_dim
            )));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            word_dim: self.embedding_dim.saturating_sub(self.char_dim),
            char_dim: self.char_dim,
            hidden_dim: self.hidden_dim,
            lm_enabled: self.lm_enabled,
            tagging_enabled: self.tagging_enabled,
            max_decode_len: self.max_decode_len,
            dropout: self.dropout,
            word_dropout: self.word_dropout,
        }
    }

    /// Weight actually applied to the LM term.
    pub fn effective_alpha(&self) -> f64 {
        if self.lm_enabled {
            self.alpha
        } else {
            0.0
        }
    }
}

/// `l_dst + alpha * l_lm`; with `alpha == 0` the result is `l_dst` itself.
pub fn total_loss(g: &mut Graph<'_>, l_dst: NodeId, l_lm: NodeId, alpha: f64) -> Result<NodeId> {
    if alpha < 0.0 || alpha.is_nan() {
        return Err(DstError::NegativeAlpha(alpha));
    }
    if alpha == 0.0 {
        return Ok(l_dst);
    }
    let weighted = g.scale(l_lm, alpha)?;
    Ok(g.add(l_dst, weighted)?)
}

/// Mean losses of one micro-batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLoss {
    pub dst: f64,
    pub lm: f64,
}

/// Gradient of the micro-batch mean of `L_total` together with the mean
/// losses. `noise_seeds[i]` seeds the dropout masks of example `i`;
/// `None` disables all training noise.
pub fn batch_gradients(
    model: &DstModel,
    batch: &[&Instance],
    alpha: f64,
    noise_seeds: Option<&[u64]>,
) -> Result<(Gradients, BatchLoss)> {
    if batch.is_empty() {
        return Err(DstError::Empty("batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let per_example: Vec<(Gradients, f64, f64)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut g = Graph::with_params(&model.params);
            let mut rng = noise_seeds.map(|s| ChaCha8Rng::seed_from_u64(s[i]));
            let noise = rng.as_mut().map(|rng| Noise { rng });
            let losses = model.instance_loss(&mut g, inst, noise)?;
            let total = match losses.lm {
                Some(lm) => total_loss(&mut g, losses.dst, lm, alpha)?,
                None => losses.dst,
            };
            g.backward(total)?;
            let mut grads = Gradients::zeros_like(&model.params);
            g.accumulate_param_grads(&mut grads, scale)?;
            let lm = losses.lm.map_or(0.0, |l| g.value(l).item());
            Ok((grads, g.value(losses.dst).item(), lm))
        })
        .collect::<Result<_>>()?;
    let mut sum = Gradients::zeros_like(&model.params);
    let mut loss = BatchLoss::default();
    for (grads, dst, lm) in &per_example {
        sum.add_assign(grads);
        loss.dst += dst * scale;
        loss.lm += lm * scale;
    }
    Ok((sum, loss))
}

/// Optimizer plus the delayed-update accumulator.
pub struct Trainer {
    pub model: DstModel,
    pub config: TrainConfig,
    optimizer: Adam,
    accumulator: Gradients,
    pending: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: BatchLoss,
    /// Whether this micro-step triggered a parameter update.
    pub updated: bool,
}

impl Trainer {
    pub fn new(model: DstModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(&model.params, config.learning_rate);
        let accumulator = Gradients::zeros_like(&model.params);
        Ok(Trainer {
            model,
            config,
            optimizer,
            accumulator,
            pending: 0,
        })
    }

    pub fn pending_micro_steps(&self) -> usize {
        self.pending
    }

    pub fn accumulated(&self) -> &Gradients {
        &self.accumulator
    }

    pub fn updates_applied(&self) -> u64 {
        self.optimizer.steps_taken()
    }

    /// Adds one micro-batch gradient to the accumulator and applies the
    /// summed gradient every `delay_update_steps` micro-steps.
    pub fn train_step(&mut self, batch: &[&Instance], noise_seeds: Option<&[u64]>) -> Result<StepOutcome> {
        let (grads, loss) = batch_gradients(&self.model, batch, self.config.effective_alpha(), noise_seeds)?;
        if !(loss.dst.is_finite() && loss.lm.is_finite()) || !grads.max_abs().is_finite() {
            return Err(DstError::Autodiff(dst_autodiff::AutodiffError::NonFiniteGradient {
                op: "train_step",
            }));
        }
        self.accumulator.add_assign(&grads);
        self.pending += 1;
        let updated = self.pending >= self.config.delay_update_steps;
        if updated {
            self.flush();
        }
        Ok(StepOutcome { loss, updated })
    }

    /// Applies a partially filled accumulator; returns whether it did.
    pub fn flush(&mut self) -> bool {
        if self.pending == 0 {
            return false;
        }
        self.optimizer.apply(&mut self.model.params, &self.accumulator);
        self.accumulator.clear();
        self.pending = 0;
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_dst: f64,
    pub train_lm: f64,
    pub val_joint: Percentage,
    pub val_slot: Percentage,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// Per-epoch losses and accuracies without timings.
    pub fn curve_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_dst\ttrain_lm\tval_joint\tval_slot\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.12}\t{:.12}\t{}\t{}",
                e.epoch, e.train_dst, e.train_lm, e.val_joint, e.val_slot
            );
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_dst\ttrain_lm\tval_joint\tval_slot\tseconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.12}\t{:.12}\t{}\t{}\t{:.2}",
                e.epoch, e.train_dst, e.train_lm, e.val_joint, e.val_slot, e.seconds
            );
        }
        let _ = writeln!(out, "# best_epoch\t{}", self.best_epoch);
        if let Some(p) = &self.best_checkpoint {
            let _ = writeln!(out, "# best_checkpoint\t{}", p.display());
        }
        let _ = writeln!(out, "# wall_clock_secs\t{:.2}", self.wall_clock_secs);
        out
    }
}

/// Joint and slot accuracy of `model` on prepared instances.
pub fn evaluate(model: &DstModel, instances: &[Instance]) -> Result<(Percentage, Percentage)> {
    let preds = model.predict_instances(instances)?;
    Ok((joint_accuracy(&preds)?, slot_accuracy(&preds, &model.ontology)?))
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds a fresh model (vocabulary from `train`) and trains it with early
/// stopping on validation joint accuracy, ties broken by slot accuracy. The
/// best epoch's parameters; with `checkpoint` set they are also saved there.
pub fn fit(
    train: &[Dialogue],
    dev: &[Dialogue],
    ontology: &Ontology,
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(DstModel, TrainReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(DstError::Empty("training split"));
    }
    if dev.is_empty() {
        return Err(DstError::Empty("validation split"));
    }
    let vocab = build_vocabulary(train, config.min_count);
    let mut model = DstModel::new(config.model_config(), vocab, ontology.clone(), config.seed)?;
    if let Some(path) = &config.pretrained_vectors {
        let coverage = model
            .embedding()
            .clone()
            .load_pretrained_vectors(&mut model.params, &model.vocab, path)?;
        log::info!("pretrained vectors cover {:.1}% of the vocabulary", 100.0 * coverage);
    }
    let train_instances = model.prepare_corpus(train)?;
    let dev_instances = model.prepare_corpus(dev)?;
    fit_model(model, &train_instances, &dev_instances, config, checkpoint)
}

/// Training loop over prepared instances.
pub fn fit_model(
    model: DstModel,
    train: &[Instance],
    dev: &[Instance],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<(DstModel, TrainReport)> {
    if train.is_empty() {
        return Err(DstError::Empty("training split"));
    }
    if dev.is_empty() {
        return Err(DstError::Empty("validation split"));
    }
    let start = Instant::now();
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(Percentage, Percentage, usize, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let epoch_start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let (mut dst_sum, mut lm_sum) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| mix_seed(config.seed, epoch as u64, i as u64 + 1))
                .collect();
            let out = trainer.train_step(&batch, Some(&seeds))?;
            dst_sum += out.loss.dst * batch.len() as f64;
            lm_sum += out.loss.lm * batch.len() as f64;
        }
        trainer.flush();
        let (val_joint, val_slot) = evaluate(&trainer.model, dev)?;
        let record = EpochRecord {
            epoch,
            train_dst: dst_sum / train.len() as f64,
            train_lm: lm_sum / train.len() as f64,
            val_joint,
            val_slot,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: L_dst {:.4} L_lm {:.4} val joint {} slot {} ({:.1}s)",
            record.train_dst,
            record.train_lm,
            val_joint,
            val_slot,
            record.seconds
        );
        epochs.push(record);
        let improved = best
            .as_ref()
            .is_none_or(|(j, s, _, _)| (val_joint.fraction(), val_slot.fraction()) > (j.fraction(), s.fraction()));
        if improved {
            best = Some((val_joint, val_slot, epoch, trainer.model.params.clone()));
            since_best = 0;
            if let Some(path) = checkpoint {
                trainer.model.save(path)?;
            }
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
        if val_joint.numerator == val_joint.denominator {
            break;
        }
    }
    let (_, _, best_epoch, params) = best.ok_or(DstError::InvalidConfig("max_epochs must be at least 1".into()))?;
    let mut model = trainer.model;
    model.params = params;
    let report = TrainReport {
        epochs,
        best_epoch,
        best_checkpoint: checkpoint.map(Path::to_path_buf),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub delay_update_steps: usize,
    pub val_joint: Percentage,
    pub best_epoch: usize,
}

/// One `fit` per (alpha, delay) cell, alpha-major.
pub fn sweep(
    alphas: &[f64],
    delays: &[usize],
    train: &[Dialogue],
    dev: &[Dialogue],
    ontology: &Ontology,
    base: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || delays.is_empty() {
        return Err(DstError::Empty("sweep grid"));
    }
    let mut rows = Vec::with_capacity(alphas.len() * delays.len());
    for &alpha in alphas {
        for &delay in delays {
            let cfg = TrainConfig {
                alpha,
                delay_update_steps: delay,
                ..base.clone()
            };
            let (_, report) = fit(train, dev, ontology, &cfg, None)?;
            let best = report.best();
            rows.push(SweepRow {
                alpha,
                delay_update_steps: delay,
                val_joint: best.val_joint,
                best_epoch: report.best_epoch,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha\tdelay_update_steps\tval_joint\tbest_epoch\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.alpha, r.delay_update_steps, r.val_joint, r.best_epoch
        );
    }
    out
}
