//! Experiment configuration, the training loop and evaluation.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DataSection, ExperimentConfig, SplitPolicy, TrainSection};

use crate::autograd::Tape;
use crate::datapipe::{BatchStream, Dataset, EpochPlan, Manifest, ManifestRow, Modality, Split};
use crate::error::{Error, Result};
use crate::metrics::{sens_spec, MetricsReport, DEFAULT_THRESHOLD};
use crate::models::{Model, ParamStore};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.toml";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub checkpoint: PathBuf,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss)
    }
}

/// Split label of every row under `policy`.
pub fn assign_splits(manifest: &Manifest, policy: &SplitPolicy) -> Result<Vec<Split>> {
    let rows = &manifest.rows;
    match policy {
        SplitPolicy::Manifest => Ok(rows.iter().map(|r| r.split).collect()),
        SplitPolicy::Institution { holdout } => {
            if !rows.iter().any(|r| &r.institution == holdout) {
                return Err(Error::Config(format!("no rows from institution `{holdout}`")));
            }
            Ok(rows
                .iter()
                .map(|r| if &r.institution == holdout { Split::Eval } else { Split::Train })
                .collect())
        }
        SplitPolicy::Stratified { eval_fraction, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut out = vec![Split::Train; rows.len()];
            for class in [0, 1] {
                let mut members: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].label == class).collect();
                members.shuffle(&mut rng);
                let n_eval = (members.len() as f64 * eval_fraction).round() as usize;
                for &i in &members[..n_eval] {
                    out[i] = Split::Eval;
                }
            }
            Ok(out)
        }
    }
}

fn rows_for<'a>(manifest: &'a Manifest, splits: &[Split], which: Split) -> Vec<&'a ManifestRow> {
    manifest
        .rows
        .iter()
        .zip(splits)
        .filter(|(_, &s)| s == which)
        .map(|(r, _)| r)
        .collect()
}

fn require_both_classes(labels: &[usize], what: &str) -> Result<()> {
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Config(format!("{what} split must contain both classes")));
    }
    Ok(())
}

/// Cross-entropy of one batch; records gradients on `params` when `learn`.
pub fn batch_loss(model: &Model, params: &mut ParamStore, x: &Tensor, labels: &[usize], learn: bool) -> Result<f64> {
    accumulated_loss(model, params, x, labels, learn, labels.len())
}

/// [`batch_loss`] computed `micro_batch` samples at a time. The loss and the
/// accumulated gradients are those of the whole batch.
pub fn accumulated_loss(
    model: &Model,
    params: &mut ParamStore,
    x: &Tensor,
    labels: &[usize],
    learn: bool,
    micro_batch: usize,
) -> Result<f64> {
    let n = labels.len();
    if micro_batch == 0 {
        return Err(Error::Config("micro_batch must be positive".into()));
    }
    if learn {
        params.zero_grad();
    }
    let mut total = 0.0;
    for start in (0..n).step_by(micro_batch) {
        let end = (start + micro_batch).min(n);
        let weight = (end - start) as f64 / n as f64;
        let chunk = if end - start == n { x.clone() } else { x.slice_batch(start..end)? };
        let mut tape = Tape::<f32>::new();
        let bound = params.bind(&mut tape, learn);
        let xv = tape.constant(chunk);
        let probs = model.forward(&mut tape, &bound, xv)?;
        let loss = tape.cross_entropy(probs, &labels[start..end])?;
        let value = tape.value(loss).item()? as f64;
        total += value * weight;
        if learn && value.is_finite() {
            let grads = tape.backward(loss)?;
            params.accumulate_scaled_grads(&grads, &bound, weight)?;
        }
    }
    Ok(total)
}

/// Runs the configured epochs over the training split and writes the
/// history CSV and a checkpoint under `output_dir`.
pub fn train(config: &ExperimentConfig, manifest: &Manifest) -> Result<TrainOutcome> {
    config.validate()?;
    let splits = assign_splits(manifest, &config.data.split)?;
    let rows = rows_for(manifest, &splits, Split::Train);
    let data = Dataset::load(manifest, &rows, config.data.modality, config.model.input_size)?;
    let labels = data.labels();
    require_both_classes(&labels, "training")?;

    let model = Model::build(&config.model)?;
    let mut params = model.init_params(config.seed)?;
    let hyper = AdamHyper {
        lr: config.train.lr,
        ..AdamHyper::default()
    };
    let mut optimizer = AdamState::new(hyper, &params);

    let out_dir = &config.output_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let history_path = out_dir.join(HISTORY_FILE);
    let mut history_file = std::fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    writeln!(history_file, "epoch,step,loss").map_err(|e| Error::io(&history_path, e))?;

    let mut history = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..config.effective_epochs() {
        let plan = EpochPlan::new(
            &labels,
            config.seed,
            epoch as u64,
            config.train.batch_size,
            config.data.rebalance,
            config.data.augment,
        )?;
        for (b, batch) in BatchStream::new(Arc::clone(&data.examples), plan, config.data.prefetch).enumerate() {
            if config.train.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch = batch?;
            let micro = config.train.micro_batch.unwrap_or(batch.labels.len());
            let loss = accumulated_loss(&model, &mut params, &batch.x, &batch.labels, true, micro)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, batch {b} (patients {:?})",
                    batch.indices.iter().map(|&i| &data.examples[i].patient_id).collect::<Vec<_>>()
                )));
            }
            adam_step(&mut params, &mut optimizer)?;
            step += 1;
            history.push(HistoryRow { epoch, step, loss });
            writeln!(history_file, "{epoch},{step},{loss}").map_err(|e| Error::io(&history_path, e))?;
        }
    }

    let checkpoint = out_dir.join(CHECKPOINT_DIR);
    save_checkpoint(&checkpoint, config, &params, &optimizer)?;
    Ok(TrainOutcome {
        history,
        params,
        optimizer,
        checkpoint,
    })
}

pub fn save_checkpoint(dir: &Path, config: &ExperimentConfig, params: &ParamStore, optimizer: &AdamState) -> Result<()> {
    params.save(dir)?;
    optimizer.save(dir)?;
    config.save(&dir.join(CONFIG_FILE))
}

/// Config and weights of a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(ExperimentConfig, Model, ParamStore)> {
    let config = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let model = Model::build(&config.model)?;
    let params = ParamStore::load(dir)?;
    params.check_against(&model.param_specs())?;
    Ok((config, model, params))
}

/// Death probabilities (class-1 column) for every example, in order.
pub fn predict_scores(model: &Model, params: &ParamStore, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let plan = EpochPlan::sequential(data.len(), batch_size);
    let mut scores = Vec::with_capacity(data.len());
    for batch in BatchStream::new(Arc::clone(&data.examples), plan, false) {
        let probs = model.predict(params, &batch?.x)?;
        scores.extend(probs.data().chunks(2).map(|row| row[1] as f64));
    }
    Ok(scores)
}

/// Metrics on split `which` of `manifest`, without augmentation or rebalancing.
pub fn evaluate_model(
    model: &Model,
    params: &ParamStore,
    config: &ExperimentConfig,
    manifest: &Manifest,
    modality: Modality,
    which: Split,
    threshold: f64,
) -> Result<MetricsReport> {
    let splits = assign_splits(manifest, &config.data.split)?;
    let rows = rows_for(manifest, &splits, which);
    let data = Dataset::load(manifest, &rows, modality, model.config().input_size)?;
    let labels = data.labels();
    require_both_classes(&labels, &format!("{which}"))?;
    let scores = predict_scores(model, params, &data, config.train.batch_size)?;
    sens_spec(&scores, &labels, threshold)
}

/// Loads a checkpoint and evaluates it on the eval split.
pub fn evaluate(checkpoint: &Path, manifest: &Manifest, modality: Modality) -> Result<MetricsReport> {
    let (config, model, params) = load_checkpoint(checkpoint)?;
    evaluate_model(&model, &params, &config, manifest, modality, Split::Eval, DEFAULT_THRESHOLD)
}

/// Reads a history CSV written by [`train`].
pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .records()
        .map(|r| {
            let r = r?;
            let field = |i: usize| r.get(i).unwrap_or_default();
            let bad = || Error::Format(format!("{}: malformed history row", path.display()));
            Ok(HistoryRow {
                epoch: field(0).parse().map_err(|_| bad())?,
                step: field(1).parse().map_err(|_| bad())?,
                loss: field(2).parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
