//! End-to-end training: the regularized objective over dialogue batches,
//! the epoch loop with checkpoint selection and divergence handling,
//! evaluation, metric logging, and grid search.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::argmax_rows;
use crate::cnn::{
    cnn_head_specs, cnn_param_specs, embed_leaf, encode_features, pretrain_cnn, PretrainReport,
};
use crate::data::{Conversation, Dataset, EmbeddingTable, Label, Prediction, TaskMode};
use crate::error::{Error, Result};
use crate::metrics::{score_classification, score_regression, MetricsReport};
use crate::model::{
    conversation_loss, forward_conversation, init_model_params, prepare_conversation, ConvInput,
    Golds, ModelConfig,
};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::par_map;
use crate::params::{
    bind, grad_axpy, grad_scale, init_params, param_sq_norm, read_grads, GradMap, ParamStore,
};
use crate::tape::Tape;

// ── configuration ──

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub l2_lambda: f64,
    pub epochs: usize,
    /// Dialogues per gradient step; the last batch of an epoch may be short.
    pub batch: usize,
    pub seed: u64,
    /// Score the training split after each epoch. Costs one extra forward
    /// pass per dialogue; switch off for large runs where only the
    /// validation curve matters.
    pub train_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            l2_lambda: 1e-5,
            epochs: 100,
            batch: 1,
            seed: 0,
            train_metrics: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.l2_lambda < 0.0 || !self.l2_lambda.is_finite() {
            return Err(Error::Config(format!(
                "l2 weight must be non-negative, got {}",
                self.l2_lambda
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_betas.0,
            beta2: self.adam_betas.1,
            eps: self.adam_eps,
        }
    }
}

// ── objective ──

/// One conversation through the model: summed per-utterance loss, utterance
/// count, and (optionally) gradients of the sum.
fn conv_pass(
    params: &ParamStore,
    cfg: &ModelConfig,
    table: Option<&EmbeddingTable>,
    input: &ConvInput,
    want_grads: bool,
) -> Result<(f64, usize, GradMap)> {
    let mut tape = Tape::new();
    let binding = bind(&mut tape, params)?;
    let embed = match (cfg.end_to_end, table) {
        (true, Some(t)) => Some(embed_leaf(&mut tape, t)?),
        (true, None) => {
            return Err(Error::Config(
                "end-to-end training needs an embedding table".into(),
            ))
        }
        _ => None,
    };
    let fwd = forward_conversation(&mut tape, &binding, cfg, input, embed)?;
    let (loss, count) = conversation_loss(&mut tape, fwd.out, &input.golds)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        let node = tape.find_first_nonfinite().unwrap_or_else(|| "loss".into());
        return Err(Error::NanLoss { node });
    }
    let grads = if want_grads {
        tape.backward(loss)?;
        read_grads(&tape, &binding, params)
    } else {
        GradMap::new()
    };
    Ok((value, count, grads))
}

/// Mean per-utterance loss over the batch plus `lambda` times the squared
/// parameter norm, with matching gradients. The denominator is the total
/// utterance count across all dialogues in the batch; the penalty term is
/// not divided by it.
pub fn batch_loss_and_grads(
    batch: &[&ConvInput],
    params: &ParamStore,
    cfg: &ModelConfig,
    lambda: f64,
    table: Option<&EmbeddingTable>,
) -> Result<(f64, GradMap)> {
    let results = par_map(batch, |input| conv_pass(params, cfg, table, input, true));
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut grads = GradMap::new();
    for r in results {
        let (l, c, g) = r?;
        sum += l;
        count += c;
        grad_axpy(&mut grads, &g, 1.0);
    }
    if count == 0 {
        return Err(Error::Data("batch holds no utterances".into()));
    }
    let scale = 1.0 / count as f64;
    grad_scale(&mut grads, scale);
    let mut loss = sum * scale;
    if lambda != 0.0 {
        loss += lambda * param_sq_norm(params);
        for (path, value) in params.iter() {
            let slot = grads
                .entry(path.clone())
                .or_insert_with(|| vec![0.0; value.data.len()]);
            for (g, &p) in slot.iter_mut().zip(&value.data) {
                *g += 2.0 * lambda * p;
            }
        }
    }
    Ok((loss, grads))
}

/// The training objective without gradients, over any set of conversations
/// treated as one batch.
pub fn compute_loss(
    inputs: &[ConvInput],
    params: &ParamStore,
    cfg: &ModelConfig,
    lambda: f64,
    table: Option<&EmbeddingTable>,
) -> Result<f64> {
    let results = par_map(inputs, |input| conv_pass(params, cfg, table, input, false));
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in results {
        let (l, c, _) = r?;
        sum += l;
        count += c;
    }
    if count == 0 {
        return Err(Error::Data("no utterances to score".into()));
    }
    Ok(sum / count as f64 + lambda * param_sq_norm(params))
}

// ── evaluation ──

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    /// Objective value, including the `lambda` penalty.
    pub loss: f64,
    /// Classification scores; absent in regression mode.
    pub report: Option<MetricsReport>,
    /// Per-attribute mean absolute error; absent in classification mode.
    pub mae: Option<Vec<f64>>,
    pub predictions: Vec<Prediction>,
}

impl EvalOutcome {
    /// Mean absolute error averaged over attributes.
    pub fn mean_mae(&self) -> Option<f64> {
        self.mae
            .as_ref()
            .map(|m| m.iter().sum::<f64>() / m.len() as f64)
    }
}

struct ConvEval {
    loss: f64,
    count: usize,
    predictions: Vec<Prediction>,
    pred_classes: Vec<usize>,
    gold_classes: Vec<usize>,
    pred_values: Vec<Vec<f64>>,
    gold_values: Vec<Vec<f64>>,
}

fn eval_pass(
    params: &ParamStore,
    cfg: &ModelConfig,
    table: Option<&EmbeddingTable>,
    input: &ConvInput,
) -> Result<ConvEval> {
    let mut tape = Tape::new();
    let binding = bind(&mut tape, params)?;
    let embed = match (cfg.end_to_end, table) {
        (true, Some(t)) => Some(embed_leaf(&mut tape, t)?),
        (true, None) => {
            return Err(Error::Config(
                "end-to-end evaluation needs an embedding table".into(),
            ))
        }
        _ => None,
    };
    let fwd = forward_conversation(&mut tape, &binding, cfg, input, embed)?;
    let (loss, count) = conversation_loss(&mut tape, fwd.out, &input.golds)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        let node = tape.find_first_nonfinite().unwrap_or_else(|| "loss".into());
        return Err(Error::NanLoss { node });
    }

    let mut out = ConvEval {
        loss: value,
        count,
        predictions: Vec::with_capacity(input.n),
        pred_classes: Vec::new(),
        gold_classes: Vec::new(),
        pred_values: Vec::new(),
        gold_values: Vec::new(),
    };
    match &input.golds {
        Golds::Classes(golds) => {
            let probs = tape.softmax_rows(fwd.out)?;
            let probs = tape.data(probs);
            let preds = argmax_rows(tape.data(fwd.out), cfg.out_dim);
            for (i, (&p, &g)) in preds.iter().zip(golds).enumerate() {
                out.predictions.push(Prediction {
                    id: input.id.clone(),
                    utterance_index: i,
                    pred: Label::Class(p),
                    gold: Label::Class(g),
                    probs: Some(probs[i * cfg.out_dim..(i + 1) * cfg.out_dim].to_vec()),
                });
            }
            out.pred_classes = preds;
            out.gold_classes = golds.clone();
        }
        Golds::Values { data, width } => {
            let values = tape.data(fwd.out);
            for i in 0..input.n {
                let pred = values[i * width..(i + 1) * width].to_vec();
                let gold = data[i * width..(i + 1) * width].to_vec();
                out.predictions.push(Prediction {
                    id: input.id.clone(),
                    utterance_index: i,
                    pred: Label::Values(pred.clone()),
                    gold: Label::Values(gold.clone()),
                    probs: None,
                });
                out.pred_values.push(pred);
                out.gold_values.push(gold);
            }
        }
    }
    Ok(out)
}

/// Scores a set of conversations with fixed parameters: objective value,
/// task metrics, and per-utterance predictions in input order.
pub fn evaluate(
    inputs: &[ConvInput],
    params: &ParamStore,
    cfg: &ModelConfig,
    lambda: f64,
    table: Option<&EmbeddingTable>,
) -> Result<EvalOutcome> {
    if inputs.is_empty() {
        return Err(Error::Data("no conversations to evaluate".into()));
    }
    let results = par_map(inputs, |input| eval_pass(params, cfg, table, input));
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut predictions = Vec::new();
    let mut pred_classes = Vec::new();
    let mut gold_classes = Vec::new();
    let mut pred_values = Vec::new();
    let mut gold_values = Vec::new();
    for r in results {
        let mut ev = r?;
        sum += ev.loss;
        count += ev.count;
        predictions.append(&mut ev.predictions);
        pred_classes.append(&mut ev.pred_classes);
        gold_classes.append(&mut ev.gold_classes);
        pred_values.append(&mut ev.pred_values);
        gold_values.append(&mut ev.gold_values);
    }
    let loss = sum / count as f64 + lambda * param_sq_norm(params);
    let (report, mae) = match cfg.mode {
        TaskMode::Classification => (
            Some(score_classification(
                &pred_classes,
                &gold_classes,
                cfg.out_dim,
            )?),
            None,
        ),
        TaskMode::Regression => (None, Some(score_regression(&pred_values, &gold_values)?)),
    };
    Ok(EvalOutcome {
        loss,
        report,
        mae,
        predictions,
    })
}

// ── metric log ──

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub acc: Option<f64>,
    pub wf1: Option<f64>,
    /// Mean absolute error averaged over attributes.
    pub mae: Option<f64>,
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes rows as `epoch,split,loss,acc,wf1,mae` with empty cells for
/// metrics a task does not produce. Floats print as their shortest exact
/// decimal form, so identical runs write identical files.
pub fn write_metric_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut out = String::from("epoch,split,loss,acc,wf1,mae\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            r.split,
            r.loss,
            opt_cell(r.acc),
            opt_cell(r.wf1),
            opt_cell(r.mae)
        ));
    }
    std::fs::write(path, &out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn metric_row(epoch: usize, split: &'static str, ev: &EvalOutcome) -> EpochRow {
    EpochRow {
        epoch,
        split,
        loss: ev.loss,
        acc: ev.report.as_ref().map(|r| r.accuracy),
        wf1: ev.report.as_ref().map(|r| r.weighted_f1),
        mae: ev.mean_mae(),
    }
}

/// The score an epoch is checkpointed on, oriented so larger is better.
fn checkpoint_score(row: &EpochRow) -> f64 {
    if let Some(wf1) = row.wf1 {
        wf1
    } else if let Some(mae) = row.mae {
        -mae
    } else {
        -row.loss
    }
}

// ── training loop ──

#[derive(Debug)]
pub struct TrainResult {
    /// The selected checkpoint: best validation score, falling back to the
    /// training split when no validation data was given.
    pub params: ParamStore,
    pub history: Vec<EpochRow>,
    pub best_epoch: Option<usize>,
    /// Set when an epoch produced a non-finite loss; `params` then holds the
    /// last checkpoint from before that epoch.
    pub diverged_at: Option<usize>,
}

/// Trains from a fresh seeded initialization. Deterministic: the same
/// inputs, configuration, and seed reproduce the history and parameters
/// bit for bit. A non-finite loss aborts the run and returns the last
/// finished epoch's parameters with `diverged_at` set.
pub fn train(
    train_inputs: &[ConvInput],
    val_inputs: &[ConvInput],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    table: Option<&EmbeddingTable>,
) -> Result<TrainResult> {
    model_cfg.validate()?;
    cfg.validate()?;
    if train_inputs.is_empty() {
        return Err(Error::Data("no training conversations".into()));
    }

    let mut params = init_model_params(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<EpochRow> = Vec::new();
    let mut last_good = params.clone();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_inputs.len()).collect();
        order.shuffle(&mut rng);
        let mut step_losses = Vec::new();
        let mut diverged = false;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&ConvInput> = chunk.iter().map(|&i| &train_inputs[i]).collect();
            match batch_loss_and_grads(&batch, &params, model_cfg, cfg.l2_lambda, table) {
                Ok((loss, grads)) => {
                    step_losses.push(loss);
                    adam.step(&mut params, &grads)?;
                }
                Err(Error::NanLoss { .. }) | Err(Error::NonFinite { .. }) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if diverged {
            return Ok(TrainResult {
                params: last_good,
                history,
                best_epoch: best.as_ref().map(|b| b.1),
                diverged_at: Some(epoch),
            });
        }

        let train_row = if cfg.train_metrics {
            let ev = evaluate(train_inputs, &params, model_cfg, cfg.l2_lambda, table)?;
            metric_row(epoch, "train", &ev)
        } else {
            // Mean of the step losses already paid for, not a fresh pass.
            let loss = step_losses.iter().sum::<f64>() / step_losses.len() as f64;
            EpochRow {
                epoch,
                split: "train",
                loss,
                acc: None,
                wf1: None,
                mae: None,
            }
        };
        history.push(train_row.clone());

        let watched = if val_inputs.is_empty() {
            train_row
        } else {
            let ev = evaluate(val_inputs, &params, model_cfg, cfg.l2_lambda, table)?;
            let row = metric_row(epoch, "val", &ev);
            history.push(row.clone());
            row
        };
        let score = checkpoint_score(&watched);
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, params.clone()));
        }
        last_good = params.clone();
    }

    let (params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, Some(epoch)),
        None => (params, None),
    };
    Ok(TrainResult {
        params,
        history,
        best_epoch,
        diverged_at: None,
    })
}

// ── grid search ──

#[derive(Clone, Debug)]
pub struct GridSpec {
    pub lrs: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub windows: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct GridRow {
    pub lr: f64,
    pub lambda: f64,
    pub window: (usize, usize),
    /// Weighted F1 in classification, mean absolute error in regression,
    /// measured on the validation split (training split when absent) with
    /// the run's selected checkpoint.
    pub metric: f64,
    pub best_epoch: Option<usize>,
}

/// Trains one run per point of the Cartesian grid and scores its selected
/// checkpoint. Returns the index of the winning row plus every row in grid
/// order (learning rate, then penalty, then window).
pub fn grid_search(
    train_inputs: &[ConvInput],
    val_inputs: &[ConvInput],
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    grid: &GridSpec,
    table: Option<&EmbeddingTable>,
) -> Result<(usize, Vec<GridRow>)> {
    if grid.lrs.is_empty() || grid.lambdas.is_empty() || grid.windows.is_empty() {
        return Err(Error::Config(
            "grid search needs at least one value per axis".into(),
        ));
    }
    let higher_better = model_cfg.mode == TaskMode::Classification;
    let mut rows = Vec::new();
    for &lr in &grid.lrs {
        for &lambda in &grid.lambdas {
            for &window in &grid.windows {
                let mut mc = model_cfg.clone();
                mc.window = window;
                let mut tc = base.clone();
                tc.lr = lr;
                tc.l2_lambda = lambda;
                let result = train(train_inputs, val_inputs, &mc, &tc, table)?;
                let eval_on = if val_inputs.is_empty() {
                    train_inputs
                } else {
                    val_inputs
                };
                let ev = evaluate(eval_on, &result.params, &mc, lambda, table)?;
                let metric = match mc.mode {
                    TaskMode::Classification => ev.report.as_ref().unwrap().weighted_f1,
                    TaskMode::Regression => ev.mean_mae().unwrap(),
                };
                rows.push(GridRow {
                    lr,
                    lambda,
                    window,
                    metric,
                    best_epoch: result.best_epoch,
                });
            }
        }
    }
    let mut best = 0;
    for (i, row) in rows.iter().enumerate().skip(1) {
        let better = if higher_better {
            row.metric > rows[best].metric
        } else {
            row.metric < rows[best].metric
        };
        if better {
            best = i;
        }
    }
    Ok((best, rows))
}

pub fn grid_table_text(rows: &[GridRow], best: usize, mode: TaskMode) -> String {
    let metric_name = match mode {
        TaskMode::Classification => "wf1",
        TaskMode::Regression => "mae",
    };
    let mut out = format!(
        "{:<12} {:<12} {:<10} {:<12} {:<10}\n",
        "lr", "lambda", "window", metric_name, "best_epoch"
    );
    for (i, r) in rows.iter().enumerate() {
        let epoch = r
            .best_epoch
            .map(|e| e.to_string())
            .unwrap_or_else(|| "-".into());
        let mark = if i == best { "  <- selected" } else { "" };
        out.push_str(&format!(
            "{:<12} {:<12} {:<10} {:<12.6} {:<10}{}\n",
            r.lr,
            r.lambda,
            format!("({},{})", r.window.0, r.window.1),
            r.metric,
            epoch,
            mark
        ));
    }
    out
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut out = String::from("lr,lambda,window_past,window_future,metric,best_epoch\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.lr,
            r.lambda,
            r.window.0,
            r.window.1,
            r.metric,
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default()
        ));
    }
    std::fs::write(path, &out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ── data preparation ──

/// Converts conversations to model inputs, in order.
pub fn prepare_all(
    convs: &[Conversation],
    cfg: &ModelConfig,
    table: Option<&EmbeddingTable>,
) -> Result<Vec<ConvInput>> {
    convs.iter().map(|c| prepare_conversation(c, cfg, table)).collect()
}

/// Gives every split utterance features when the model needs them: token
/// datasets get an encoder pretrained on the training split, frozen, and
/// applied everywhere. Returns the pretraining report and the frozen
/// encoder parameters when that happened, `None` when features were already
/// present or the model trains end to end.
pub fn ensure_features(
    dataset: &mut Dataset,
    model_cfg: &ModelConfig,
    table: Option<&EmbeddingTable>,
    pretrain_epochs: usize,
    pretrain_lr: f64,
    seed: u64,
) -> Result<Option<(PretrainReport, ParamStore)>> {
    if model_cfg.end_to_end || dataset.fully_featured() {
        return Ok(None);
    }
    if dataset.mode == TaskMode::Regression {
        return Err(Error::Config(
            "token inputs with value labels cannot be pretrained on classes; train end to end"
                .into(),
        ));
    }
    let table = table.ok_or_else(|| {
        Error::Config("token inputs need an embedding table to build features".into())
    })?;
    let cnn_cfg = model_cfg
        .cnn
        .clone()
        .ok_or_else(|| Error::Config("token inputs need an encoder configuration".into()))?;
    let mut specs = cnn_param_specs(&cnn_cfg);
    specs.extend(cnn_head_specs(&cnn_cfg, dataset.out_dim));
    let mut cnn_params = init_params(&specs, seed)?;
    let report = pretrain_cnn(
        &dataset.train,
        table,
        &mut cnn_params,
        &cnn_cfg,
        pretrain_epochs,
        pretrain_lr,
        seed,
    )?;
    encode_features(&mut dataset.train, table, &cnn_params, &cnn_cfg)?;
    encode_features(&mut dataset.val, table, &cnn_params, &cnn_cfg)?;
    encode_features(&mut dataset.test, table, &cnn_params, &cnn_cfg)?;
    Ok(Some((report, cnn_params)))
}
