//! Ablation suite: retrains the model with encoder stages or relation types
//! removed and tabulates the effect.

use std::path::Path;

use crate::data::{EmbeddingTable, TaskMode};
use crate::error::{Error, Result};
use crate::model::{ConvInput, ModelConfig};
use crate::trainer::{evaluate, train, TrainConfig};

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub name: &'static str,
    /// Weighted F1 in classification, mean absolute error in regression.
    pub metric: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTables {
    pub encoder: Vec<AblationRow>,
    pub relation: Vec<AblationRow>,
}

/// The four encoder ablations: both context encoders, the sequential one
/// alone, the speaker-graph one alone, and a plain projection of the
/// utterance features.
pub fn encoder_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let mut both = base.clone();
    both.no_sequential = false;
    both.no_speaker = false;
    let mut sequential = base.clone();
    sequential.no_sequential = false;
    sequential.no_speaker = true;
    let mut speaker = base.clone();
    speaker.no_sequential = true;
    speaker.no_speaker = false;
    let mut neither = base.clone();
    neither.no_sequential = true;
    neither.no_speaker = true;
    vec![
        ("both", both),
        ("sequential-only", sequential),
        ("speaker-only", speaker),
        ("neither", neither),
    ]
}

/// The four relation ablations: the full relation set, speaker pairs only,
/// temporal direction only, and a single undifferentiated relation.
pub fn relation_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let mut full = base.clone();
    full.speaker_typed = true;
    full.temporal_typed = true;
    let mut no_temporal = base.clone();
    no_temporal.speaker_typed = true;
    no_temporal.temporal_typed = false;
    let mut no_speaker = base.clone();
    no_speaker.speaker_typed = false;
    no_speaker.temporal_typed = true;
    let mut single = base.clone();
    single.speaker_typed = false;
    single.temporal_typed = false;
    vec![
        ("full", full),
        ("no-temporal", no_temporal),
        ("no-speaker", no_speaker),
        ("single-relation", single),
    ]
}

fn run_variants(
    variants: Vec<(&'static str, ModelConfig)>,
    train_inputs: &[ConvInput],
    val_inputs: &[ConvInput],
    test_inputs: &[ConvInput],
    cfg: &TrainConfig,
    table: Option<&EmbeddingTable>,
) -> Result<Vec<AblationRow>> {
    let score_on = if !test_inputs.is_empty() {
        test_inputs
    } else if !val_inputs.is_empty() {
        val_inputs
    } else {
        train_inputs
    };
    let mut rows = Vec::with_capacity(variants.len());
    for (name, mc) in variants {
        let result = train(train_inputs, val_inputs, &mc, cfg, table)?;
        let ev = evaluate(score_on, &result.params, &mc, cfg.l2_lambda, table)?;
        let metric = match mc.mode {
            TaskMode::Classification => ev.report.as_ref().unwrap().weighted_f1,
            TaskMode::Regression => ev.mean_mae().unwrap(),
        };
        rows.push(AblationRow { name, metric });
    }
    Ok(rows)
}

/// Trains and scores every encoder and relation ablation with the same
/// training recipe and seed, scoring on the test split (validation or
/// training split when absent).
pub fn run_ablation_suite(
    train_inputs: &[ConvInput],
    val_inputs: &[ConvInput],
    test_inputs: &[ConvInput],
    base_model: &ModelConfig,
    cfg: &TrainConfig,
    table: Option<&EmbeddingTable>,
) -> Result<AblationTables> {
    if train_inputs.is_empty() {
        return Err(Error::Data("no training conversations".into()));
    }
    let encoder = run_variants(
        encoder_variants(base_model),
        train_inputs,
        val_inputs,
        test_inputs,
        cfg,
        table,
    )?;
    let relation = run_variants(
        relation_variants(base_model),
        train_inputs,
        val_inputs,
        test_inputs,
        cfg,
        table,
    )?;
    Ok(AblationTables { encoder, relation })
}

pub fn ablation_table_text(title: &str, rows: &[AblationRow], mode: TaskMode) -> String {
    let metric_name = match mode {
        TaskMode::Classification => "wf1",
        TaskMode::Regression => "mae",
    };
    let mut out = format!("{title}\n{:<18} {:<10}\n", "config", metric_name);
    for r in rows {
        out.push_str(&format!("{:<18} {:<10.6}\n", r.name, r.metric));
    }
    out
}

pub fn write_ablation_csv(path: &Path, tables: &AblationTables) -> Result<()> {
    let mut out = String::from("table,config,metric\n");
    for r in &tables.encoder {
        out.push_str(&format!("encoder,{},{}\n", r.name, r.metric));
    }
    for r in &tables.relation {
        out.push_str(&format!("relation,{},{}\n", r.name, r.metric));
    }
    std::fs::write(path, &out).map_err(|e| Error::io(path.display().to_string(), e))
}
