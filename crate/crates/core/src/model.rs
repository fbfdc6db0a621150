//! The full per-conversation pipeline: utterance features (given or from the
//! token encoder) -> sequential encoding -> windowed relational graph with
//! attention edge weights -> two-step graph convolution -> attention pooling
//! -> output head. Ablation flags swap the sequential encoder for a linear
//! projection, drop the graph stage, or collapse the relation typing.

use std::collections::BTreeMap;

use crate::classifier::{attend_pool, classifier_param_specs, output_head, ClassifierIds};
use crate::cnn::{cnn_param_specs, encode_ids, CnnConfig, CnnIds};
use crate::data::{Conversation, EmbeddingTable, TaskMode};
use crate::error::{Error, Result};
use crate::graph::{
    build_graph, relation_adjacency, relation_mix_masks, speaker_roles, union_mask, window_mask,
    RelationRegistry,
};
use crate::gru::{bigru, gru_param_specs, GruIds};
use crate::params::{init_params, ParamSpec, ParamStore, Value};
use crate::rgcn::{rgcn_param_specs, rgcn_step1, rgcn_step2, RgcnDims, RgcnIds};
use crate::tape::{Tape, TensorId};

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub mode: TaskMode,
    /// Class count in classification mode, attribute count in regression.
    pub out_dim: usize,
    /// Width of the incoming utterance features.
    pub feature_dim: usize,
    pub window: (usize, usize),
    pub gru_hidden: usize,
    pub rgcn_out1: usize,
    pub rgcn_out2: usize,
    pub cls_hidden: usize,
    pub max_speakers: usize,
    /// Replace the bidirectional GRU with a per-utterance linear projection.
    pub no_sequential: bool,
    /// Drop the graph stage entirely; classify from the sequential encoding.
    pub no_speaker: bool,
    /// Type edges by speaker pair (off collapses that axis).
    pub speaker_typed: bool,
    /// Type edges by temporal direction (off collapses that axis).
    pub temporal_typed: bool,
    /// Per-relation trainable scale instead of the 1/|N_i^r| count.
    pub learned_normalizer: bool,
    /// Keep the token encoder on the tape and fine-tune it jointly.
    pub end_to_end: bool,
    pub cnn: Option<CnnConfig>,
}

impl ModelConfig {
    /// Standard dimensions; window (10,10), 100-wide hidden layers.
    pub fn new(mode: TaskMode, out_dim: usize, feature_dim: usize, max_speakers: usize) -> Self {
        ModelConfig {
            mode,
            out_dim,
            feature_dim,
            window: (10, 10),
            gru_hidden: 100,
            rgcn_out1: 100,
            rgcn_out2: 100,
            cls_hidden: 100,
            max_speakers,
            no_sequential: false,
            no_speaker: false,
            speaker_typed: true,
            temporal_typed: true,
            learned_normalizer: false,
            end_to_end: false,
            cnn: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0
            || self.feature_dim == 0
            || self.gru_hidden == 0
            || self.rgcn_out1 == 0
            || self.rgcn_out2 == 0
            || self.cls_hidden == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.max_speakers == 0 {
            return Err(Error::Config("need at least one speaker".into()));
        }
        if self.end_to_end {
            let cnn = self
                .cnn
                .as_ref()
                .ok_or_else(|| Error::Config("end-to-end mode needs a cnn config".into()))?;
            cnn.validate()?;
            if cnn.out_dim != self.feature_dim {
                return Err(Error::Config(format!(
                    "cnn out_dim {} must match feature_dim {}",
                    cnn.out_dim, self.feature_dim
                )));
            }
        }
        Ok(())
    }

    pub fn g_dim(&self) -> usize {
        2 * self.gru_hidden
    }

    pub fn h_dim(&self) -> usize {
        if self.no_speaker {
            self.g_dim()
        } else {
            self.g_dim() + self.rgcn_out2
        }
    }

    pub fn registry(&self) -> Result<RelationRegistry> {
        RelationRegistry::collapsed(self.max_speakers, self.speaker_typed, self.temporal_typed)
    }
}

pub fn model_param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut specs = Vec::new();
    if cfg.end_to_end {
        specs.extend(cnn_param_specs(cfg.cnn.as_ref().unwrap()));
    }
    if cfg.no_sequential {
        let bound = 1.0 / (cfg.feature_dim as f64).sqrt();
        specs.push(ParamSpec::new("proj.w", cfg.g_dim(), cfg.feature_dim, bound));
        specs.push(ParamSpec::new("proj.b", 1, cfg.g_dim(), 0.0));
    } else {
        specs.extend(gru_param_specs("gru.fwd", cfg.feature_dim, cfg.gru_hidden));
        specs.extend(gru_param_specs("gru.bwd", cfg.feature_dim, cfg.gru_hidden));
    }
    if !cfg.no_speaker {
        let bound = 1.0 / (cfg.g_dim() as f64).sqrt();
        specs.push(ParamSpec::new("attn.w_e", cfg.g_dim(), cfg.g_dim(), bound));
        let dims = RgcnDims {
            in_dim: cfg.g_dim(),
            out1: cfg.rgcn_out1,
            out2: cfg.rgcn_out2,
        };
        specs.extend(rgcn_param_specs(dims, cfg.registry()?.count(), cfg.learned_normalizer));
    }
    specs.extend(classifier_param_specs(cfg.h_dim(), cfg.cls_hidden, cfg.out_dim));
    Ok(specs)
}

/// Fresh parameters for the configuration; learned normalizer scales start
/// at 1 rather than the zero their ParamSpec bound would give.
pub fn init_model_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut params = init_params(&model_param_specs(cfg)?, seed)?;
    if cfg.learned_normalizer {
        for (path, v) in crate::rgcn::learned_normalizer_init(cfg.registry()?.count()) {
            params.insert(path, Value::new(1, 1, vec![v])?);
        }
    }
    Ok(params)
}

/// Per-utterance gold targets.
#[derive(Clone, Debug)]
pub enum Golds {
    Classes(Vec<usize>),
    /// Row-major n x width attribute matrix.
    Values { data: Vec<f64>, width: usize },
}

impl Golds {
    pub fn len(&self) -> usize {
        match self {
            Golds::Classes(c) => c.len(),
            Golds::Values { data, width } => data.len() / width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One conversation reduced to what the forward pass consumes.
#[derive(Clone, Debug)]
pub struct ConvInput {
    pub id: String,
    pub n: usize,
    pub roles: Vec<usize>,
    /// Row-major n x feature_dim, absent in end-to-end token mode.
    pub features: Option<Vec<f64>>,
    /// Embedding-row ids per utterance, present in end-to-end token mode.
    pub tokens: Option<Vec<Vec<usize>>>,
    pub golds: Golds,
}

pub fn prepare_conversation(
    conv: &Conversation,
    cfg: &ModelConfig,
    table: Option<&EmbeddingTable>,
) -> Result<ConvInput> {
    let n = conv.utterances.len();
    let roles = speaker_roles(conv, cfg.max_speakers);
    let golds = match cfg.mode {
        TaskMode::Classification => {
            let mut classes = Vec::with_capacity(n);
            for u in &conv.utterances {
                let c = u.label.as_class().ok_or_else(|| {
                    Error::Data(format!("conversation {:?}: expected a class label", conv.id))
                })?;
                if c >= cfg.out_dim {
                    return Err(Error::Data(format!(
                        "conversation {:?}: label {c} out of range for {} classes",
                        conv.id, cfg.out_dim
                    )));
                }
                classes.push(c);
            }
            Golds::Classes(classes)
        }
        TaskMode::Regression => {
            let mut data = Vec::with_capacity(n * cfg.out_dim);
            for u in &conv.utterances {
                let vals = u.label.as_values().ok_or_else(|| {
                    Error::Data(format!("conversation {:?}: expected value labels", conv.id))
                })?;
                if vals.len() != cfg.out_dim {
                    return Err(Error::Data(format!(
                        "conversation {:?}: expected {} attributes, found {}",
                        conv.id,
                        cfg.out_dim,
                        vals.len()
                    )));
                }
                data.extend_from_slice(vals);
            }
            Golds::Values { data, width: cfg.out_dim }
        }
    };

    let (features, tokens) = if cfg.end_to_end {
        let table = table.ok_or_else(|| {
            Error::Config("end-to-end mode needs an embedding table".into())
        })?;
        let mut ids = Vec::with_capacity(n);
        for u in &conv.utterances {
            let t = u.tokens.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "conversation {:?}: utterance without tokens in end-to-end mode",
                    conv.id
                ))
            })?;
            ids.push(table.ids(t));
        }
        (None, Some(ids))
    } else {
        let mut data = Vec::with_capacity(n * cfg.feature_dim);
        for u in &conv.utterances {
            let f = u.features.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "conversation {:?}: utterance without features; encode tokens first",
                    conv.id
                ))
            })?;
            if f.len() != cfg.feature_dim {
                return Err(Error::Shape {
                    op: "prepare_conversation",
                    lhs: (1, cfg.feature_dim),
                    rhs: (1, f.len()),
                });
            }
            data.extend_from_slice(f);
        }
        (Some(data), None)
    };

    Ok(ConvInput { id: conv.id.clone(), n, roles, features, tokens, golds })
}

/// Tensors exposed by one forward pass.
pub struct Forward {
    /// (n, out_dim) logits or regression values.
    pub out: TensorId,
    pub g: TensorId,
    pub h2: Option<TensorId>,
    /// (n, n) edge attention, rows normalized over each window.
    pub alpha: Option<TensorId>,
    /// (n, n) pooling attention over the whole conversation.
    pub beta: TensorId,
}

pub fn forward_conversation(
    tape: &mut Tape,
    binding: &BTreeMap<String, TensorId>,
    cfg: &ModelConfig,
    input: &ConvInput,
    embed: Option<TensorId>,
) -> Result<Forward> {
    let n = input.n;
    if n == 0 {
        return Err(Error::Data(format!("conversation {:?} is empty", input.id)));
    }

    let u = if cfg.end_to_end {
        let cnn_cfg = cfg.cnn.as_ref().unwrap();
        let cnn = CnnIds::from_binding(binding, cnn_cfg)?;
        let embed = embed.ok_or_else(|| {
            Error::Config("end-to-end forward needs the embedding tensor".into())
        })?;
        let token_ids = input.tokens.as_ref().ok_or_else(|| {
            Error::Data(format!("conversation {:?} lacks token ids", input.id))
        })?;
        let rows: Vec<TensorId> = token_ids
            .iter()
            .map(|ids| encode_ids(tape, embed, ids, &cnn, cnn_cfg))
            .collect::<Result<_>>()?;
        tape.concat_rows(&rows)?
    } else {
        let feats = input.features.as_ref().ok_or_else(|| {
            Error::Data(format!("conversation {:?} lacks features", input.id))
        })?;
        tape.leaf(n, cfg.feature_dim, feats.clone(), false)?
    };

    let g = if cfg.no_sequential {
        let get = |p: &str| binding.get(p).copied().ok_or_else(|| Error::UnknownParam(p.into()));
        tape.linear(u, get("proj.w")?, Some(get("proj.b")?))?
    } else {
        let fwd = GruIds::from_binding(binding, "gru.fwd")?;
        let bwd = GruIds::from_binding(binding, "gru.bwd")?;
        bigru(tape, u, &fwd, &bwd, cfg.gru_hidden)?
    };

    let (h_cat, alpha, h2) = if cfg.no_speaker {
        (g, None, None)
    } else {
        let registry = cfg.registry()?;
        let graph = build_graph(&input.roles, cfg.window, &registry, None)?;
        let masks = if cfg.learned_normalizer {
            relation_adjacency(&graph)
        } else {
            relation_mix_masks(&graph)
        };
        let union = union_mask(&graph);

        let w_e = binding
            .get("attn.w_e")
            .copied()
            .ok_or_else(|| Error::UnknownParam("attn.w_e".into()))?;
        let proj = tape.matmul(g, w_e)?;
        let gt = tape.transpose(g);
        let scores = tape.matmul(proj, gt)?;
        let alpha = tape.masked_softmax_rows(scores, &window_mask(n, cfg.window))?;

        let rgcn = RgcnIds::from_binding(binding, registry.count(), cfg.learned_normalizer)?;
        let h1 = rgcn_step1(tape, &masks, alpha, g, &rgcn)?;
        let h2 = rgcn_step2(tape, &union, h1, &rgcn)?;
        let cat = tape.concat_cols(&[g, h2])?;
        (cat, Some(alpha), Some(h2))
    };

    let cls = ClassifierIds::from_binding(binding)?;
    let (pooled, beta) = attend_pool(tape, h_cat, cls.w_beta)?;
    let out = output_head(tape, pooled, &cls)?;
    Ok(Forward { out, g, h2, alpha, beta })
}

/// Unnormalized loss for one conversation plus its utterance count: summed
/// negative log-likelihood for classes, summed squared error for values.
/// The trainer divides by the batch-wide utterance total.
pub fn conversation_loss(tape: &mut Tape, out: TensorId, golds: &Golds) -> Result<(TensorId, usize)> {
    match golds {
        Golds::Classes(classes) => {
            let logp = tape.log_softmax_rows(out)?;
            let picked = tape.pick_per_row(logp, classes)?;
            let s = tape.sum_all(picked);
            Ok((tape.neg(s), classes.len()))
        }
        Golds::Values { data, width } => {
            let n = data.len() / width;
            let gold = tape.leaf(n, *width, data.clone(), false)?;
            let diff = tape.sub(out, gold)?;
            let sq = tape.mul(diff, diff)?;
            Ok((tape.sum_all(sq), n))
        }
    }
}
