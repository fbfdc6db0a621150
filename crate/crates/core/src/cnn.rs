//! Convolutional utterance encoder: embedded tokens pass through per-width
//! 1-D convolutions, max-pooling with window 2 and stride 2, ReLU, a global
//! max over the remaining positions, and a fully connected projection.
//!
//! The encoder is trained on per-utterance labels with a softmax head, then
//! frozen so its outputs can be cached as utterance features; an end-to-end
//! run keeps it on the tape instead.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::data::{Conversation, EmbeddingTable, PAD_ROW};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::parallel::par_map;
use crate::params::{bind, grad_axpy, grad_scale, read_grads, GradMap, ParamSpec, ParamStore};
use crate::tape::{Tape, TensorId};

#[derive(Clone, Debug)]
pub struct CnnConfig {
    pub filter_widths: Vec<usize>,
    pub maps_per_width: usize,
    pub pool_window: usize,
    pub out_dim: usize,
    pub embed_dim: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            filter_widths: vec![3, 4, 5],
            maps_per_width: 50,
            pool_window: 2,
            out_dim: 100,
            embed_dim: 300,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_widths.is_empty() || self.filter_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("filter widths must be positive".into()));
        }
        if self.maps_per_width == 0 || self.pool_window == 0 || self.out_dim == 0 || self.embed_dim == 0
        {
            return Err(Error::Config("cnn dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn max_width(&self) -> usize {
        self.filter_widths.iter().copied().max().unwrap_or(1)
    }

    pub fn concat_dim(&self) -> usize {
        self.filter_widths.len() * self.maps_per_width
    }
}

/// Kernel, bias, and projection declarations under the `cnn.` prefix.
pub fn cnn_param_specs(cfg: &CnnConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for &w in &cfg.filter_widths {
        let fan_in = w * cfg.embed_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        specs.push(ParamSpec::new(
            format!("cnn.conv{w}.w"),
            cfg.maps_per_width,
            fan_in,
            bound,
        ));
        specs.push(ParamSpec::new(format!("cnn.conv{w}.b"), 1, cfg.maps_per_width, 0.0));
    }
    let bound = 1.0 / (cfg.concat_dim() as f64).sqrt();
    specs.push(ParamSpec::new("cnn.fc.w", cfg.out_dim, cfg.concat_dim(), bound));
    specs.push(ParamSpec::new("cnn.fc.b", 1, cfg.out_dim, 0.0));
    specs
}

/// Softmax head used only while pretraining the encoder.
pub fn cnn_head_specs(cfg: &CnnConfig, num_classes: usize) -> Vec<ParamSpec> {
    let bound = 1.0 / (cfg.out_dim as f64).sqrt();
    vec![
        ParamSpec::new("cnn.cls.w", num_classes, cfg.out_dim, bound),
        ParamSpec::new("cnn.cls.b", 1, num_classes, 0.0),
    ]
}

/// Tape handles for the encoder parameters.
pub struct CnnIds {
    conv: Vec<(usize, TensorId, TensorId)>,
    fc_w: TensorId,
    fc_b: TensorId,
}

impl CnnIds {
    pub fn from_binding(binding: &BTreeMap<String, TensorId>, cfg: &CnnConfig) -> Result<Self> {
        let get = |path: String| -> Result<TensorId> {
            binding.get(&path).copied().ok_or(Error::UnknownParam(path))
        };
        let mut conv = Vec::new();
        for &w in &cfg.filter_widths {
            conv.push((
                w,
                get(format!("cnn.conv{w}.w"))?,
                get(format!("cnn.conv{w}.b"))?,
            ));
        }
        Ok(CnnIds {
            conv,
            fc_w: get("cnn.fc.w".into())?,
            fc_b: get("cnn.fc.b".into())?,
        })
    }
}

/// Places the embedding matrix on the tape as a constant.
pub fn embed_leaf(tape: &mut Tape, table: &EmbeddingTable) -> Result<TensorId> {
    tape.leaf(table.rows(), table.dim, table.matrix.clone(), false)
}

/// Encodes one utterance given as embedding-row indices; returns a
/// (1, out_dim) tensor. Short inputs are padded to the widest filter.
pub fn encode_ids(
    tape: &mut Tape,
    embed: TensorId,
    token_ids: &[usize],
    ids: &CnnIds,
    cfg: &CnnConfig,
) -> Result<TensorId> {
    let mut padded = token_ids.to_vec();
    while padded.len() < cfg.max_width() {
        padded.push(PAD_ROW);
    }
    let x = tape.gather_rows(embed, &padded)?;
    let mut pooled = Vec::with_capacity(cfg.filter_widths.len());
    for &(w, kw, kb) in &ids.conv {
        let win = tape.windows(x, w)?;
        let conv = tape.linear(win, kw, Some(kb))?;
        let pool = tape.max_pool_rows(conv, cfg.pool_window, cfg.pool_window)?;
        let act = tape.relu(pool);
        pooled.push(tape.max_over_rows(act)?);
    }
    let cat = tape.concat_cols(&pooled)?;
    tape.linear(cat, ids.fc_w, Some(ids.fc_b))
}

/// Encodes every utterance of every conversation off the tape and stores the
/// result in its `features` field, replacing whatever was there.
pub fn encode_features(
    convs: &mut [Conversation],
    table: &EmbeddingTable,
    params: &ParamStore,
    cfg: &CnnConfig,
) -> Result<()> {
    let token_sets: Vec<Vec<Vec<usize>>> = convs
        .iter()
        .map(|c| {
            c.utterances
                .iter()
                .map(|u| match &u.tokens {
                    Some(t) => Ok(table.ids(t)),
                    None => Err(Error::Data(format!(
                        "conversation {:?}: utterance without tokens cannot be encoded",
                        c.id
                    ))),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let encoded: Vec<Result<Vec<Vec<f64>>>> = par_map(&token_sets, |utts| {
        let mut tape = Tape::new();
        let binding = bind(&mut tape, params)?;
        let ids = CnnIds::from_binding(&binding, cfg)?;
        let embed = embed_leaf(&mut tape, table)?;
        utts.iter()
            .map(|t| {
                let out = encode_ids(&mut tape, embed, t, &ids, cfg)?;
                Ok(tape.data(out).to_vec())
            })
            .collect()
    });
    for (conv, rows) in convs.iter_mut().zip(encoded) {
        for (u, feat) in conv.utterances.iter_mut().zip(rows?) {
            u.features = Some(feat);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

const PRETRAIN_BATCH: usize = 32;

/// Optimizes the encoder plus softmax head on per-utterance cross-entropy
/// and reports final training accuracy. Classification labels only.
pub fn pretrain_cnn(
    convs: &[Conversation],
    table: &EmbeddingTable,
    params: &mut ParamStore,
    cfg: &CnnConfig,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<PretrainReport> {
    cfg.validate()?;
    let mut items: Vec<(Vec<usize>, usize)> = Vec::new();
    for conv in convs {
        for u in &conv.utterances {
            let tokens = u.tokens.as_ref().ok_or_else(|| {
                Error::Data(format!(
                    "conversation {:?}: utterance without tokens cannot be pretrained on",
                    conv.id
                ))
            })?;
            let label = u.label.as_class().ok_or_else(|| {
                Error::Config("pretraining needs class labels, not regression targets".into())
            })?;
            items.push((table.ids(tokens), label));
        }
    }
    if items.is_empty() {
        return Err(Error::Data("no utterances to pretrain on".into()));
    }

    let step = |params: &ParamStore, batch: &[(Vec<usize>, usize)]| -> Vec<Result<(f64, GradMap, bool)>> {
        par_map(batch, |(ids, label)| {
            let mut tape = Tape::new();
            let binding = bind(&mut tape, params)?;
            let cnn = CnnIds::from_binding(&binding, cfg)?;
            let head_w = *binding
                .get("cnn.cls.w")
                .ok_or(Error::UnknownParam("cnn.cls.w".into()))?;
            let head_b = *binding
                .get("cnn.cls.b")
                .ok_or(Error::UnknownParam("cnn.cls.b".into()))?;
            let embed = embed_leaf(&mut tape, table)?;
            let feat = encode_ids(&mut tape, embed, ids, &cnn, cfg)?;
            let logits = tape.linear(feat, head_w, Some(head_b))?;
            let logp = tape.log_softmax_rows(logits)?;
            let picked = tape.pick_per_row(logp, &[*label])?;
            let summed = tape.sum_all(picked);
            let loss = tape.neg(summed);
            tape.backward(loss)?;
            let data = tape.data(logits);
            let pred = argmax(data);
            Ok((tape.scalar(loss), read_grads(&tape, &binding, params), pred == *label))
        })
    };

    let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(PRETRAIN_BATCH) {
            let batch: Vec<(Vec<usize>, usize)> =
                chunk.iter().map(|&i| items[i].clone()).collect();
            let results = step(params, &batch);
            let mut grads = GradMap::new();
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, g, _) = r?;
                batch_loss += loss;
                grad_axpy(&mut grads, &g, 1.0);
            }
            grad_scale(&mut grads, 1.0 / batch.len() as f64);
            epoch_loss += batch_loss;
            adam.step(params, &grads)?;
        }
        epoch_losses.push(epoch_loss / items.len() as f64);
    }

    let mut correct = 0usize;
    for r in step(params, &items) {
        let (_, _, hit) = r?;
        if hit {
            correct += 1;
        }
    }
    Ok(PretrainReport {
        accuracy: correct as f64 / items.len() as f64,
        epoch_losses,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
