//! Two-step relational graph convolution over a conversation.
//!
//! Step 1 mixes windowed neighbors per relation type with attention weights
//! and a count normalizer, keeping an untyped self term:
//!
//! ```text
//! h1_i = ReLU( sum_r sum_{j in N_i^r, j != i} (a_ij / c_ir) W_r g_j  +  a_ii W0 g_i )
//! ```
//!
//! Step 2 mixes the union neighborhood without weights or relation typing:
//!
//! ```text
//! h2_i = ReLU( sum_{j in N_i, j != i} W2 h1_j  +  W02 h1_i )
//! ```
//!
//! The normalizer c_ir is the neighbor count |N_i^r| folded into the mixing
//! masks; with `learned_normalizer` it is a per-relation trainable scale
//! instead (multiplicative, so no division by a trainable quantity).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamSpec;
use crate::tape::{Tape, TensorId};

#[derive(Clone, Copy, Debug)]
pub struct RgcnDims {
    pub in_dim: usize,
    pub out1: usize,
    pub out2: usize,
}

/// Parameter declarations under the `rgcn.` prefix: one typed matrix per
/// relation id plus the untyped self matrices for both steps.
pub fn rgcn_param_specs(dims: RgcnDims, relations: usize, learned_normalizer: bool) -> Vec<ParamSpec> {
    let b1 = 1.0 / (dims.in_dim as f64).sqrt();
    let b2 = 1.0 / (dims.out1 as f64).sqrt();
    let mut specs = Vec::new();
    for r in 0..relations {
        specs.push(ParamSpec::new(format!("rgcn.w{r}"), dims.out1, dims.in_dim, b1));
        if learned_normalizer {
            specs.push(ParamSpec::new(format!("rgcn.norm{r}"), 1, 1, 0.0));
        }
    }
    specs.push(ParamSpec::new("rgcn.w0_1", dims.out1, dims.in_dim, b1));
    specs.push(ParamSpec::new("rgcn.w_2", dims.out2, dims.out1, b2));
    specs.push(ParamSpec::new("rgcn.w0_2", dims.out2, dims.out1, b2));
    specs
}

/// Learned normalizer scales start at 1 (their ParamSpec bound of 0 would
/// zero them, killing every typed contribution).
pub fn learned_normalizer_init(relations: usize) -> Vec<(String, f64)> {
    (0..relations).map(|r| (format!("rgcn.norm{r}"), 1.0)).collect()
}

pub struct RgcnIds {
    pub w_r: Vec<TensorId>,
    pub norms: Option<Vec<TensorId>>,
    pub w0_1: TensorId,
    pub w_2: TensorId,
    pub w0_2: TensorId,
}

impl RgcnIds {
    pub fn from_binding(
        binding: &BTreeMap<String, TensorId>,
        relations: usize,
        learned_normalizer: bool,
    ) -> Result<Self> {
        let mut w_r = Vec::with_capacity(relations);
        let mut norms = Vec::new();
        for r in 0..relations {
            w_r.push(
                *binding
                    .get(&format!("rgcn.w{r}"))
                    .ok_or(Error::MissingRelation(r))?,
            );
            if learned_normalizer {
                norms.push(
                    *binding
                        .get(&format!("rgcn.norm{r}"))
                        .ok_or(Error::MissingRelation(r))?,
                );
            }
        }
        let get = |path: &str| -> Result<TensorId> {
            binding
                .get(path)
                .copied()
                .ok_or_else(|| Error::UnknownParam(path.into()))
        };
        Ok(RgcnIds {
            w_r,
            norms: if learned_normalizer { Some(norms) } else { None },
            w0_1: get("rgcn.w0_1")?,
            w_2: get("rgcn.w_2")?,
            w0_2: get("rgcn.w0_2")?,
        })
    }
}

/// First step. `masks[r]` is the n x n structural mask for relation r with
/// any count normalization already folded in; `alpha` is the n x n attention
/// matrix whose diagonal carries the self weights.
pub fn rgcn_step1(
    tape: &mut Tape,
    masks: &[Vec<f64>],
    alpha: TensorId,
    g: TensorId,
    ids: &RgcnIds,
) -> Result<TensorId> {
    if masks.len() != ids.w_r.len() {
        return Err(Error::MissingRelation(masks.len().min(ids.w_r.len())));
    }
    let (n, _) = tape.shape(g);
    let diag = tape.take_diag(alpha)?;
    let self_lin = tape.linear(g, ids.w0_1, None)?;
    let mut acc = tape.scale_rows(self_lin, diag)?;
    for (r, mask) in masks.iter().enumerate() {
        if mask.iter().all(|&v| v == 0.0) {
            continue;
        }
        let m = tape.leaf(n, n, mask.clone(), false)?;
        let weighted = tape.mul(m, alpha)?;
        let mixed = tape.matmul(weighted, g)?;
        let mut term = tape.linear(mixed, ids.w_r[r], None)?;
        if let Some(norms) = &ids.norms {
            term = tape.scale_scalar(term, norms[r])?;
        }
        acc = tape.add(acc, term)?;
    }
    Ok(tape.relu(acc))
}

/// Second step over the union neighborhood (row-major n x n, self excluded).
pub fn rgcn_step2(
    tape: &mut Tape,
    union: &[f64],
    h1: TensorId,
    ids: &RgcnIds,
) -> Result<TensorId> {
    let (n, _) = tape.shape(h1);
    let u = tape.leaf(n, n, union.to_vec(), false)?;
    let mixed = tape.matmul(u, h1)?;
    let neighbor = tape.linear(mixed, ids.w_2, None)?;
    let own = tape.linear(h1, ids.w0_2, None)?;
    let sum = tape.add(neighbor, own)?;
    Ok(tape.relu(sum))
}
