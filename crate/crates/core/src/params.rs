//! Named parameter storage, gradient maps, and checkpoint files.
//!
//! Parameters live in a `BTreeMap` keyed by dotted paths ("gru.fwd.w_z"), so
//! iteration order, tape layout, and checkpoint key order are all stable.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};

/// One parameter matrix in storage form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Value {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Value {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "value",
                lhs: (rows, cols),
                rhs: (1, data.len()),
            });
        }
        Ok(Value { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Value {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// All model parameters keyed by path.
pub type ParamStore = BTreeMap<String, Value>;

/// Gradients for a subset of parameters, keyed by the same paths.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Registers every parameter on the tape as a gradient-tracking leaf.
/// BTreeMap order makes the resulting tape layout deterministic.
pub fn bind(tape: &mut Tape, params: &ParamStore) -> Result<BTreeMap<String, TensorId>> {
    let mut ids = BTreeMap::new();
    for (path, v) in params {
        let id = tape.leaf(v.rows, v.cols, v.data.clone(), true)?;
        ids.insert(path.clone(), id);
    }
    Ok(ids)
}

/// Collects accumulated leaf gradients after backward. Parameters the loss
/// never touched get explicit zeros so reductions see every key.
pub fn read_grads(tape: &Tape, ids: &BTreeMap<String, TensorId>, params: &ParamStore) -> GradMap {
    ids.iter()
        .map(|(path, &id)| {
            let g = match tape.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; params[path].len()],
            };
            (path.clone(), g)
        })
        .collect()
}

/// acc += s * g, creating missing entries as zeros first.
pub fn grad_axpy(acc: &mut GradMap, g: &GradMap, s: f64) {
    for (path, gv) in g {
        let slot = acc.entry(path.clone()).or_insert_with(|| vec![0.0; gv.len()]);
        for (a, &v) in slot.iter_mut().zip(gv) {
            *a += s * v;
        }
    }
}

pub fn grad_scale(g: &mut GradMap, s: f64) {
    for gv in g.values_mut() {
        for v in gv.iter_mut() {
            *v *= s;
        }
    }
}

pub fn grad_sq_norm(g: &GradMap) -> f64 {
    g.values().flat_map(|v| v.iter()).map(|&x| x * x).sum()
}

/// Squared L2 norm over every entry of every parameter.
pub fn param_sq_norm(params: &ParamStore) -> f64 {
    params.values().flat_map(|v| v.data.iter()).map(|&x| x * x).sum()
}

/// Declares one parameter to create: shape plus the half-width of its
/// uniform init range.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub bound: f64,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, rows: usize, cols: usize, bound: f64) -> Self {
        ParamSpec {
            path: path.into(),
            rows,
            cols,
            bound,
        }
    }
}

/// Draws every parameter from a single seeded stream in sorted-path order,
/// so initialization is independent of registration order. A non-positive
/// bound yields zeros.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    use rand::{Rng, SeedableRng};
    let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in sorted {
        if store.contains_key(&spec.path) {
            return Err(Error::Config(format!(
                "duplicate parameter path {:?}",
                spec.path
            )));
        }
        let data = (0..spec.rows * spec.cols)
            .map(|_| {
                if spec.bound > 0.0 {
                    rng.gen_range(-spec.bound..spec.bound)
                } else {
                    0.0
                }
            })
            .collect();
        store.insert(
            spec.path.clone(),
            Value {
                rows: spec.rows,
                cols: spec.cols,
                data,
            },
        );
    }
    Ok(store)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    params: ParamStore,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Writes parameters as JSON. f64 values round-trip bit-exactly.
pub fn save_params(path: &Path, params: &ParamStore) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        params: params.clone(),
    };
    serde_json::to_writer(BufWriter::new(file), &ck)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ck.version
        )));
    }
    for (path, v) in &ck.params {
        if v.rows * v.cols != v.data.len() {
            return Err(Error::Data(format!(
                "checkpoint entry {path:?} claims {}x{} but holds {} values",
                v.rows,
                v.cols,
                v.data.len()
            )));
        }
    }
    Ok(ck.params)
}
