//! Final stage: similarity attention over the whole conversation pools the
//! per-utterance vectors, and a small fully connected network produces class
//! logits or regression values.
//!
//! ```text
//! score_ij = h_i' W_beta h_j      beta_i = softmax(score_i.)
//! pooled_i = sum_j beta_ij h_j    out_i  = W_out ReLU(W_l pooled_i + b_l) + b_out
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamSpec;
use crate::tape::{Tape, TensorId};

/// Declarations under the `cls.` prefix; `out` is the class count or the
/// regression attribute count.
pub fn classifier_param_specs(h_dim: usize, hidden: usize, out: usize) -> Vec<ParamSpec> {
    let bh = 1.0 / (h_dim as f64).sqrt();
    let bo = 1.0 / (hidden as f64).sqrt();
    vec![
        ParamSpec::new("cls.w_beta", h_dim, h_dim, bh),
        ParamSpec::new("cls.w_l", hidden, h_dim, bh),
        ParamSpec::new("cls.b_l", 1, hidden, 0.0),
        ParamSpec::new("cls.w_out", out, hidden, bo),
        ParamSpec::new("cls.b_out", 1, out, 0.0),
    ]
}

pub struct ClassifierIds {
    pub w_beta: TensorId,
    pub w_l: TensorId,
    pub b_l: TensorId,
    pub w_out: TensorId,
    pub b_out: TensorId,
}

impl ClassifierIds {
    pub fn from_binding(binding: &BTreeMap<String, TensorId>) -> Result<Self> {
        let get = |path: &str| -> Result<TensorId> {
            binding
                .get(path)
                .copied()
                .ok_or_else(|| Error::UnknownParam(path.into()))
        };
        Ok(ClassifierIds {
            w_beta: get("cls.w_beta")?,
            w_l: get("cls.w_l")?,
            b_l: get("cls.b_l")?,
            w_out: get("cls.w_out")?,
            b_out: get("cls.b_out")?,
        })
    }
}

/// Attention over all N rows of `h`; returns (pooled rows, beta matrix).
pub fn attend_pool(
    tape: &mut Tape,
    h: TensorId,
    w_beta: TensorId,
) -> Result<(TensorId, TensorId)> {
    let proj = tape.matmul(h, w_beta)?;
    let ht = tape.transpose(h);
    let scores = tape.matmul(proj, ht)?;
    let beta = tape.softmax_rows(scores)?;
    let pooled = tape.matmul(beta, h)?;
    Ok((pooled, beta))
}

/// Hidden ReLU layer plus the output projection; logits for classification,
/// raw values for regression.
pub fn output_head(tape: &mut Tape, pooled: TensorId, ids: &ClassifierIds) -> Result<TensorId> {
    let lin = tape.linear(pooled, ids.w_l, Some(ids.b_l))?;
    let act = tape.relu(lin);
    tape.linear(act, ids.w_out, Some(ids.b_out))
}

/// Lowest-index argmax per row.
pub fn argmax_rows(data: &[f64], cols: usize) -> Vec<usize> {
    data.chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::{bind, init_params, read_grads, GradMap, ParamStore, Value};

    fn run_pool(h_data: &[f64], n: usize, d: usize, w: &Value) -> (Vec<f64>, Vec<f64>) {
        let mut store = ParamStore::new();
        store.insert("cls.w_beta".into(), w.clone());
        let mut tape = Tape::new();
        let binding = bind(&mut tape, &store).unwrap();
        let h = tape.leaf(n, d, h_data.to_vec(), false).unwrap();
        let (pooled, beta) = attend_pool(&mut tape, h, binding["cls.w_beta"]).unwrap();
        (tape.data(pooled).to_vec(), tape.data(beta).to_vec())
    }

    #[test]
    fn single_row_pools_to_itself() {
        let w = Value::new(2, 2, vec![0.3, -1.0, 0.5, 2.0]).unwrap();
        let (pooled, beta) = run_pool(&[0.7, -0.2], 1, 2, &w);
        assert_eq!(beta, vec![1.0]);
        assert_eq!(pooled, vec![0.7, -0.2]);
    }

    #[test]
    fn zero_attention_matrix_averages_everything() {
        let h = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let (pooled, beta) = run_pool(&h, 3, 2, &Value::zeros(2, 2));
        for &b in &beta {
            assert!((b - 1.0 / 3.0).abs() < 1e-15);
        }
        for row in 0..3 {
            assert!((pooled[row * 2] - 3.0).abs() < 1e-12);
            assert!((pooled[row * 2 + 1] - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_pool_matches_scripted_evaluation() {
        let n = 3;
        let d = 2;
        let h = [0.2, -0.7, 1.1, 0.4, -0.3, 0.9];
        let w = Value::new(2, 2, vec![0.6, -0.2, 0.8, 0.1]).unwrap();

        // Direct evaluation: scores, row softmax, weighted sums.
        let mut want_beta = vec![0.0; n * n];
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                for a in 0..d {
                    for b in 0..d {
                        scores[j] += h[i * d + a] * w.data[a * d + b] * h[j * d + b];
                    }
                }
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..n {
                want_beta[i * n + j] = exps[j] / z;
            }
        }
        let mut want_pool = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..n {
                for a in 0..d {
                    want_pool[i * d + a] += want_beta[i * n + j] * h[j * d + a];
                }
            }
        }

        let (pooled, beta) = run_pool(&h, n, d, &w);
        for (g, w) in beta.iter().zip(&want_beta) {
            assert!((g - w).abs() < 1e-12);
        }
        for (g, w) in pooled.iter().zip(&want_pool) {
            assert!((g - w).abs() < 1e-12);
        }
        for i in 0..n {
            let s: f64 = beta[i * n..(i + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(beta[i * n..(i + 1) * n].iter().all(|&b| b >= 0.0));
        }
    }

    fn head_output(store: &ParamStore, pooled_data: &[f64], n: usize, d: usize) -> Vec<f64> {
        let mut tape = Tape::new();
        let binding = bind(&mut tape, store).unwrap();
        let ids = ClassifierIds::from_binding(&binding).unwrap();
        let pooled = tape.leaf(n, d, pooled_data.to_vec(), false).unwrap();
        let out = output_head(&mut tape, pooled, &ids).unwrap();
        tape.data(out).to_vec()
    }

    fn zero_head(h_dim: usize, hidden: usize, out: usize) -> ParamStore {
        classifier_param_specs(h_dim, hidden, out)
            .iter()
            .map(|s| (s.path.clone(), Value::zeros(s.rows, s.cols)))
            .collect()
    }

    #[test]
    fn zero_head_is_uniform_and_ties_break_low() {
        let store = zero_head(2, 3, 6);
        let logits = head_output(&store, &[0.4, -0.9], 1, 2);
        assert_eq!(logits, vec![0.0; 6]);
        // Uniform probabilities, argmax 0 by the lowest-index rule.
        let mut tape = Tape::new();
        let l = tape.leaf(1, 6, logits.clone(), false).unwrap();
        let p = tape.softmax_rows(l).unwrap();
        for &v in tape.data(p) {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(argmax_rows(&logits, 6), vec![0]);
    }

    #[test]
    fn saturated_bias_dominates() {
        let mut store = zero_head(2, 3, 4);
        store.insert(
            "cls.b_out".into(),
            Value::new(1, 4, vec![10.0, 0.0, 0.0, 0.0]).unwrap(),
        );
        let logits = head_output(&store, &[1.0, 1.0], 1, 2);
        let mut tape = Tape::new();
        let l = tape.leaf(1, 4, logits.clone(), false).unwrap();
        let p = tape.softmax_rows(l).unwrap();
        assert!(tape.data(p)[0] > 0.99);
        assert_eq!(argmax_rows(&logits, 4), vec![0]);
    }

    #[test]
    fn shifting_every_logit_keeps_the_argmax() {
        let logits = vec![0.3, -0.7, 1.9, 0.2, 5.5, -2.0, 0.0, 1.0];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.45).collect();
        assert_eq!(argmax_rows(&logits, 4), argmax_rows(&shifted, 4));
    }

    #[test]
    fn zero_params_regress_to_output_bias() {
        let mut store = zero_head(3, 2, 4);
        store.insert(
            "cls.b_out".into(),
            Value::new(1, 4, vec![0.1, -0.2, 0.3, -0.4]).unwrap(),
        );
        let out = head_output(&store, &[1.0, 2.0, 3.0, -1.0, -2.0, -3.0], 2, 3);
        assert_eq!(out, vec![0.1, -0.2, 0.3, -0.4, 0.1, -0.2, 0.3, -0.4]);
    }

    #[test]
    fn random_head_matches_scripted_evaluation() {
        let store = init_params(&classifier_param_specs(2, 3, 2), 71).unwrap();
        let pooled = [0.5, -1.2];
        let got = head_output(&store, &pooled, 1, 2);

        let wl = &store["cls.w_l"];
        let bl = &store["cls.b_l"];
        let wo = &store["cls.w_out"];
        let bo = &store["cls.b_out"];
        let mut hid = [0.0f64; 3];
        for o in 0..3 {
            hid[o] = (bl.data[o] + wl.data[o * 2] * pooled[0] + wl.data[o * 2 + 1] * pooled[1])
                .max(0.0);
        }
        for k in 0..2 {
            let mut s = bo.data[k];
            for o in 0..3 {
                s += wo.data[k * 3 + o] * hid[o];
            }
            assert!((got[k] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_through_pool_and_head() {
        let mut specs = classifier_param_specs(3, 3, 2);
        specs.push(ParamSpec::new("h", 4, 3, 0.9));
        let store = init_params(&specs, 81).unwrap();

        let loss = |params: &ParamStore| -> Result<(f64, GradMap)> {
            let mut tape = Tape::new();
            let binding = bind(&mut tape, params)?;
            let ids = ClassifierIds::from_binding(&binding)?;
            let (pooled, _) = attend_pool(&mut tape, binding["h"], ids.w_beta)?;
            let logits = output_head(&mut tape, pooled, &ids)?;
            let logp = tape.log_softmax_rows(logits)?;
            let picked = tape.pick_per_row(logp, &[0, 1, 1, 0])?;
            let s = tape.sum_all(picked);
            let l = tape.neg(s);
            tape.backward(l)?;
            Ok((tape.scalar(l), read_grads(&tape, &binding, params)))
        };

        let report = grad_check(&store, 1e-5, loss).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "worst {}[{}]: {} vs {}",
            report.worst_path,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }
}
