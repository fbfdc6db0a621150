//! Gated recurrent units and the bidirectional encoder over utterance rows.
//!
//! Update rule, per step with input x and state h:
//!
//! ```text
//! z  = sigmoid(x Wz' + h Uz' + bz)
//! r  = sigmoid(x Wr' + h Ur' + br)
//! hc = tanh(x Wh' + (r .* h) Uh' + bh)
//! h' = (1 - z) .* h + z .* hc
//! ```
//!
//! so zeroed parameters halve the state each step, and a saturated update
//! gate hands the state over to the candidate entirely.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamSpec;
use crate::tape::{Tape, TensorId};

const GATE_NAMES: [&str; 9] = [
    "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h",
];

/// Parameter declarations for one direction; weights and biases share the
/// uniform(-1/sqrt(H), 1/sqrt(H)) init.
pub fn gru_param_specs(prefix: &str, input: usize, hidden: usize) -> Vec<ParamSpec> {
    let bound = 1.0 / (hidden as f64).sqrt();
    GATE_NAMES
        .iter()
        .map(|name| {
            let (rows, cols) = match *name {
                "w_z" | "w_r" | "w_h" => (hidden, input),
                "u_z" | "u_r" | "u_h" => (hidden, hidden),
                _ => (1, hidden),
            };
            ParamSpec::new(format!("{prefix}.{name}"), rows, cols, bound)
        })
        .collect()
}

/// Tape handles for one direction's nine parameter tensors.
#[derive(Clone, Copy, Debug)]
pub struct GruIds {
    pub w_z: TensorId,
    pub u_z: TensorId,
    pub b_z: TensorId,
    pub w_r: TensorId,
    pub u_r: TensorId,
    pub b_r: TensorId,
    pub w_h: TensorId,
    pub u_h: TensorId,
    pub b_h: TensorId,
}

impl GruIds {
    pub fn from_binding(binding: &BTreeMap<String, TensorId>, prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<TensorId> {
            let path = format!("{prefix}.{name}");
            binding
                .get(&path)
                .copied()
                .ok_or(Error::UnknownParam(path))
        };
        Ok(GruIds {
            w_z: get("w_z")?,
            u_z: get("u_z")?,
            b_z: get("b_z")?,
            w_r: get("w_r")?,
            u_r: get("u_r")?,
            b_r: get("b_r")?,
            w_h: get("w_h")?,
            u_h: get("u_h")?,
            b_h: get("b_h")?,
        })
    }
}

/// One step: x is 1xD, h is 1xH; returns the next 1xH state.
pub fn gru_cell(tape: &mut Tape, x: TensorId, h: TensorId, p: &GruIds) -> Result<TensorId> {
    let zx = tape.linear(x, p.w_z, Some(p.b_z))?;
    let zh = tape.linear(h, p.u_z, None)?;
    let zs = tape.add(zx, zh)?;
    let z = tape.sigmoid(zs);

    let rx = tape.linear(x, p.w_r, Some(p.b_r))?;
    let rh = tape.linear(h, p.u_r, None)?;
    let rs = tape.add(rx, rh)?;
    let r = tape.sigmoid(rs);

    let cx = tape.linear(x, p.w_h, Some(p.b_h))?;
    let gated = tape.mul(r, h)?;
    let ch = tape.linear(gated, p.u_h, None)?;
    let cs = tape.add(cx, ch)?;
    let hc = tape.tanh(cs);

    let keep = tape.one_minus(z);
    let kept = tape.mul(keep, h)?;
    let new = tape.mul(z, hc)?;
    tape.add(kept, new)
}

/// Runs the cell over the rows of `x` (NxD), zero initial state, optionally
/// in reverse row order. The output row t always corresponds to input row t.
pub fn gru_over_rows(
    tape: &mut Tape,
    x: TensorId,
    p: &GruIds,
    hidden: usize,
    reverse: bool,
) -> Result<TensorId> {
    let (n, _) = tape.shape(x);
    let mut h = tape.zeros(1, hidden);
    let mut states: Vec<TensorId> = Vec::with_capacity(n);
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for &t in &order {
        let xt = tape.gather_rows(x, &[t])?;
        h = gru_cell(tape, xt, h, p)?;
        states.push(h);
    }
    if reverse {
        states.reverse();
    }
    tape.concat_rows(&states)
}

/// Bidirectional encoding: forward and backward passes concatenated per row,
/// giving Nx2H.
pub fn bigru(
    tape: &mut Tape,
    x: TensorId,
    fwd: &GruIds,
    bwd: &GruIds,
    hidden: usize,
) -> Result<TensorId> {
    let f = gru_over_rows(tape, x, fwd, hidden, false)?;
    let b = gru_over_rows(tape, x, bwd, hidden, true)?;
    tape.concat_cols(&[f, b])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::{bind, init_params, read_grads, GradMap, ParamStore, Value};

    fn zero_store(prefix: &str, input: usize, hidden: usize) -> ParamStore {
        gru_param_specs(prefix, input, hidden)
            .into_iter()
            .map(|s| (s.path, Value::zeros(s.rows, s.cols)))
            .collect()
    }

    #[test]
    fn zero_parameters_halve_the_state() {
        let store = zero_store("g", 2, 2);
        let mut tape = Tape::new();
        let ids = bind(&mut tape, &store).unwrap();
        let p = GruIds::from_binding(&ids, "g").unwrap();
        let x = tape.leaf(1, 2, vec![3.0, -1.0], false).unwrap();
        let h = tape.leaf(1, 2, vec![0.4, -1.0], false).unwrap();
        let next = gru_cell(&mut tape, x, h, &p).unwrap();
        let got = tape.data(next);
        assert!((got[0] - 0.2).abs() < 1e-15);
        assert!((got[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_update_gate_hands_over_to_candidate() {
        // bz = +50 drives z to 1; with Wh = I and Uh = 0 the candidate is
        // tanh(x), so the next state must match it to high precision.
        let mut store = zero_store("g", 2, 2);
        store.insert("g.b_z".into(), Value::new(1, 2, vec![50.0, 50.0]).unwrap());
        store.insert(
            "g.w_h".into(),
            Value::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let ids = bind(&mut tape, &store).unwrap();
        let p = GruIds::from_binding(&ids, "g").unwrap();
        let x = tape.leaf(1, 2, vec![0.7, -0.3], false).unwrap();
        let h = tape.leaf(1, 2, vec![5.0, 5.0], false).unwrap();
        let next = gru_cell(&mut tape, x, h, &p).unwrap();
        let got = tape.data(next);
        assert!((got[0] - 0.7f64.tanh()).abs() < 1e-9);
        assert!((got[1] - (-0.3f64).tanh()).abs() < 1e-9);
    }

    #[test]
    fn random_cell_matches_scripted_gate_evaluation() {
        let store = init_params(&gru_param_specs("g", 3, 3), 17).unwrap();
        let xs = [0.3, -0.8, 1.1];
        let hs = [0.2, 0.9, -0.4];

        // Evaluate the three gate formulas directly from the stored values.
        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
        let affine = |w: &Value, u: &Value, b: &Value, hvec: &[f64]| -> Vec<f64> {
            (0..3)
                .map(|i| {
                    let mut s = b.data[i];
                    for j in 0..3 {
                        s += w.data[i * 3 + j] * xs[j] + u.data[i * 3 + j] * hvec[j];
                    }
                    s
                })
                .collect()
        };
        let z: Vec<f64> = affine(&store["g.w_z"], &store["g.u_z"], &store["g.b_z"], &hs)
            .into_iter()
            .map(sigma)
            .collect();
        let r: Vec<f64> = affine(&store["g.w_r"], &store["g.u_r"], &store["g.b_r"], &hs)
            .into_iter()
            .map(sigma)
            .collect();
        let rh: Vec<f64> = (0..3).map(|i| r[i] * hs[i]).collect();
        let hc: Vec<f64> = affine(&store["g.w_h"], &store["g.u_h"], &store["g.b_h"], &rh)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let want: Vec<f64> = (0..3).map(|i| (1.0 - z[i]) * hs[i] + z[i] * hc[i]).collect();

        let mut tape = Tape::new();
        let ids = bind(&mut tape, &store).unwrap();
        let p = GruIds::from_binding(&ids, "g").unwrap();
        let x = tape.leaf(1, 3, xs.to_vec(), false).unwrap();
        let h = tape.leaf(1, 3, hs.to_vec(), false).unwrap();
        let next = gru_cell(&mut tape, x, h, &p).unwrap();
        for (got, want) in tape.data(next).iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn states_stay_in_unit_interval_from_zero_start() {
        let store = init_params(&gru_param_specs("g", 2, 4), 23).unwrap();
        let mut tape = Tape::new();
        let ids = bind(&mut tape, &store).unwrap();
        let p = GruIds::from_binding(&ids, "g").unwrap();
        let big = vec![10.0, -40.0, 25.0, -3.0, 0.0, 100.0, -7.0, 8.0, 1.0, -1.0, 50.0, -50.0];
        let x = tape.leaf(6, 2, big, false).unwrap();
        let states = gru_over_rows(&mut tape, x, &p, 4, false).unwrap();
        for &v in tape.data(states) {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn reversed_input_with_swapped_directions_mirrors_the_output() {
        let specs: Vec<ParamSpec> = gru_param_specs("f", 2, 3)
            .into_iter()
            .chain(gru_param_specs("b", 2, 3))
            .collect();
        let store = init_params(&specs, 29).unwrap();
        let xs = vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let rev: Vec<f64> = vec![0.5, -0.6, -0.3, 0.4, 0.1, 0.2];

        let run = |data: &[f64], fwd_prefix: &str, bwd_prefix: &str| -> Vec<f64> {
            let mut tape = Tape::new();
            let ids = bind(&mut tape, &store).unwrap();
            let f = GruIds::from_binding(&ids, fwd_prefix).unwrap();
            let b = GruIds::from_binding(&ids, bwd_prefix).unwrap();
            let x = tape.leaf(3, 2, data.to_vec(), false).unwrap();
            let g = bigru(&mut tape, x, &f, &b, 3).unwrap();
            tape.data(g).to_vec()
        };

        let straight = run(&xs, "f", "b");
        let mirrored = run(&rev, "b", "f");
        // Row t of the straight run equals row N-1-t of the mirrored run
        // with its forward/backward halves swapped.
        for t in 0..3 {
            let m = 2 - t;
            assert_eq!(&straight[t * 6..t * 6 + 3], &mirrored[m * 6 + 3..m * 6 + 6]);
            assert_eq!(&straight[t * 6 + 3..t * 6 + 6], &mirrored[m * 6..m * 6 + 3]);
        }
    }

    #[test]
    fn directions_see_only_their_side_of_the_sequence() {
        let specs: Vec<ParamSpec> = gru_param_specs("f", 2, 3)
            .into_iter()
            .chain(gru_param_specs("b", 2, 3))
            .collect();
        let store = init_params(&specs, 5).unwrap();
        let run = |xs: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let ids = bind(&mut tape, &store).unwrap();
            let f = GruIds::from_binding(&ids, "f").unwrap();
            let b = GruIds::from_binding(&ids, "b").unwrap();
            let x = tape.leaf(4, 2, xs.to_vec(), false).unwrap();
            let fwd = gru_over_rows(&mut tape, x, &f, 3, false).unwrap();
            let bwd = gru_over_rows(&mut tape, x, &b, 3, true).unwrap();
            (tape.data(fwd).to_vec(), tape.data(bwd).to_vec())
        };
        let base = vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8];
        let (f1, b1) = run(&base);

        let mut tail_changed = base.clone();
        tail_changed[6] = 9.0;
        let (f2, b2) = run(&tail_changed);
        // A change at the last row leaves earlier forward states untouched
        // but reaches every backward state.
        assert_eq!(&f1[0..9], &f2[0..9]);
        assert_ne!(&f1[9..12], &f2[9..12]);
        assert_ne!(&b1[0..3], &b2[0..3]);

        let mut head_changed = base;
        head_changed[0] = 9.0;
        let (f3, b3) = run(&head_changed);
        // And symmetrically for a change at the first row.
        assert_eq!(&b1[3..12], &b3[3..12]);
        assert_ne!(&b1[0..3], &b3[0..3]);
        assert_ne!(&f1[9..12], &f3[9..12]);
    }

    #[test]
    fn bigru_shape_and_gradients() {
        let specs: Vec<ParamSpec> = gru_param_specs("gru.fwd", 2, 2)
            .into_iter()
            .chain(gru_param_specs("gru.bwd", 2, 2))
            .collect();
        let store = init_params(&specs, 11).unwrap();
        let xs = vec![0.5, -0.2, 0.1, 0.9, -0.7, 0.3];
        let weights: Vec<f64> = (0..12).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();

        let loss = |params: &ParamStore| -> Result<(f64, GradMap)> {
            let mut tape = Tape::new();
            let ids = bind(&mut tape, params)?;
            let f = GruIds::from_binding(&ids, "gru.fwd")?;
            let b = GruIds::from_binding(&ids, "gru.bwd")?;
            let x = tape.leaf(3, 2, xs.clone(), false)?;
            let g = bigru(&mut tape, x, &f, &b, 2)?;
            assert_eq!(tape.shape(g), (3, 4));
            let w = tape.leaf(3, 4, weights.clone(), false)?;
            let prod = tape.mul(g, w)?;
            let l = tape.sum_all(prod);
            tape.backward(l)?;
            Ok((tape.scalar(l), read_grads(&tape, &ids, params)))
        };

        let report = grad_check(&store, 1e-5, loss).unwrap();
        let total: usize = store.values().map(|v| v.data.len()).sum();
        assert_eq!(report.entries_checked, total);
        assert!(
            report.max_rel_err < 1e-6,
            "worst {}[{}]: {} vs {}",
            report.worst_path,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }
}
