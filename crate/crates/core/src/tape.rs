//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is two-dimensional (vectors are 1xN rows, scalars 1x1) and
//! lives on a [`Tape`]: an append-only record of operations. `backward`
//! replays the record in reverse and accumulates gradients additively into
//! every leaf created with `requires_grad = true`. A tape is single-threaded;
//! data parallelism happens one tape per dialogue with an ordered reduction
//! of the resulting gradient maps.

use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorId(pub(crate) usize);

enum Op {
    Leaf,
    /// b broadcasts over rows when it is 1xC.
    Add { a: TensorId, b: TensorId, broadcast: bool },
    Sub { a: TensorId, b: TensorId },
    Neg { a: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    ScaleRows { a: TensorId, s: TensorId },
    ScaleScalar { a: TensorId, s: TensorId },
    OneMinus { a: TensorId },
    Sigmoid { a: TensorId },
    Tanh { a: TensorId },
    Relu { a: TensorId },
    Abs { a: TensorId },
    SoftmaxRows { a: TensorId },
    /// Backward reuses the softmax rule: masked entries have output 0.
    MaskedSoftmaxRows { a: TensorId },
    LogSoftmaxRows { a: TensorId },
    ConcatCols { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    Linear { x: TensorId, w: TensorId, b: Option<TensorId> },
    MatMul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    GatherRows { x: TensorId, idx: Vec<usize> },
    ScatterAddRows { src: TensorId, idx: Vec<usize> },
    Windows { x: TensorId, width: usize },
    MaxPoolRows { x: TensorId, argmax: Vec<usize> },
    MaxOverRows { x: TensorId, argmax: Vec<usize> },
    PickPerRow { x: TensorId, idx: Vec<usize> },
    TakeDiag { a: TensorId },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    SqL2 { a: TensorId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Neg { .. } => "neg",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ScaleRows { .. } => "scale_rows",
            Op::ScaleScalar { .. } => "scale_scalar",
            Op::OneMinus { .. } => "one_minus",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Abs { .. } => "abs",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::MaskedSoftmaxRows { .. } => "masked_softmax_rows",
            Op::LogSoftmaxRows { .. } => "log_softmax_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::Windows { .. } => "windows",
            Op::MaxPoolRows { .. } => "max_pool_rows",
            Op::MaxOverRows { .. } => "max_over_rows",
            Op::PickPerRow { .. } => "pick_per_row",
            Op::TakeDiag { .. } => "take_diag",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::SqL2 { .. } => "sq_l2",
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Accumulated gradient; allocated on demand, leaves only.
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * m..(kk + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    if a != 0.0 {
        for (yv, &xv) in y.iter_mut().zip(x) {
            *yv += a * xv;
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Value of a 1x1 tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        self.nodes[id.0].data[0]
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                lhs: (rows, cols),
                rhs: (1, data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(rows, cols, data, requires_grad, Op::Leaf))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> TensorId {
        self.push(rows, cols, vec![0.0; rows * cols], false, Op::Leaf)
    }

    fn shape_err(&self, op: &'static str, a: TensorId, b: TensorId) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a),
            rhs: self.shape(b),
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let broadcast = br == 1 && ar != 1;
        if ac != bc || (!broadcast && ar != br) {
            return Err(self.shape_err("add", a, b));
        }
        let mut data = self.nodes[a.0].data.clone();
        let bd = &self.nodes[b.0].data;
        if broadcast {
            for r in 0..ar {
                for c in 0..ac {
                    data[r * ac + c] += bd[c];
                }
            }
        } else {
            for (d, &bv) in data.iter_mut().zip(bd) {
                *d += bv;
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(ar, ac, data, rg, Op::Add { a, b, broadcast }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", a, b));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(r, c, data, rg, Op::Sub { a, b }))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| -x).collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a);
        self.push(r, c, data, rg, Op::Neg { a })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(r, c, data, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let (r, cc) = self.shape(a);
        let rg = self.requires(a);
        self.push(r, cc, data, rg, Op::Scale { a, c })
    }

    /// Multiplies row i of `a` by `s[i]`; `s` must be Nx1.
    pub fn scale_rows(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (sr, sc) = self.shape(s);
        if sc != 1 || sr != ar {
            return Err(self.shape_err("scale_rows", a, s));
        }
        let sd = &self.nodes[s.0].data;
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..ar {
            let f = sd[r];
            for v in &mut data[r * ac..(r + 1) * ac] {
                *v *= f;
            }
        }
        let rg = self.requires(a) || self.requires(s);
        Ok(self.push(ar, ac, data, rg, Op::ScaleRows { a, s }))
    }

    /// Multiplies every entry of `a` by the 1x1 tensor `s`.
    pub fn scale_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.shape(s) != (1, 1) {
            return Err(self.shape_err("scale_scalar", a, s));
        }
        let f = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * f).collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a) || self.requires(s);
        Ok(self.push(r, c, data, rg, Op::ScaleScalar { a, s }))
    }

    pub fn one_minus(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| 1.0 - x).collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a);
        self.push(r, c, data, rg, Op::OneMinus { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a);
        self.push(r, c, data, rg, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a);
        self.push(r, c, data, rg, Op::Tanh { a })
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a);
        self.push(r, c, data, rg, Op::Relu { a })
    }

    /// Subgradient at 0 is 0.
    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.abs()).collect();
        let (r, c) = self.shape(a);
        let rg = self.requires(a);
        self.push(r, c, data, rg, Op::Abs { a })
    }

    fn softmax_row(row: &mut [f64]) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    /// Row-wise softmax over the last axis, max-subtracted for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let (r, c) = self.shape(a);
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(c) {
            Self::softmax_row(row);
        }
        let rg = self.requires(a);
        Ok(self.push(r, c, data, rg, Op::SoftmaxRows { a }))
    }

    /// Softmax per row restricted to entries where `mask` is true; masked-out
    /// entries are exactly zero. Rows with an empty mask come out all-zero.
    pub fn masked_softmax_rows(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(Error::Shape {
                op: "masked_softmax_rows",
                lhs: (r, c),
                rhs: (1, mask.len()),
            });
        }
        let src = &self.nodes[a.0].data;
        if src
            .iter()
            .zip(mask)
            .any(|(v, &m)| m && !v.is_finite())
        {
            return Err(Error::NonFinite {
                op: "masked_softmax_rows",
            });
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let lo = i * c;
            let mx = (0..c)
                .filter(|&j| mask[lo + j])
                .map(|j| src[lo + j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..c {
                if mask[lo + j] {
                    let e = (src[lo + j] - mx).exp();
                    data[lo + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                data[lo + j] /= sum;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(r, c, data, rg, Op::MaskedSoftmaxRows { a }))
    }

    /// Row-wise log-softmax, max-subtracted.
    pub fn log_softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "log_softmax_rows",
            });
        }
        let (r, c) = self.shape(a);
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(r, c, data, rg, Op::LogSoftmaxRows { a }))
    }

    /// Concatenates along columns; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_cols of zero tensors".into()));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            cols += c;
        }
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            let pd = &self.nodes[p.0].data;
            for r in 0..rows {
                data[r * cols + off..r * cols + off + c].copy_from_slice(&pd[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(rows, cols, data, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Concatenates along rows; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_rows of zero tensors".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(rows, cols, data, rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// y = x wᵀ + b with x: NxI, w: OxI, b: 1xO.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let (n, i) = self.shape(x);
        let (o, wi) = self.shape(w);
        if wi != i {
            return Err(self.shape_err("linear", x, w));
        }
        if let Some(b) = b {
            if self.shape(b) != (1, o) {
                return Err(self.shape_err("linear", w, b));
            }
        }
        let mut data = vec![0.0; n * o];
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            for r in 0..n {
                let xrow = &xd[r * i..(r + 1) * i];
                let orow = &mut data[r * o..(r + 1) * o];
                for p in 0..o {
                    let wrow = &wd[p * i..(p + 1) * i];
                    let mut acc = 0.0;
                    for (xv, wv) in xrow.iter().zip(wrow) {
                        acc += xv * wv;
                    }
                    orow[p] = acc;
                }
            }
            if let Some(b) = b {
                let bd = &self.nodes[b.0].data;
                for r in 0..n {
                    for p in 0..o {
                        data[r * o + p] += bd[p];
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || b.map_or(false, |b| self.requires(b));
        Ok(self.push(n, o, data, rg, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut data = vec![0.0; n * m];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, n, k, m, &mut data);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(n, m, data, rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let ad = &self.nodes[a.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ad[i * c + j];
            }
        }
        let rg = self.requires(a);
        self.push(c, r, data, rg, Op::Transpose { a })
    }

    /// Row lookup: out[k] = x[idx[k]]. Doubles as embedding lookup.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (n, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Data(format!(
                "gather_rows: row index {bad} out of range for {n} rows"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.requires(x);
        Ok(self.push(idx.len(), c, data, rg, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// out has `rows` rows; out[idx[k]] += src[k].
    pub fn scatter_add_rows(&mut self, src: TensorId, idx: &[usize], rows: usize) -> Result<TensorId> {
        let (n, c) = self.shape(src);
        if idx.len() != n {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: (n, c),
                rhs: (1, idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!(
                "scatter_add_rows: row index {bad} out of range for {rows} rows"
            )));
        }
        let sd = &self.nodes[src.0].data;
        let mut data = vec![0.0; rows * c];
        for (k, &i) in idx.iter().enumerate() {
            axpy(&mut data[i * c..(i + 1) * c], 1.0, &sd[k * c..(k + 1) * c]);
        }
        let rg = self.requires(src);
        Ok(self.push(rows, c, data, rg, Op::ScatterAddRows { src, idx: idx.to_vec() }))
    }

    /// Sliding windows over rows: x TxD becomes (T-w+1) x (w*D), each output
    /// row the concatenation of w consecutive input rows.
    pub fn windows(&mut self, x: TensorId, width: usize) -> Result<TensorId> {
        let (t, d) = self.shape(x);
        if width == 0 || width > t {
            return Err(Error::Shape {
                op: "windows",
                lhs: (t, d),
                rhs: (width, d),
            });
        }
        let out_rows = t - width + 1;
        let xd = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(out_rows * width * d);
        for r in 0..out_rows {
            data.extend_from_slice(&xd[r * d..(r + width) * d]);
        }
        let rg = self.requires(x);
        Ok(self.push(out_rows, width * d, data, rg, Op::Windows { x, width }))
    }

    /// 1-D max-pooling down the rows, per column. When fewer than `window`
    /// rows exist the single output row is the max over all of them. Ties take
    /// the first (lowest) row index.
    pub fn max_pool_rows(&mut self, x: TensorId, window: usize, stride: usize) -> Result<TensorId> {
        let (t, m) = self.shape(x);
        if window == 0 || stride == 0 || t == 0 {
            return Err(Error::Shape {
                op: "max_pool_rows",
                lhs: (t, m),
                rhs: (window, stride),
            });
        }
        let out_rows = if t <= window { 1 } else { (t - window) / stride + 1 };
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; out_rows * m];
        let mut argmax = vec![0usize; out_rows * m];
        for o in 0..out_rows {
            let lo = o * stride;
            let hi = (lo + window).min(t);
            for c in 0..m {
                let mut best = f64::NEG_INFINITY;
                let mut arg = lo;
                for r in lo..hi {
                    let v = xd[r * m + c];
                    if v > best {
                        best = v;
                        arg = r;
                    }
                }
                data[o * m + c] = best;
                argmax[o * m + c] = arg;
            }
        }
        let rg = self.requires(x);
        Ok(self.push(out_rows, m, data, rg, Op::MaxPoolRows { x, argmax }))
    }

    /// Column-wise max over all rows, 1xM output. Ties take the first row.
    pub fn max_over_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (t, m) = self.shape(x);
        if t == 0 {
            return Err(Error::Shape {
                op: "max_over_rows",
                lhs: (t, m),
                rhs: (1, m),
            });
        }
        let xd = &self.nodes[x.0].data;
        let mut data = vec![f64::NEG_INFINITY; m];
        let mut argmax = vec![0usize; m];
        for r in 0..t {
            for c in 0..m {
                let v = xd[r * m + c];
                if v > data[c] {
                    data[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(1, m, data, rg, Op::MaxOverRows { x, argmax }))
    }

    /// out[i] = x[i, idx[i]], Nx1. Used to pick per-row label entries.
    pub fn pick_per_row(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (n, c) = self.shape(x);
        if idx.len() != n {
            return Err(Error::Shape {
                op: "pick_per_row",
                lhs: (n, c),
                rhs: (1, idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Data(format!(
                "pick_per_row: column {bad} out of range for {c} columns"
            )));
        }
        let xd = &self.nodes[x.0].data;
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xd[i * c + j]).collect();
        let rg = self.requires(x);
        Ok(self.push(n, 1, data, rg, Op::PickPerRow { x, idx: idx.to_vec() }))
    }

    /// Diagonal of a square matrix as Nx1.
    pub fn take_diag(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::Shape {
                op: "take_diag",
                lhs: (r, c),
                rhs: (r, r),
            });
        }
        let ad = &self.nodes[a.0].data;
        let data: Vec<f64> = (0..r).map(|i| ad[i * c + i]).collect();
        let rg = self.requires(a);
        Ok(self.push(r, 1, data, rg, Op::TakeDiag { a }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.requires(a);
        self.push(1, 1, vec![s], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.requires(a);
        self.push(1, 1, vec![s / n], rg, Op::MeanAll { a })
    }

    /// Squared L2 norm: sum of squares of all entries.
    pub fn sq_l2(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().map(|&v| v * v).sum();
        let rg = self.requires(a);
        self.push(1, 1, vec![s], rg, Op::SqL2 { a })
    }

    /// Reverse pass from a scalar loss. Interior gradients are scratch;
    /// leaf gradients accumulate, so calling backward twice doubles them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(Error::NonScalarLoss { shape: (r, c) });
        }
        let mut scratch: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match scratch[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Split borrows: an op only references earlier nodes.
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            let cols = node.cols;
            if matches!(node.op, Op::Leaf) {
                let acc = node.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, &gv) in acc.iter_mut().zip(&g) {
                    *a += gv;
                }
                continue;
            }
            let node = &tail[0];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add { a, b, broadcast } => {
                    if head[a.0].requires_grad {
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        axpy(s, 1.0, &g);
                    }
                    if head[b.0].requires_grad {
                        let blen = head[b.0].rows * head[b.0].cols;
                        let s = scratch[b.0].get_or_insert_with(|| vec![0.0; blen]);
                        if *broadcast {
                            for (k, &gv) in g.iter().enumerate() {
                                s[k % cols] += gv;
                            }
                        } else {
                            axpy(s, 1.0, &g);
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if head[a.0].requires_grad {
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        axpy(s, 1.0, &g);
                    }
                    if head[b.0].requires_grad {
                        let s = scratch[b.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        axpy(s, -1.0, &g);
                    }
                }
                Op::Neg { a } | Op::OneMinus { a } => {
                    if head[a.0].requires_grad {
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        axpy(s, -1.0, &g);
                    }
                }
                Op::Mul { a, b } => {
                    if head[a.0].requires_grad {
                        let bd = &head[b.0].data;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for k in 0..g.len() {
                            s[k] += g[k] * bd[k];
                        }
                    }
                    if head[b.0].requires_grad {
                        let ad = &head[a.0].data;
                        let s = scratch[b.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for k in 0..g.len() {
                            s[k] += g[k] * ad[k];
                        }
                    }
                }
                Op::Scale { a, c } => {
                    if head[a.0].requires_grad {
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        axpy(s, *c, &g);
                    }
                }
                Op::ScaleRows { a, s: sid } => {
                    let rows = node.rows;
                    if head[a.0].requires_grad {
                        let sd = &head[sid.0].data;
                        let sa = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for r in 0..rows {
                            axpy(&mut sa[r * cols..(r + 1) * cols], sd[r], &g[r * cols..(r + 1) * cols]);
                        }
                    }
                    if head[sid.0].requires_grad {
                        let ad = &head[a.0].data;
                        let ss = scratch[sid.0].get_or_insert_with(|| vec![0.0; rows]);
                        for r in 0..rows {
                            let mut acc = 0.0;
                            for k in 0..cols {
                                acc += g[r * cols + k] * ad[r * cols + k];
                            }
                            ss[r] += acc;
                        }
                    }
                }
                Op::ScaleScalar { a, s: sid } => {
                    if head[a.0].requires_grad {
                        let f = head[sid.0].data[0];
                        let sa = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        axpy(sa, f, &g);
                    }
                    if head[sid.0].requires_grad {
                        let ad = &head[a.0].data;
                        let mut acc = 0.0;
                        for (gv, av) in g.iter().zip(ad) {
                            acc += gv * av;
                        }
                        let ss = scratch[sid.0].get_or_insert_with(|| vec![0.0; 1]);
                        ss[0] += acc;
                    }
                }
                Op::Sigmoid { a } => {
                    if head[a.0].requires_grad {
                        let y = &node.data;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for k in 0..g.len() {
                            s[k] += g[k] * y[k] * (1.0 - y[k]);
                        }
                    }
                }
                Op::Tanh { a } => {
                    if head[a.0].requires_grad {
                        let y = &node.data;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for k in 0..g.len() {
                            s[k] += g[k] * (1.0 - y[k] * y[k]);
                        }
                    }
                }
                Op::Relu { a } => {
                    if head[a.0].requires_grad {
                        let xd = &head[a.0].data;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for k in 0..g.len() {
                            if xd[k] > 0.0 {
                                s[k] += g[k];
                            }
                        }
                    }
                }
                Op::Abs { a } => {
                    if head[a.0].requires_grad {
                        let xd = &head[a.0].data;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for k in 0..g.len() {
                            s[k] += g[k] * if xd[k] > 0.0 { 1.0 } else if xd[k] < 0.0 { -1.0 } else { 0.0 };
                        }
                    }
                }
                Op::SoftmaxRows { a } | Op::MaskedSoftmaxRows { a } => {
                    // Masked entries have y = 0, so the shared formula covers both.
                    if head[a.0].requires_grad {
                        let y = &node.data;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for r in 0..node.rows {
                            let lo = r * cols;
                            let mut dot = 0.0;
                            for k in 0..cols {
                                dot += g[lo + k] * y[lo + k];
                            }
                            for k in 0..cols {
                                s[lo + k] += y[lo + k] * (g[lo + k] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows { a } => {
                    if head[a.0].requires_grad {
                        let y = &node.data;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; g.len()]);
                        for r in 0..node.rows {
                            let lo = r * cols;
                            let gsum: f64 = g[lo..lo + cols].iter().sum();
                            for k in 0..cols {
                                s[lo + k] += g[lo + k] - y[lo + k].exp() * gsum;
                            }
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let rows = node.rows;
                    let mut off = 0;
                    for &p in parts {
                        let pc = head[p.0].cols;
                        if head[p.0].requires_grad {
                            let plen = head[p.0].rows * pc;
                            let s = scratch[p.0].get_or_insert_with(|| vec![0.0; plen]);
                            for r in 0..rows {
                                axpy(
                                    &mut s[r * pc..(r + 1) * pc],
                                    1.0,
                                    &g[r * cols + off..r * cols + off + pc],
                                );
                            }
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let plen = head[p.0].rows * head[p.0].cols;
                        if head[p.0].requires_grad {
                            let s = scratch[p.0].get_or_insert_with(|| vec![0.0; plen]);
                            axpy(s, 1.0, &g[off..off + plen]);
                        }
                        off += plen;
                    }
                }
                Op::Linear { x, w, b } => {
                    let n = node.rows;
                    let o = cols;
                    let i2 = head[w.0].cols;
                    if head[x.0].requires_grad {
                        let wd = &head[w.0].data;
                        let s = scratch[x.0].get_or_insert_with(|| vec![0.0; n * i2]);
                        // dx = g · w
                        matmul_raw(&g, wd, n, o, i2, s);
                    }
                    if head[w.0].requires_grad {
                        let xd = &head[x.0].data;
                        let s = scratch[w.0].get_or_insert_with(|| vec![0.0; o * i2]);
                        // dw = gᵀ · x
                        for r in 0..n {
                            for p in 0..o {
                                axpy(&mut s[p * i2..(p + 1) * i2], g[r * o + p], &xd[r * i2..(r + 1) * i2]);
                            }
                        }
                    }
                    if let Some(b) = b {
                        if head[b.0].requires_grad {
                            let s = scratch[b.0].get_or_insert_with(|| vec![0.0; o]);
                            for r in 0..n {
                                axpy(s, 1.0, &g[r * o..(r + 1) * o]);
                            }
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let n = node.rows;
                    let m = cols;
                    let k = head[a.0].cols;
                    if head[a.0].requires_grad {
                        // da = g · bᵀ
                        let bd = &head[b.0].data;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; n * k]);
                        for r in 0..n {
                            let grow = &g[r * m..(r + 1) * m];
                            for kk in 0..k {
                                let brow = &bd[kk * m..(kk + 1) * m];
                                let mut acc = 0.0;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                s[r * k + kk] += acc;
                            }
                        }
                    }
                    if head[b.0].requires_grad {
                        // db = aᵀ · g
                        let ad = &head[a.0].data;
                        let s = scratch[b.0].get_or_insert_with(|| vec![0.0; k * m]);
                        for r in 0..n {
                            for kk in 0..k {
                                axpy(&mut s[kk * m..(kk + 1) * m], ad[r * k + kk], &g[r * m..(r + 1) * m]);
                            }
                        }
                    }
                }
                Op::Transpose { a } => {
                    if head[a.0].requires_grad {
                        let ac = head[a.0].cols;
                        let alen = head[a.0].rows * ac;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; alen]);
                        for r in 0..node.rows {
                            for c2 in 0..cols {
                                s[c2 * ac + r] += g[r * cols + c2];
                            }
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    if head[x.0].requires_grad {
                        let xc = head[x.0].cols;
                        let xlen = head[x.0].rows * xc;
                        let s = scratch[x.0].get_or_insert_with(|| vec![0.0; xlen]);
                        for (k, &row) in idx.iter().enumerate() {
                            axpy(&mut s[row * xc..(row + 1) * xc], 1.0, &g[k * xc..(k + 1) * xc]);
                        }
                    }
                }
                Op::ScatterAddRows { src, idx } => {
                    if head[src.0].requires_grad {
                        let sc = head[src.0].cols;
                        let slen = head[src.0].rows * sc;
                        let s = scratch[src.0].get_or_insert_with(|| vec![0.0; slen]);
                        for (k, &row) in idx.iter().enumerate() {
                            axpy(&mut s[k * sc..(k + 1) * sc], 1.0, &g[row * sc..(row + 1) * sc]);
                        }
                    }
                }
                Op::Windows { x, width } => {
                    if head[x.0].requires_grad {
                        let width = *width;
                        let xc = head[x.0].cols;
                        let xlen = head[x.0].rows * xc;
                        let s = scratch[x.0].get_or_insert_with(|| vec![0.0; xlen]);
                        for r in 0..node.rows {
                            for q in 0..width {
                                axpy(
                                    &mut s[(r + q) * xc..(r + q + 1) * xc],
                                    1.0,
                                    &g[r * width * xc + q * xc..r * width * xc + (q + 1) * xc],
                                );
                            }
                        }
                    }
                }
                Op::MaxPoolRows { x, argmax } | Op::MaxOverRows { x, argmax } => {
                    if head[x.0].requires_grad {
                        let xc = head[x.0].cols;
                        let xlen = head[x.0].rows * xc;
                        let s = scratch[x.0].get_or_insert_with(|| vec![0.0; xlen]);
                        for (k, &row) in argmax.iter().enumerate() {
                            s[row * xc + k % cols] += g[k];
                        }
                    }
                }
                Op::PickPerRow { x, idx } => {
                    if head[x.0].requires_grad {
                        let xc = head[x.0].cols;
                        let xlen = head[x.0].rows * xc;
                        let s = scratch[x.0].get_or_insert_with(|| vec![0.0; xlen]);
                        for (r, &c2) in idx.iter().enumerate() {
                            s[r * xc + c2] += g[r];
                        }
                    }
                }
                Op::TakeDiag { a } => {
                    if head[a.0].requires_grad {
                        let ac = head[a.0].cols;
                        let alen = head[a.0].rows * ac;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; alen]);
                        for (r, &gv) in g.iter().enumerate() {
                            s[r * ac + r] += gv;
                        }
                    }
                }
                Op::SumAll { a } => {
                    if head[a.0].requires_grad {
                        let alen = head[a.0].rows * head[a.0].cols;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; alen]);
                        for v in s.iter_mut() {
                            *v += g[0];
                        }
                    }
                }
                Op::MeanAll { a } => {
                    if head[a.0].requires_grad {
                        let alen = head[a.0].rows * head[a.0].cols;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; alen]);
                        let f = g[0] / alen as f64;
                        for v in s.iter_mut() {
                            *v += f;
                        }
                    }
                }
                Op::SqL2 { a } => {
                    if head[a.0].requires_grad {
                        let ad = &head[a.0].data;
                        let s = scratch[a.0].get_or_insert_with(|| vec![0.0; ad.len()]);
                        for k in 0..ad.len() {
                            s[k] += 2.0 * ad[k] * g[0];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// First node holding a non-finite value, for divergence diagnostics.
    pub fn find_first_nonfinite(&self) -> Option<String> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.data.iter().any(|v| !v.is_finite()) {
                return Some(format!("node {} ({} {}x{})", i, n.op.name(), n.rows, n.cols));
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, rows: usize, cols: usize, data: &[f64]) -> TensorId {
        t.leaf(rows, cols, data.to_vec(), true).unwrap()
    }

    #[test]
    fn matmul_known_values() {
        let mut t = Tape::new();
        let a = leaf(&mut t, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut t, 2, 1, &[5.0, 6.0]);
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.data(y), &[17.0, 39.0]);

        let i = leaf(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y2 = t.matmul(a, i).unwrap();
        assert_eq!(t.data(y2), t.data(a));
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = leaf(&mut t, 2, 3, &[0.0; 6]);
        let b = leaf(&mut t, 2, 2, &[0.0; 4]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("2x3") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 2, 3, &[1.0, -2.0, 0.5, 4.0, 9.0, -1.0]);
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        // loss = sum(x ⊙ x) at x = [3] has gradient 2x = 6
        let mut t = Tape::new();
        let x = leaf(&mut t, 1, 1, &[3.0]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 1, 3, &[0.0, 0.0, 0.0]);
        let y = t.softmax_rows(x).unwrap();
        for &v in t.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = TestRng::new(7);
        for _ in 0..50 {
            let mut t = Tape::new();
            let vals: Vec<f64> = (0..12).map(|_| rng.next_in(-30.0, 30.0)).collect();
            let shifted: Vec<f64> = vals.iter().map(|v| v + 13.5).collect();
            let a = leaf(&mut t, 3, 4, &vals);
            let b = leaf(&mut t, 3, 4, &shifted);
            let ya = t.softmax_rows(a).unwrap();
            let yb = t.softmax_rows(b).unwrap();
            for row in 0..3 {
                let s: f64 = t.data(ya)[row * 4..(row + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
            for (va, vb) in t.data(ya).iter().zip(t.data(yb)) {
                assert!((va - vb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut t = Tape::new();
        let z = leaf(&mut t, 1, 2, &[1.0, 0.0]);
        let logp = t.log_softmax_rows(z).unwrap();
        let picked = t.pick_per_row(logp, &[0]).unwrap();
        let m = t.mean_all(picked);
        let loss = t.neg(m);
        t.backward(loss).unwrap();
        let p0 = (1.0f64).exp() / ((1.0f64).exp() + 1.0);
        let expect = [p0 - 1.0, 1.0 - p0];
        for (g, e) in t.grad(z).unwrap().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn backward_twice_doubles_leaf_gradient() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum_all(sq);
        t.backward(s).unwrap();
        let once: Vec<f64> = t.grad(x).unwrap().to_vec();
        t.backward(s).unwrap();
        let twice: Vec<f64> = t.grad(x).unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 1, 4, &[1.0; 4]);
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { shape: (1, 4) }));
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut t = Tape::new();
        assert!(t.leaf(1, 2, vec![1.0, f64::NAN], false).is_err());
        assert!(t.leaf(1, 2, vec![1.0, f64::INFINITY], false).is_err());
    }

    #[test]
    fn softmax_rejects_non_finite() {
        // Overflow to inf through arithmetic, then inf - inf = NaN; the
        // checks in the softmax family must catch both.
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1e308, 1e308], false).unwrap();
        let big = t.add(x, x).unwrap();
        let nan = t.sub(big, big).unwrap();
        assert!(matches!(t.softmax_rows(big), Err(Error::NonFinite { .. })));
        assert!(matches!(t.log_softmax_rows(nan), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 1, 3, &[-1.0, 0.0, 2.0]);
        let y = t.relu(x);
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_ties_take_first_index() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 2, 2, &[1.0, 5.0, 1.0, 5.0]);
        let y = t.max_over_rows(x).unwrap();
        assert_eq!(t.data(y), &[1.0, 5.0]);
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_window_two_stride_two() {
        let mut t = Tape::new();
        // 5 rows, 1 col: windows [0,1], [2,3]; the tail row 4 is dropped.
        let x = leaf(&mut t, 5, 1, &[1.0, 3.0, 2.0, 2.0, 9.0]);
        let y = t.max_pool_rows(x, 2, 2).unwrap();
        assert_eq!(t.shape(y), (2, 1));
        assert_eq!(t.data(y), &[3.0, 2.0]);
        let s = t.sum_all(y);
        t.backward(s).unwrap();
        // Tie in rows 2,3 resolves to the first.
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0]);

        let mut t2 = Tape::new();
        let x2 = leaf(&mut t2, 1, 2, &[4.0, -1.0]);
        let y2 = t2.max_pool_rows(x2, 2, 2).unwrap();
        assert_eq!(t2.shape(y2), (1, 2));
        assert_eq!(t2.data(y2), &[4.0, -1.0]);
    }

    #[test]
    fn masked_softmax_zeroes_inactive_and_normalizes_active() {
        let mut t = Tape::new();
        let x = leaf(&mut t, 2, 3, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let mask = [true, false, true, false, false, false];
        let y = t.masked_softmax_rows(x, &mask).unwrap();
        let d = t.data(y);
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        assert_eq!(&d[3..6], &[0.0, 0.0, 0.0]);
    }

    // ── central-difference oracle for every primitive ──────────────────

    struct TestRng(u64);
    impl TestRng {
        fn new(seed: u64) -> Self {
            TestRng(seed.wrapping_mul(0x9E3779B97F4A7C15).max(1))
        }
        fn next_u64(&mut self) -> u64 {
            // xorshift64*
            let mut x = self.0;
            x ^= x >> 12;
            x ^= x << 25;
            x ^= x >> 27;
            self.0 = x;
            x.wrapping_mul(0x2545F4914F6CDD1D)
        }
        fn next_in(&mut self, lo: f64, hi: f64) -> f64 {
            let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            lo + u * (hi - lo)
        }
    }

    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
    }

    /// Checks d(weighted sum of op output)/d(input k) against central
    /// differences for every entry of every input.
    fn check_op<F>(inputs: &[(usize, usize, Vec<f64>)], seed: u64, build: F)
    where
        F: Fn(&mut Tape, &[TensorId]) -> TensorId,
    {
        let weights: Vec<f64> = {
            let mut rng = TestRng::new(seed);
            (0..4096).map(|_| rng.next_in(-1.0, 1.0)).collect()
        };
        let eval = |vals: &[Vec<f64>], want_grads: bool| -> (f64, Vec<Option<Vec<f64>>>) {
            let mut t = Tape::new();
            let ids: Vec<TensorId> = inputs
                .iter()
                .zip(vals)
                .map(|((r, c, _), v)| t.leaf(*r, *c, v.clone(), true).unwrap())
                .collect();
            let out = build(&mut t, &ids);
            let (orows, ocols) = t.shape(out);
            let w = t
                .leaf(orows, ocols, weights[..orows * ocols].to_vec(), false)
                .unwrap();
            let prod = t.mul(out, w).unwrap();
            let loss = t.sum_all(prod);
            let value = t.scalar(loss);
            if !want_grads {
                return (value, Vec::new());
            }
            t.backward(loss).unwrap();
            let grads = ids.iter().map(|&id| t.grad(id).map(|g| g.to_vec())).collect();
            (value, grads)
        };

        let base: Vec<Vec<f64>> = inputs.iter().map(|(_, _, d)| d.clone()).collect();
        let (_, analytic) = eval(&base, true);
        for (k, inp) in inputs.iter().enumerate() {
            let ga = analytic[k].as_ref().expect("input should receive a gradient");
            for e in 0..inp.2.len() {
                let mut plus = base.clone();
                plus[k][e] += EPS;
                let mut minus = base.clone();
                minus[k][e] -= EPS;
                let n = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * EPS);
                let err = rel_err(ga[e], n);
                assert!(
                    err < TOL,
                    "input {k} entry {e}: analytic {} vs numeric {n} (err {err})",
                    ga[e]
                );
            }
        }
    }

    fn rand_mat(rng: &mut TestRng, r: usize, c: usize) -> (usize, usize, Vec<f64>) {
        // Stay clear of relu/max kinks by construction.
        (r, c, (0..r * c).map(|_| rng.next_in(0.11, 2.0) * if rng.next_u64() % 2 == 0 { 1.0 } else { -1.0 }).collect())
    }

    #[test]
    fn gradcheck_add_and_broadcast() {
        let mut rng = TestRng::new(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4);
        check_op(&[a.clone(), b], 11, |t, ids| t.add(ids[0], ids[1]).unwrap());
        let bias = rand_mat(&mut rng, 1, 4);
        check_op(&[a, bias], 12, |t, ids| t.add(ids[0], ids[1]).unwrap());
    }

    #[test]
    fn gradcheck_sub_neg_mul_scale() {
        let mut rng = TestRng::new(2);
        let a = rand_mat(&mut rng, 2, 5);
        let b = rand_mat(&mut rng, 2, 5);
        check_op(&[a.clone(), b.clone()], 13, |t, ids| t.sub(ids[0], ids[1]).unwrap());
        check_op(&[a.clone()], 14, |t, ids| t.neg(ids[0]));
        check_op(&[a.clone(), b], 15, |t, ids| t.mul(ids[0], ids[1]).unwrap());
        check_op(&[a.clone()], 16, |t, ids| t.scale(ids[0], -2.5));
        check_op(&[a], 17, |t, ids| t.one_minus(ids[0]));
    }

    #[test]
    fn gradcheck_scale_rows_and_scalar() {
        let mut rng = TestRng::new(3);
        let a = rand_mat(&mut rng, 4, 3);
        let s = rand_mat(&mut rng, 4, 1);
        check_op(&[a.clone(), s], 18, |t, ids| t.scale_rows(ids[0], ids[1]).unwrap());
        let sc = rand_mat(&mut rng, 1, 1);
        check_op(&[a, sc], 19, |t, ids| t.scale_scalar(ids[0], ids[1]).unwrap());
    }

    #[test]
    fn gradcheck_activations() {
        let mut rng = TestRng::new(4);
        let a = rand_mat(&mut rng, 3, 3);
        check_op(&[a.clone()], 20, |t, ids| t.sigmoid(ids[0]));
        check_op(&[a.clone()], 21, |t, ids| t.tanh(ids[0]));
        check_op(&[a.clone()], 22, |t, ids| t.relu(ids[0]));
        check_op(&[a], 23, |t, ids| t.abs(ids[0]));
    }

    #[test]
    fn gradcheck_softmax_family() {
        let mut rng = TestRng::new(5);
        let a = rand_mat(&mut rng, 3, 5);
        check_op(&[a.clone()], 24, |t, ids| t.softmax_rows(ids[0]).unwrap());
        check_op(&[a.clone()], 25, |t, ids| t.log_softmax_rows(ids[0]).unwrap());
        let mask: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
        check_op(&[a], 26, move |t, ids| {
            t.masked_softmax_rows(ids[0], &mask).unwrap()
        });
    }

    #[test]
    fn gradcheck_concat() {
        let mut rng = TestRng::new(6);
        let a = rand_mat(&mut rng, 2, 3);
        let b = rand_mat(&mut rng, 2, 2);
        check_op(&[a.clone(), b], 27, |t, ids| t.concat_cols(ids).unwrap());
        let c = rand_mat(&mut rng, 3, 3);
        check_op(&[a, c], 28, |t, ids| t.concat_rows(ids).unwrap());
    }

    #[test]
    fn gradcheck_linear_and_matmul() {
        let mut rng = TestRng::new(7);
        let x = rand_mat(&mut rng, 3, 4);
        let w = rand_mat(&mut rng, 2, 4);
        let b = rand_mat(&mut rng, 1, 2);
        check_op(&[x.clone(), w.clone(), b], 29, |t, ids| {
            t.linear(ids[0], ids[1], Some(ids[2])).unwrap()
        });
        check_op(&[x.clone(), w.clone()], 30, |t, ids| {
            t.linear(ids[0], ids[1], None).unwrap()
        });
        let a = rand_mat(&mut rng, 3, 2);
        let m = rand_mat(&mut rng, 2, 4);
        check_op(&[a, m], 31, |t, ids| t.matmul(ids[0], ids[1]).unwrap());
    }

    #[test]
    fn gradcheck_transpose_gather_scatter() {
        let mut rng = TestRng::new(8);
        let a = rand_mat(&mut rng, 3, 4);
        check_op(&[a.clone()], 32, |t, ids| t.transpose(ids[0]));
        check_op(&[a.clone()], 33, |t, ids| {
            t.gather_rows(ids[0], &[2, 0, 0, 1]).unwrap()
        });
        check_op(&[a], 34, |t, ids| {
            t.scatter_add_rows(ids[0], &[1, 4, 1], 5).unwrap()
        });
    }

    #[test]
    fn gradcheck_windows_and_pooling() {
        let mut rng = TestRng::new(9);
        let a = rand_mat(&mut rng, 6, 2);
        check_op(&[a.clone()], 35, |t, ids| t.windows(ids[0], 3).unwrap());
        check_op(&[a.clone()], 36, |t, ids| t.max_pool_rows(ids[0], 2, 2).unwrap());
        check_op(&[a], 37, |t, ids| t.max_over_rows(ids[0]).unwrap());
    }

    #[test]
    fn gradcheck_reductions_and_picks() {
        let mut rng = TestRng::new(10);
        let a = rand_mat(&mut rng, 3, 3);
        check_op(&[a.clone()], 38, |t, ids| t.mean_all(ids[0]));
        check_op(&[a.clone()], 39, |t, ids| t.sum_all(ids[0]));
        check_op(&[a.clone()], 40, |t, ids| t.sq_l2(ids[0]));
        check_op(&[a.clone()], 41, |t, ids| {
            t.pick_per_row(ids[0], &[2, 0, 1]).unwrap()
        });
        check_op(&[a], 42, |t, ids| t.take_diag(ids[0]).unwrap());
    }
}
