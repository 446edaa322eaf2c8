//! Dense f64 tensors and reverse-mode automatic differentiation on a tape.
//!
//! Tensors are plain values (row-major flat storage, no views). Differentiable
//! programs are built by pushing operations onto a [`Tape`], which hands back
//! `Var` handles. `Tape::backward` walks the recorded nodes in reverse and
//! accumulates gradients additively for every reachable `requires_grad` leaf.

use std::collections::HashMap;

use crate::error::GcError;

/// Handle to a tensor recorded on a tape.
pub type Var = usize;

/// Identifier tying a tape leaf back to a parameter store slot.
pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { shape: vec![r, c], data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (1 for vectors/scalars).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }
}

/// Softmax axis for 2-D operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

enum Node {
    Leaf { param: Option<ParamId> },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddRowBroadcast { a: Var, row: Var },
    Relu { a: Var },
    LeakyRelu { a: Var, slope: f64 },
    Tanh { a: Var },
    Gelu { a: Var },
    Softmax { a: Var, axis: Axis },
    LayerNorm { a: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64 },
    Sum { a: Var },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { base: Var, rows: Vec<usize>, values: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Dropout { a: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    PickScalar { a: Var, idx: usize },
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Grads {
    g: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.g[v].as_deref()
    }
}

/// Records a forward pass; replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    requires: Vec<bool>,
}

// C += A · B via 4x8 register tiles; the accumulator tile stays in
// registers across the whole k loop so stores hit each output once.
fn matmul_tile(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    const MR: usize = 4;
    const NR: usize = 8;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            let mut acc = [[0.0f64; NR]; MR];
            for p in 0..k {
                let brow = &b[p * n + j..p * n + j + NR];
                for r in 0..MR {
                    let av = a[(i + r) * k + p];
                    for c in 0..NR {
                        acc[r][c] += av * brow[c];
                    }
                }
            }
            for r in 0..MR {
                let crow = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
                for c in 0..NR {
                    crow[c] += acc[r][c];
                }
            }
            j += NR;
        }
        while j < n {
            for r in 0..MR {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[(i + r) * k + p] * b[p * n + j];
                }
                out[(i + r) * n + j] += s;
            }
            j += 1;
        }
        i += MR;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
        i += 1;
    }
}

// C += A · B, row-blocked axpy; beats the tile kernel on tiny matrices
// where tile setup overhead dominates.
fn matmul_blk4(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mb = m / 4 * 4;
    let mut i = 0;
    while i < mb {
        let base = i * n;
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let v0 = a[i * k + p];
            let v1 = a[(i + 1) * k + p];
            let v2 = a[(i + 2) * k + p];
            let v3 = a[(i + 3) * k + p];
            for j in 0..n {
                let bv = brow[j];
                out[base + j] += v0 * bv;
                out[base + n + j] += v1 * bv;
                out[base + 2 * n + j] += v2 * bv;
                out[base + 3 * n + j] += v3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
        i += 1;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if m >= 32 && n >= 8 {
        matmul_tile(a, b, m, k, n, out);
    } else {
        matmul_blk4(a, b, m, k, n, out);
    }
}

thread_local! {
    static TRANSPOSE_SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

// C += A · Bᵀ, with A m×k and B n×k. Transposing B first costs O(nk)
// but lets the contiguous tile kernel do the O(mkn) part.
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    TRANSPOSE_SCRATCH.with(|cell| {
        let mut bt = cell.borrow_mut();
        bt.clear();
        bt.resize(k * n, 0.0);
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        if m >= 32 && n >= 8 {
            matmul_tile(a, &bt, m, k, n, out);
        } else {
            matmul_blk4(a, &bt, m, k, n, out);
        }
    });
}

// C += Aᵀ · B, with A k×m and B k×n.
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn gelu_tanh(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_tanh_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        let x = &data[r * cols..(r + 1) * cols];
        let y = &mut out[r * cols..(r + 1) * cols];
        let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (yi, &xi) in y.iter_mut().zip(x) {
            *yi = (xi - mx).exp();
            z += *yi;
        }
        for yi in y.iter_mut() {
            *yi /= z;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, t: Tensor, node: Node, requires: bool) -> Var {
        // leaves may carry arbitrary caller data; only op outputs are guarded
        debug_assert!(
            matches!(node, Node::Leaf { .. }) || t.data.iter().all(|x| x.is_finite()),
            "non-finite value out of a forward op"
        );
        self.vals.push(t);
        self.nodes.push(node);
        self.requires.push(requires);
        self.vals.len() - 1
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Node::Leaf { param: None }, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Node::Leaf { param: None }, requires_grad)
    }

    /// Leaf tied to a parameter slot; gradient is routed back by id.
    pub fn param(&mut self, t: Tensor, id: ParamId) -> Var {
        self.push(t, Node::Leaf { param: Some(id) }, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GcError> {
        let (ta, tb) = (&self.vals[a], &self.vals[b]);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(GcError::Shape(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&ta.data, &tb.data, m, k, n, &mut out);
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(vec![m, n], out), Node::MatMul { a, b }, req))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = &self.vals[a];
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data[i * n + j];
            }
        }
        let req = self.req(a);
        self.push(Tensor::new(vec![n, m], out), Node::Transpose { a }, req)
    }

    fn binary_shapes(&self, a: Var, b: Var, op: &str) -> Result<(), GcError> {
        if self.vals[a].shape != self.vals[b].shape {
            return Err(GcError::Shape(format!(
                "{} operand shapes differ: {:?} vs {:?}",
                op, self.vals[a].shape, self.vals[b].shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GcError> {
        self.binary_shapes(a, b, "add")?;
        let data: Vec<f64> = self.vals[a]
            .data
            .iter()
            .zip(&self.vals[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.vals[a].shape.clone();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, data), Node::Add { a, b }, req))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GcError> {
        self.binary_shapes(a, b, "sub")?;
        let data: Vec<f64> = self.vals[a]
            .data
            .iter()
            .zip(&self.vals[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.vals[a].shape.clone();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, data), Node::Sub { a, b }, req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GcError> {
        self.binary_shapes(a, b, "mul")?;
        let data: Vec<f64> = self.vals[a]
            .data
            .iter()
            .zip(&self.vals[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.vals[a].shape.clone();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(shape, data), Node::Mul { a, b }, req))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.vals[a].data.iter().map(|x| x * c).collect();
        let shape = self.vals[a].shape.clone();
        let req = self.req(a);
        self.push(Tensor::new(shape, data), Node::Scale { a, c }, req)
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var, GcError> {
        let (m, n) = (self.vals[a].rows(), self.vals[a].cols());
        if self.vals[row].len() != n {
            return Err(GcError::Shape(format!(
                "row broadcast length {} does not match matrix cols {}",
                self.vals[row].len(),
                n
            )));
        }
        let mut data = self.vals[a].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.vals[row].data[j];
            }
        }
        let shape = self.vals[a].shape.clone();
        let req = self.req(a) || self.req(row);
        Ok(self.push(Tensor::new(shape, data), Node::AddRowBroadcast { a, row }, req))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.vals[a].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.vals[a].shape.clone();
        let req = self.req(a);
        self.push(Tensor::new(shape, data), Node::Relu { a }, req)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let data: Vec<f64> = self.vals[a]
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.vals[a].shape.clone();
        let req = self.req(a);
        self.push(Tensor::new(shape, data), Node::LeakyRelu { a, slope }, req)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.vals[a].data.iter().map(|x| x.tanh()).collect();
        let shape = self.vals[a].shape.clone();
        let req = self.req(a);
        self.push(Tensor::new(shape, data), Node::Tanh { a }, req)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.vals[a].data.iter().map(|&x| gelu_tanh(x)).collect();
        let shape = self.vals[a].shape.clone();
        let req = self.req(a);
        self.push(Tensor::new(shape, data), Node::Gelu { a }, req)
    }

    /// Numerically stable softmax along the given axis of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var, GcError> {
        let t = &self.vals[a];
        if t.data.iter().any(|x| x.is_nan()) {
            return Err(GcError::Numeric("softmax input contains NaN".into()));
        }
        let (rows, cols) = (t.rows(), t.cols());
        let data = match axis {
            Axis::Cols => softmax_rows(&t.data, rows, cols),
            Axis::Rows => {
                // softmax down each column: transpose, row-softmax, transpose back
                let mut tt = vec![0.0; t.data.len()];
                for i in 0..rows {
                    for j in 0..cols {
                        tt[j * rows + i] = t.data[i * cols + j];
                    }
                }
                let s = softmax_rows(&tt, cols, rows);
                let mut out = vec![0.0; t.data.len()];
                for j in 0..cols {
                    for i in 0..rows {
                        out[i * cols + j] = s[j * rows + i];
                    }
                }
                out
            }
        };
        let shape = t.shape.clone();
        let req = self.req(a);
        Ok(self.push(Tensor::new(shape, data), Node::Softmax { a, axis }, req))
    }

    /// Per-row layer normalization with optional affine parameters.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var, GcError> {
        if eps <= 0.0 {
            return Err(GcError::Contract("layer_norm eps must be positive".into()));
        }
        let t = &self.vals[a];
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(g) = gamma {
            if self.vals[g].len() != cols {
                return Err(GcError::Shape(format!(
                    "layer_norm gamma length {} != {}",
                    self.vals[g].len(),
                    cols
                )));
            }
        }
        if let Some(b) = beta {
            if self.vals[b].len() != cols {
                return Err(GcError::Shape(format!(
                    "layer_norm beta length {} != {}",
                    self.vals[b].len(),
                    cols
                )));
            }
        }
        let t = &self.vals[a];
        let mut data = vec![0.0; t.data.len()];
        for r in 0..rows {
            let x = &t.data[r * cols..(r + 1) * cols];
            let mu = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                let mut y = (x[j] - mu) * inv;
                if let Some(g) = gamma {
                    y *= self.vals[g].data[j];
                }
                if let Some(b) = beta {
                    y += self.vals[b].data[j];
                }
                data[r * cols + j] = y;
            }
        }
        let shape = t.shape.clone();
        let req =
            self.req(a) || gamma.map(|g| self.req(g)).unwrap_or(false) || beta.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(shape, data),
            Node::LayerNorm { a, gamma, beta, eps },
            req,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.vals[a].data.iter().sum();
        let req = self.req(a);
        self.push(Tensor::scalar(s), Node::Sum { a }, req)
    }

    /// Copies the selected rows into a new matrix; backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, GcError> {
        let t = &self.vals[a];
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(GcError::Contract(format!(
                "gather row index {} out of range (rows = {})",
                bad, rows
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&t.data[i * cols..(i + 1) * cols]);
        }
        let req = self.req(a);
        Ok(self.push(
            Tensor::new(vec![idx.len(), cols], data),
            Node::GatherRows { a, idx: idx.to_vec() },
            req,
        ))
    }

    /// Returns `base` with the given rows replaced by the rows of `values`.
    pub fn scatter_rows(&mut self, base: Var, rows: &[usize], values: Var) -> Result<Var, GcError> {
        let (n, cols) = (self.vals[base].rows(), self.vals[base].cols());
        if self.vals[values].rows() != rows.len() || self.vals[values].cols() != cols {
            return Err(GcError::Shape(format!(
                "scatter values shape {:?} does not match {} rows of width {}",
                self.vals[values].shape,
                rows.len(),
                cols
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(GcError::Contract(format!(
                "scatter row index {} out of range (rows = {})",
                bad, n
            )));
        }
        let mut data = self.vals[base].data.clone();
        for (k, &i) in rows.iter().enumerate() {
            data[i * cols..(i + 1) * cols]
                .copy_from_slice(&self.vals[values].data[k * cols..(k + 1) * cols]);
        }
        let shape = self.vals[base].shape.clone();
        let req = self.req(base) || self.req(values);
        Ok(self.push(
            Tensor::new(shape, data),
            Node::ScatterRows { base, rows: rows.to_vec(), values },
            req,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, GcError> {
        if parts.is_empty() {
            return Err(GcError::Contract("concat_rows on empty part list".into()));
        }
        let cols = self.vals[parts[0]].cols();
        let mut total = 0;
        for &p in parts {
            if self.vals[p].cols() != cols {
                return Err(GcError::Shape("concat_rows column mismatch".into()));
            }
            total += self.vals[p].rows();
        }
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            data.extend_from_slice(&self.vals[p].data);
        }
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Tensor::new(vec![total, cols], data),
            Node::ConcatRows { parts: parts.to_vec() },
            req,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, GcError> {
        if parts.is_empty() {
            return Err(GcError::Contract("concat_cols on empty part list".into()));
        }
        let rows = self.vals[parts[0]].rows();
        let mut total = 0;
        for &p in parts {
            if self.vals[p].rows() != rows {
                return Err(GcError::Shape("concat_cols row mismatch".into()));
            }
            total += self.vals[p].cols();
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let c = self.vals[p].cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c]
                    .copy_from_slice(&self.vals[p].data[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let req = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], data),
            Node::ConcatCols { parts: parts.to_vec() },
            req,
        ))
    }

    /// Inverted dropout: zeroes entries with probability p during training and
    /// rescales survivors by 1/(1-p); identity in evaluation mode.
    pub fn dropout(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<Var, GcError> {
        if !(0.0..1.0).contains(&p) {
            return Err(GcError::Contract(format!("dropout p out of range: {}", p)));
        }
        if !training || p == 0.0 {
            let data = self.vals[a].data.clone();
            let shape = self.vals[a].shape.clone();
            let mask = vec![1.0; data.len()];
            let req = self.req(a);
            return Ok(self.push(Tensor::new(shape, data), Node::Dropout { a, mask }, req));
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.vals[a].len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f64> = self.vals[a]
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.vals[a].shape.clone();
        let req = self.req(a);
        Ok(self.push(Tensor::new(shape, data), Node::Dropout { a, mask }, req))
    }

    /// Mean over the batch of -log softmax(logits)[label].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, GcError> {
        let t = &self.vals[logits];
        let (b, c) = (t.rows(), t.cols());
        if labels.len() != b {
            return Err(GcError::Shape(format!(
                "cross_entropy: {} labels for {} logit rows",
                labels.len(),
                b
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(GcError::Contract(format!(
                "label {} out of range for {} classes",
                bad, c
            )));
        }
        let probs = softmax_rows(&t.data, b, c);
        let mut loss = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            loss -= probs[r * c + l].max(1e-300).ln();
        }
        loss /= b as f64;
        let req = self.req(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Node::CrossEntropy { logits, labels: labels.to_vec() },
            req,
        ))
    }

    /// Extracts a single entry as a scalar tensor.
    pub fn pick_scalar(&mut self, a: Var, idx: usize) -> Result<Var, GcError> {
        if idx >= self.vals[a].len() {
            return Err(GcError::Contract(format!(
                "pick index {} out of range ({} elements)",
                idx,
                self.vals[a].len()
            )));
        }
        let v = self.vals[a].data[idx];
        let req = self.req(a);
        Ok(self.push(Tensor::scalar(v), Node::PickScalar { a, idx }, req))
    }

    /// Reverse pass from a scalar loss. Returns per-var gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads, GcError> {
        if !self.vals[loss].is_scalar() {
            return Err(GcError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss].shape
            )));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        g[loss] = Some(vec![1.0]);
        for v in (0..=loss).rev() {
            if !self.requires[v] {
                continue;
            }
            let dy = match g[v].take() {
                Some(d) => d,
                None => continue,
            };
            self.backprop_node(v, &dy, &mut g);
            g[v] = Some(dy);
        }
        Ok(Grads { g })
    }

    /// Gradient per parameter leaf; a parameter bound several times yields
    /// one entry per binding.
    pub fn param_grads<'g>(&self, grads: &'g Grads) -> Vec<(ParamId, &'g [f64])> {
        let mut out = Vec::new();
        for (v, node) in self.nodes.iter().enumerate() {
            if let Node::Leaf { param: Some(id) } = node {
                if let Some(gr) = grads.get(v) {
                    out.push((*id, gr));
                }
            }
        }
        out
    }

    /// Total gradient per parameter, summed over all bindings on this tape.
    pub fn accumulated_param_grads(&self, grads: &Grads) -> HashMap<ParamId, Vec<f64>> {
        let mut out: HashMap<ParamId, Vec<f64>> = HashMap::new();
        for (id, g) in self.param_grads(grads) {
            match out.entry(id) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g.to_vec());
                }
            }
        }
        out
    }

    fn accum(g: &mut Vec<Option<Vec<f64>>>, v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = g[v].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backprop_node(&self, v: Var, dy: &[f64], g: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[v] {
            Node::Leaf { .. } => {}
            Node::MatMul { a, b } => {
                let (m, k) = (self.vals[*a].rows(), self.vals[*a].cols());
                let n = self.vals[*b].cols();
                if self.requires[*a] {
                    let bdat = &self.vals[*b].data;
                    Self::accum(g, *a, m * k, |ga| matmul_nt_acc(dy, bdat, m, n, k, ga));
                }
                if self.requires[*b] {
                    let adat = &self.vals[*a].data;
                    Self::accum(g, *b, k * n, |gb| matmul_tn_acc(adat, dy, k, m, n, gb));
                }
            }
            Node::Transpose { a } => {
                if self.requires[*a] {
                    let (m, n) = (self.vals[*a].rows(), self.vals[*a].cols());
                    Self::accum(g, *a, m * n, |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] += dy[j * m + i];
                            }
                        }
                    });
                }
            }
            Node::Add { a, b } => {
                for &x in [a, b] {
                    if self.requires[x] {
                        Self::accum(g, x, dy.len(), |gx| {
                            for (gi, di) in gx.iter_mut().zip(dy) {
                                *gi += di;
                            }
                        });
                    }
                }
            }
            Node::Sub { a, b } => {
                if self.requires[*a] {
                    Self::accum(g, *a, dy.len(), |gx| {
                        for (gi, di) in gx.iter_mut().zip(dy) {
                            *gi += di;
                        }
                    });
                }
                if self.requires[*b] {
                    Self::accum(g, *b, dy.len(), |gx| {
                        for (gi, di) in gx.iter_mut().zip(dy) {
                            *gi -= di;
                        }
                    });
                }
            }
            Node::Mul { a, b } => {
                if self.requires[*a] {
                    let bd = &self.vals[*b].data;
                    Self::accum(g, *a, dy.len(), |gx| {
                        for i in 0..dy.len() {
                            gx[i] += dy[i] * bd[i];
                        }
                    });
                }
                if self.requires[*b] {
                    let ad = &self.vals[*a].data;
                    Self::accum(g, *b, dy.len(), |gx| {
                        for i in 0..dy.len() {
                            gx[i] += dy[i] * ad[i];
                        }
                    });
                }
            }
            Node::Scale { a, c } => {
                if self.requires[*a] {
                    let c = *c;
                    Self::accum(g, *a, dy.len(), |gx| {
                        for i in 0..dy.len() {
                            gx[i] += dy[i] * c;
                        }
                    });
                }
            }
            Node::AddRowBroadcast { a, row } => {
                let (m, n) = (self.vals[*a].rows(), self.vals[*a].cols());
                if self.requires[*a] {
                    Self::accum(g, *a, m * n, |gx| {
                        for (gi, di) in gx.iter_mut().zip(dy) {
                            *gi += di;
                        }
                    });
                }
                if self.requires[*row] {
                    Self::accum(g, *row, n, |gx| {
                        for i in 0..m {
                            for j in 0..n {
                                gx[j] += dy[i * n + j];
                            }
                        }
                    });
                }
            }
            Node::Relu { a } => {
                if self.requires[*a] {
                    let x = &self.vals[*a].data;
                    Self::accum(g, *a, dy.len(), |gx| {
                        for i in 0..dy.len() {
                            if x[i] > 0.0 {
                                gx[i] += dy[i];
                            }
                        }
                    });
                }
            }
            Node::LeakyRelu { a, slope } => {
                if self.requires[*a] {
                    let x = &self.vals[*a].data;
                    let s = *slope;
                    Self::accum(g, *a, dy.len(), |gx| {
                        for i in 0..dy.len() {
                            gx[i] += dy[i] * if x[i] > 0.0 { 1.0 } else { s };
                        }
                    });
                }
            }
            Node::Tanh { a } => {
                if self.requires[*a] {
                    let y = &self.vals[v].data;
                    Self::accum(g, *a, dy.len(), |gx| {
                        for i in 0..dy.len() {
                            gx[i] += dy[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
            }
            Node::Gelu { a } => {
                if self.requires[*a] {
                    let x = &self.vals[*a].data;
                    Self::accum(g, *a, dy.len(), |gx| {
                        for i in 0..dy.len() {
                            gx[i] += dy[i] * gelu_tanh_deriv(x[i]);
                        }
                    });
                }
            }
            Node::Softmax { a, axis } => {
                if self.requires[*a] {
                    let y = &self.vals[v].data;
                    let (rows, cols) = (self.vals[v].rows(), self.vals[v].cols());
                    Self::accum(g, *a, dy.len(), |gx| match axis {
                        Axis::Cols => {
                            for r in 0..rows {
                                let yr = &y[r * cols..(r + 1) * cols];
                                let dr = &dy[r * cols..(r + 1) * cols];
                                let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                                for j in 0..cols {
                                    gx[r * cols + j] += yr[j] * (dr[j] - dot);
                                }
                            }
                        }
                        Axis::Rows => {
                            for c in 0..cols {
                                let mut dot = 0.0;
                                for r in 0..rows {
                                    dot += y[r * cols + c] * dy[r * cols + c];
                                }
                                for r in 0..rows {
                                    gx[r * cols + c] += y[r * cols + c] * (dy[r * cols + c] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Node::LayerNorm { a, gamma, beta, eps } => {
                let x = &self.vals[*a].data;
                let (rows, cols) = (self.vals[*a].rows(), self.vals[*a].cols());
                let nf = cols as f64;
                // recompute per-row statistics
                for r in 0..rows {
                    let xr = &x[r * cols..(r + 1) * cols];
                    let dr = &dy[r * cols..(r + 1) * cols];
                    let mu = xr.iter().sum::<f64>() / nf;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    // d wrt normalized values
                    let mut dxhat = vec![0.0; cols];
                    for j in 0..cols {
                        let mut d = dr[j];
                        if let Some(gm) = gamma {
                            d *= self.vals[*gm].data[j];
                        }
                        dxhat[j] = d;
                    }
                    if self.requires[*a] {
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat
                            .iter()
                            .enumerate()
                            .map(|(j, d)| d * (xr[j] - mu) * inv)
                            .sum();
                        Self::accum(g, *a, x.len(), |gx| {
                            for j in 0..cols {
                                let xhat = (xr[j] - mu) * inv;
                                gx[r * cols + j] += inv / nf
                                    * (nf * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        });
                    }
                    if let Some(gm) = gamma {
                        if self.requires[*gm] {
                            Self::accum(g, *gm, cols, |gx| {
                                for j in 0..cols {
                                    gx[j] += dr[j] * (xr[j] - mu) * inv;
                                }
                            });
                        }
                    }
                    if let Some(bt) = beta {
                        if self.requires[*bt] {
                            Self::accum(g, *bt, cols, |gx| {
                                for j in 0..cols {
                                    gx[j] += dr[j];
                                }
                            });
                        }
                    }
                }
            }
            Node::Sum { a } => {
                if self.requires[*a] {
                    let len = self.vals[*a].len();
                    let d = dy[0];
                    Self::accum(g, *a, len, |gx| {
                        for gi in gx.iter_mut() {
                            *gi += d;
                        }
                    });
                }
            }
            Node::GatherRows { a, idx } => {
                if self.requires[*a] {
                    let (rows, cols) = (self.vals[*a].rows(), self.vals[*a].cols());
                    Self::accum(g, *a, rows * cols, |gx| {
                        for (k, &i) in idx.iter().enumerate() {
                            for j in 0..cols {
                                gx[i * cols + j] += dy[k * cols + j];
                            }
                        }
                    });
                }
            }
            Node::ScatterRows { base, rows, values } => {
                let cols = self.vals[*base].cols();
                if self.requires[*values] {
                    Self::accum(g, *values, rows.len() * cols, |gx| {
                        for (k, &i) in rows.iter().enumerate() {
                            for j in 0..cols {
                                gx[k * cols + j] += dy[i * cols + j];
                            }
                        }
                    });
                }
                if self.requires[*base] {
                    let len = self.vals[*base].len();
                    let mut replaced = vec![false; self.vals[*base].rows()];
                    for &i in rows {
                        replaced[i] = true;
                    }
                    Self::accum(g, *base, len, |gx| {
                        for (i, rep) in replaced.iter().enumerate() {
                            if !rep {
                                for j in 0..cols {
                                    gx[i * cols + j] += dy[i * cols + j];
                                }
                            }
                        }
                    });
                }
            }
            Node::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.vals[p].len();
                    if self.requires[p] {
                        let dslice = &dy[off..off + len];
                        Self::accum(g, p, len, |gx| {
                            for (gi, di) in gx.iter_mut().zip(dslice) {
                                *gi += di;
                            }
                        });
                    }
                    off += len;
                }
            }
            Node::ConcatCols { parts } => {
                let rows = self.vals[v].rows();
                let total = self.vals[v].cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.vals[p].cols();
                    if self.requires[p] {
                        Self::accum(g, p, rows * c, |gx| {
                            for r in 0..rows {
                                for j in 0..c {
                                    gx[r * c + j] += dy[r * total + off + j];
                                }
                            }
                        });
                    }
                    off += c;
                }
            }
            Node::Dropout { a, mask } => {
                if self.requires[*a] {
                    Self::accum(g, *a, dy.len(), |gx| {
                        for i in 0..dy.len() {
                            gx[i] += dy[i] * mask[i];
                        }
                    });
                }
            }
            Node::CrossEntropy { logits, labels } => {
                if self.requires[*logits] {
                    let t = &self.vals[*logits];
                    let (b, c) = (t.rows(), t.cols());
                    let probs = softmax_rows(&t.data, b, c);
                    let scale = dy[0] / b as f64;
                    Self::accum(g, *logits, b * c, |gx| {
                        for r in 0..b {
                            for j in 0..c {
                                let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                                gx[r * c + j] += scale * (probs[r * c + j] - onehot);
                            }
                        }
                    });
                }
            }
            Node::PickScalar { a, idx } => {
                if self.requires[*a] {
                    let len = self.vals[*a].len();
                    let d = dy[0];
                    Self::accum(g, *a, len, |gx| gx[*idx] += d);
                }
            }
        }
    }
}

/// Compares the autodiff gradient of `f` against central finite differences.
///
/// `f` receives a fresh tape and the leaf var for `x` and must return a scalar
/// var. Returns the max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Var,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf);
    let grads = tape.backward(out).expect("finite_diff_check: backward failed");
    let g_ad = grads.get(leaf).expect("leaf unreachable from output").to_vec();

    let eval = |pt: &Tensor| -> f64 {
        let mut t = Tape::new();
        let l = t.leaf(pt.clone(), false);
        let o = f(&mut t, l);
        t.value(o).item()
    };

    let mut max_err: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += step;
        let mut minus = x.clone();
        minus.data[i] -= step;
        let g_fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let denom = 1.0_f64.max(g_ad[i].abs()).max(g_fd.abs());
        max_err = max_err.max((g_ad[i] - g_fd).abs() / denom);
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn matmul_grad_column_of_ones() {
        // d sum(A·B) / dA with B = [[1],[1]] is the all-ones 2x2 broadcast of 1·Bᵀ
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[&[1.0, 2.0], &[3.0, 4.0]]), true);
        let b = tape.constant(t2(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

        let err = finite_diff_check(
            |t, x| {
                let b = t.constant(t2(&[&[1.0], &[1.0]]));
                let c = t.matmul(x, b).unwrap();
                t.sum(c)
            },
            &t2(&[&[1.0, 2.0], &[3.0, 4.0]]),
            1e-5,
        );
        assert!(err < 1e-8, "fd err {err}");
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]));
        let s = tape.softmax(a, Axis::Cols).unwrap();
        assert_eq!(tape.value(s).data, vec![0.5, 0.5]);

        let b = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 1000.0]));
        let s = tape.softmax(b, Axis::Cols).unwrap();
        assert_eq!(tape.value(s).data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![2.0_f64.ln(), 0.0]));
        let s = tape.softmax(a, Axis::Cols).unwrap();
        let v = tape.value(s);
        assert!((v.data[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((v.data[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::new(vec![3, 4], data));
            let s = tape.softmax(a, Axis::Cols).unwrap();
            for r in 0..3 {
                let sum: f64 = tape.value(s).row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_nan_input_is_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]));
        assert!(matches!(tape.softmax(a, Axis::Cols), Err(GcError::Numeric(_))));
    }

    #[test]
    fn layer_norm_hand_examples() {
        let mut tape = Tape::new();
        // constant vector collapses to beta (zero here)
        let c = tape.constant(Tensor::new(vec![1, 3], vec![4.2, 4.2, 4.2]));
        let y = tape.layer_norm(c, None, None, 1e-5).unwrap();
        for v in &tape.value(y).data {
            assert!(v.abs() < 1e-12);
        }

        // [1, -1]: mean 0, pop var 1, norm = x / sqrt(1 + 1e-5)
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]));
        let y = tape.layer_norm(x, None, None, 1e-5).unwrap();
        let expect = 1.0 / (1.0 + 1e-5_f64).sqrt();
        assert!((tape.value(y).data[0] - expect).abs() < 1e-12);
        assert!((tape.value(y).data[1] + expect).abs() < 1e-12);

        // affine shift via beta
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]));
        let beta = tape.constant(Tensor::new(vec![2], vec![5.0, 5.0]));
        let y = tape.layer_norm(x, None, Some(beta), 1e-5).unwrap();
        assert!((tape.value(y).data[0] - (5.0 + expect)).abs() < 1e-12);
        assert!((tape.value(y).data[1] - (5.0 - expect)).abs() < 1e-12);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data, vec![0.0, 0.0, 2.0]);

        let z = tape.constant(Tensor::scalar(0.0));
        let th = tape.tanh(z);
        assert_eq!(tape.value(th).data, vec![0.0]);

        // tanh'(0) = 1
        let err = finite_diff_check(|t, x| { let y = t.tanh(x); t.sum(y) }, &Tensor::scalar(0.0), 1e-5);
        assert!(err < 1e-8);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.tanh(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0; 6]), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(GcError::Contract(_))));
    }

    #[test]
    fn two_branch_gradients_accumulate_additively() {
        // y = sum(x*x) + sum(x): grad = 2x + 1, exactly the sum of the branches
        let x0 = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s1 = tape.sum(sq);
        let s2 = tape.sum(x);
        let y = tape.add(s1, s2).unwrap();
        let g = tape.backward(y).unwrap();
        let expect: Vec<f64> = x0.data.iter().map(|v| 2.0 * v + 1.0).collect();
        assert_eq!(g.get(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn finite_diff_spec_examples() {
        // f(x) = x^2 at 3
        let err = finite_diff_check(
            |t, x| { let y = t.mul(x, x).unwrap(); t.sum(y) },
            &Tensor::scalar(3.0),
            1e-4,
        );
        assert!(err < 1e-6, "{err}");

        // softmax then pick first
        let err = finite_diff_check(
            |t, x| {
                let s = t.softmax(x, Axis::Cols).unwrap();
                t.pick_scalar(s, 0).unwrap()
            },
            &Tensor::new(vec![1, 2], vec![0.3, -0.2]),
            1e-5,
        );
        assert!(err < 1e-5, "{err}");

        // layer_norm then sum on a random 8-vector
        let mut rng = StdRng::seed_from_u64(42);
        let x = Tensor::new(vec![1, 8], (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let err = finite_diff_check(
            |t, x| {
                let y = t.layer_norm(x, None, None, 1e-5).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn all_ops_match_finite_differences_on_random_inputs() {
        let mut rng = StdRng::seed_from_u64(1234);
        let rand_t = |rng: &mut StdRng, shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
        };
        type Case = (&'static str, Vec<usize>, fn(&mut Tape, Var) -> Var);
        let cases: Vec<Case> = vec![
            ("matmul", vec![3, 4], |t, x| {
                let w = t.constant(Tensor::new(vec![4, 2], (0..8).map(|i| 0.3 * i as f64 - 1.0).collect()));
                let y = t.matmul(x, w).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("softmax", vec![2, 5], |t, x| {
                let s = t.softmax(x, Axis::Cols).unwrap();
                let sq = t.mul(s, s).unwrap();
                t.sum(sq)
            }),
            ("layer_norm", vec![2, 6], |t, x| {
                let y = t.layer_norm(x, None, None, 1e-5).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("relu", vec![2, 4], |t, x| {
                let y = t.relu(x);
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("tanh", vec![2, 4], |t, x| {
                let y = t.tanh(x);
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("gelu", vec![2, 4], |t, x| {
                let y = t.gelu(x);
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("scale", vec![2, 4], |t, x| {
                let y = t.scale(x, -1.7);
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("transpose", vec![3, 4], |t, x| {
                let y = t.transpose(x);
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("gather_scatter", vec![4, 3], |t, x| {
                let picked = t.gather_rows(x, &[2, 0]).unwrap();
                let two = t.scale(picked, 2.0);
                let y = t.scatter_rows(x, &[1, 3], two).unwrap();
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
            ("cross_entropy", vec![2, 3], |t, x| {
                t.cross_entropy(x, &[1, 2]).unwrap()
            }),
            ("leaky_relu", vec![2, 4], |t, x| {
                let y = t.leaky_relu(x, 0.2);
                let sq = t.mul(y, y).unwrap();
                t.sum(sq)
            }),
        ];
        for (name, shape, f) in cases {
            for trial in 0..100 {
                let x = rand_t(&mut rng, shape.clone());
                // relu/leaky kinks make fd unreliable near 0; nudge away
                let x = if name == "relu" || name == "leaky_relu" {
                    let mut x = x;
                    for v in &mut x.data {
                        if v.abs() < 1e-3 {
                            *v += 0.01;
                        }
                    }
                    x
                } else {
                    x
                };
                let err = finite_diff_check(f, &x, 1e-5);
                assert!(err < 1e-4, "{name} trial {trial}: fd error {err}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = StdRng::seed_from_u64(99);
            let x = Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let mut t = Tape::new();
            let a = t.constant(x);
            let s = t.softmax(a, Axis::Cols).unwrap();
            let n = t.layer_norm(s, None, None, 1e-5).unwrap();
            let g = t.gelu(n);
            t.value(g).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_contracts() {
        let mut rng = StdRng::seed_from_u64(5);
        let x = Tensor::new(vec![100, 100], vec![1.0; 10_000]);
        let mut t = Tape::new();
        let a = t.constant(x.clone());
        let y = t.dropout(a, 0.0, true, &mut rng).unwrap();
        assert_eq!(t.value(y).data, x.data);

        let y = t.dropout(a, 0.7, false, &mut rng).unwrap();
        assert_eq!(t.value(y).data, x.data);

        let y = t.dropout(a, 0.5, true, &mut rng).unwrap();
        let zeros = t.value(y).data.iter().filter(|v| **v == 0.0).count() as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&zeros), "zero fraction {zeros}");

        assert!(t.dropout(a, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn cross_entropy_spec_examples() {
        let mut t = Tape::new();
        let uniform = t.constant(Tensor::new(vec![1, 3], vec![0.0; 3]));
        let l = t.cross_entropy(uniform, &[1]).unwrap();
        assert!((t.value(l).item() - 3.0_f64.ln()).abs() < 1e-12);

        let confident = t.constant(Tensor::new(vec![1, 3], vec![20.0, 0.0, 0.0]));
        let l = t.cross_entropy(confident, &[0]).unwrap();
        assert!(t.value(l).item() < 1e-8);

        let bad = t.constant(Tensor::new(vec![1, 3], vec![0.0; 3]));
        assert!(t.cross_entropy(bad, &[3]).is_err());
    }
}
