//! Dense-array numeric core with tape-based reverse-mode autodiff.
//!
//! Values are `f32` row-major buffers; every reduction (matmul inner
//! products, softmax row sums, layer-norm statistics, segment pooling)
//! accumulates in `f64` before rounding back to `f32`. A [`Graph`] owns an
//! append-only arena of nodes; creating an op computes its value eagerly and
//! records the inputs, so node ids are already in topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are acyclic by
//! construction: an op can only reference ids that already exist.

use crate::error::{Error, Result};

/// A dense row-major array of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "DenseArray::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![v; len],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2-D constructor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "DenseArray::from_rows",
                    lhs: vec![n],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![m, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Interpret as a matrix: `[M, N]`, or `[N]` as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::ShapeMismatch {
                op: "dims2",
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, n) = self.dims2().expect("row() on non-matrix");
        &self.data[i * n..(i + 1) * n]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product with f64 accumulation: `a[M×K] · b[K×N]`.
pub fn matmul_dense(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a.data[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let av = aik as f64;
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (j, &bv) in brow.iter().enumerate() {
                acc[j] += av * bv as f64;
            }
        }
        for (j, &s) in acc.iter().enumerate() {
            out[i * n + j] = s as f32;
        }
    }
    DenseArray::new(vec![m, n], out)
}

/// Transposed copy of a matrix.
pub fn transpose_dense(a: &DenseArray) -> Result<DenseArray> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    DenseArray::new(vec![n, m], out)
}

/// Row-wise stabilized softmax (f64 accumulation), pure array form.
pub fn softmax_rows_dense(a: &DenseArray) -> Result<DenseArray> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &a.data[i * n..(i + 1) * n];
        softmax_row_into(row, &mut out[i * n..(i + 1) * n]);
    }
    DenseArray::new(a.shape.clone(), out)
}

/// Softmax of one row into a destination slice. Max-subtracted, f64 sums.
pub fn softmax_row_into(row: &[f32], dst: &mut [f32]) {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (d, &x) in dst.iter_mut().zip(row) {
        let e = ((x - mx) as f64).exp();
        *d = e as f32;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d = (*d as f64 / sum) as f32;
    }
}

/// Identifier of a node in a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    SoftmaxRows { a: NodeId },
    TanhElem { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    Transpose { a: NodeId },
    MeanRows { a: NodeId },
    LayerNormRows { a: NodeId, eps: f32 },
    MulRowBroadcast { a: NodeId, g: NodeId },
    AddRowBroadcast { a: NodeId, b: NodeId },
    GatherRows { a: NodeId, idx: Vec<usize> },
    SegmentMean { a: NodeId, seg: Vec<usize>, w: Vec<f32>, n_seg: usize },
    Dropout { a: NodeId, mask: Vec<f32> },
    SumAll { a: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    Mse { pred: NodeId, targets: Vec<f32> },
}

struct Node {
    value: DenseArray,
    grad: Option<Vec<f32>>,
    op: Op,
}

/// Tape-based reverse-mode autodiff graph over dense arrays.
///
/// Single-threaded per graph; independent graphs may run in parallel.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf holding `value`.
    pub fn leaf(&mut self, value: DenseArray) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node, populated after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_array(&self, id: NodeId) -> Option<DenseArray> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| DenseArray {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: DenseArray, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn require_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul_dense(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = softmax_rows_dense(&self.nodes[a.0].value)?;
        Ok(self.push(value, Op::SoftmaxRows { a }))
    }

    pub fn tanh_elem(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a.0].value;
        let data = src.data.iter().map(|&x| (x as f64).tanh() as f32).collect();
        let value = DenseArray {
            shape: src.shape.clone(),
            data,
        };
        self.push(value, Op::TanhElem { a })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let value = DenseArray {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x - y)
            .collect();
        let value = DenseArray {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_same_shape("mul_elem", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let value = DenseArray {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.push(value, Op::MulElem { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let src = &self.nodes[a.0].value;
        let data = src.data.iter().map(|&x| x * c).collect();
        let value = DenseArray {
            shape: src.shape.clone(),
            data,
        };
        self.push(value, Op::Scale { a, c })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let value = transpose_dense(&self.nodes[a.0].value)?;
        Ok(self.push(value, Op::Transpose { a }))
    }

    /// Mean over rows: `[M×N] -> [1×N]`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[a.0].value.dims2()?;
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0f32; n];
        for j in 0..n {
            let mut acc = 0.0f64;
            for i in 0..m {
                acc += src[i * n + j] as f64;
            }
            out[j] = (acc / m as f64) as f32;
        }
        let value = DenseArray {
            shape: vec![1, n],
            data: out,
        };
        Ok(self.push(value, Op::MeanRows { a }))
    }

    /// Standardize each row to zero mean, unit variance (eps-stabilized).
    pub fn layer_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        const EPS: f32 = 1e-5;
        let (m, n) = self.nodes[a.0].value.dims2()?;
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean: f64 = row.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            let var: f64 =
                row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS as f64).sqrt();
            for j in 0..n {
                out[i * n + j] = ((row[j] as f64 - mean) * inv) as f32;
            }
        }
        let value = DenseArray {
            shape: self.shape(a).to_vec(),
            data: out,
        };
        Ok(self.push(value, Op::LayerNormRows { a, eps: EPS }))
    }

    /// `a[M×N] ⊙ g` with `g` broadcast over rows (`g` is `[1×N]`).
    pub fn mul_row_broadcast(&mut self, a: NodeId, g: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[a.0].value.dims2()?;
        let (gm, gn) = self.nodes[g.0].value.dims2()?;
        if gm != 1 || gn != n {
            return Err(Error::ShapeMismatch {
                op: "mul_row_broadcast",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(g).to_vec(),
            });
        }
        let gdata = self.nodes[g.0].value.data.clone();
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = src[i * n + j] * gdata[j];
            }
        }
        let value = DenseArray {
            shape: self.shape(a).to_vec(),
            data: out,
        };
        Ok(self.push(value, Op::MulRowBroadcast { a, g }))
    }

    /// `a[M×N] + b` with `b` broadcast over rows (`b` is `[1×N]`).
    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[a.0].value.dims2()?;
        let (bm, bn) = self.nodes[b.0].value.dims2()?;
        if bm != 1 || bn != n {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bdata = self.nodes[b.0].value.data.clone();
        let src = &self.nodes[a.0].value.data;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = src[i * n + j] + bdata[j];
            }
        }
        let value = DenseArray {
            shape: self.shape(a).to_vec(),
            data: out,
        };
        Ok(self.push(value, Op::AddRowBroadcast { a, b }))
    }

    /// Gather rows by index; duplicate indices are permitted (backward
    /// scatter-adds).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (m, n) = self.nodes[a.0].value.dims2()?;
        for &i in idx {
            if i >= m {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: m,
                    context: "gather_rows",
                });
            }
        }
        let src = &self.nodes[a.0].value.data;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let value = DenseArray {
            shape: vec![idx.len(), n],
            data: out,
        };
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Weighted per-segment mean over rows.
    ///
    /// `out[s] = Σ_{i: seg[i]=s} w[i]·a[i] / Σ_{i: seg[i]=s} w[i]`. Every
    /// weight must be strictly positive and every segment in `0..n_seg` must
    /// receive at least one row. Backward distributes each segment's
    /// gradient to its rows in proportion `w[i]/Σw`.
    pub fn segment_mean(
        &mut self,
        a: NodeId,
        seg: &[usize],
        w: &[f32],
        n_seg: usize,
    ) -> Result<NodeId> {
        let (m, n) = self.nodes[a.0].value.dims2()?;
        if seg.len() != m || w.len() != m {
            return Err(Error::ShapeMismatch {
                op: "segment_mean",
                lhs: vec![m],
                rhs: vec![seg.len(), w.len()],
            });
        }
        for &s in seg {
            if s >= n_seg {
                return Err(Error::IndexOutOfRange {
                    index: s,
                    len: n_seg,
                    context: "segment_mean",
                });
            }
        }
        for (i, &wi) in w.iter().enumerate() {
            if !(wi > 0.0) {
                return Err(Error::Domain(format!(
                    "segment_mean weight {wi} at row {i} is not strictly positive"
                )));
            }
        }
        let src = &self.nodes[a.0].value.data;
        let mut sums = vec![0.0f64; n_seg * n];
        let mut wsum = vec![0.0f64; n_seg];
        for (i, (&s, &wi)) in seg.iter().zip(w).enumerate() {
            let wv = wi as f64;
            wsum[s] += wv;
            let row = &src[i * n..(i + 1) * n];
            let dst = &mut sums[s * n..(s + 1) * n];
            for (d, &x) in dst.iter_mut().zip(row) {
                *d += wv * x as f64;
            }
        }
        for (s, &ws) in wsum.iter().enumerate() {
            if ws == 0.0 {
                return Err(Error::Domain(format!("segment {s} has no member rows")));
            }
        }
        let mut out = vec![0.0f32; n_seg * n];
        for s in 0..n_seg {
            for j in 0..n {
                out[s * n + j] = (sums[s * n + j] / wsum[s]) as f32;
            }
        }
        let value = DenseArray {
            shape: vec![n_seg, n],
            data: out,
        };
        Ok(self.push(
            value,
            Op::SegmentMean {
                a,
                seg: seg.to_vec(),
                w: w.to_vec(),
                n_seg,
            },
        ))
    }

    /// Inverted dropout with a caller-supplied keep mask of the same length
    /// as `a` (entries are `0.0` or `1/(1-rate)`).
    pub fn dropout_with_mask(&mut self, a: NodeId, mask: Vec<f32>) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        if mask.len() != src.data.len() {
            return Err(Error::ShapeMismatch {
                op: "dropout",
                lhs: src.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let data = src.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = DenseArray {
            shape: src.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Dropout { a, mask }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let acc: f64 = self.nodes[a.0].value.data.iter().map(|&x| x as f64).sum();
        let value = DenseArray::scalar(acc as f32);
        self.push(value, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let len = self.nodes[a.0].value.len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / len as f32)
    }

    /// Mean cross-entropy of row logits against integer labels (stable
    /// log-sum-exp), as a scalar node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (m, k) = self.nodes[logits.0].value.dims2()?;
        if labels.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![m],
                rhs: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= k {
                return Err(Error::IndexOutOfRange {
                    index: l,
                    len: k,
                    context: "cross_entropy labels",
                });
            }
        }
        let src = &self.nodes[logits.0].value.data;
        let mut acc = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse: f64 = row.iter().map(|&x| (x as f64 - mx).exp()).sum::<f64>().ln() + mx;
            acc += lse - row[label] as f64;
        }
        let value = DenseArray::scalar((acc / m as f64) as f32);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean squared error against fixed targets, as a scalar node.
    pub fn mse(&mut self, pred: NodeId, targets: &[f32]) -> Result<NodeId> {
        let src = &self.nodes[pred.0].value;
        if targets.len() != src.data.len() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: src.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let acc: f64 = src
            .data
            .iter()
            .zip(targets)
            .map(|(&p, &t)| ((p - t) as f64).powi(2))
            .sum();
        let value = DenseArray::scalar((acc / targets.len().max(1) as f64) as f32);
        Ok(self.push(
            value,
            Op::Mse {
                pred,
                targets: targets.to_vec(),
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root; populates the gradient of every
    /// node reachable from it. Deterministic for a fixed graph.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.nodes[root.0].value.shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut reachable = vec![false; self.nodes.len()];
        reachable[root.0] = true;
        for i in (0..=root.0).rev() {
            if !reachable[i] {
                continue;
            }
            for p in op_parents(&self.nodes[i].op) {
                reachable[p.0] = true;
            }
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if reachable[i] {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        self.nodes[root.0].grad.as_mut().unwrap()[0] = 1.0;

        for i in (0..=root.0).rev() {
            if !reachable[i] {
                continue;
            }
            let grad = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            self.apply_backward(i, &op, &grad);
        }
        Ok(())
    }

    fn add_to_grad(&mut self, id: NodeId, delta: &[f32]) {
        let g = self.nodes[id.0]
            .grad
            .as_mut()
            .expect("gradient buffer missing for reachable node");
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    fn apply_backward(&mut self, node_idx: usize, op: &Op, grad: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let ga = {
                    let g = DenseArray {
                        shape: self.nodes[node_idx].value.shape.clone(),
                        data: grad.to_vec(),
                    };
                    let bt = transpose_dense(&self.nodes[b.0].value).unwrap();
                    matmul_dense(&g, &bt).unwrap()
                };
                let gb = {
                    let g = DenseArray {
                        shape: self.nodes[node_idx].value.shape.clone(),
                        data: grad.to_vec(),
                    };
                    let at = transpose_dense(&self.nodes[a.0].value).unwrap();
                    matmul_dense(&at, &g).unwrap()
                };
                self.add_to_grad(*a, ga.data());
                self.add_to_grad(*b, gb.data());
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = self.nodes[node_idx].value.dims2().unwrap();
                let p = self.nodes[node_idx].value.data.clone();
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    let mut dot = 0.0f64;
                    for j in 0..n {
                        dot += grad[i * n + j] as f64 * p[i * n + j] as f64;
                    }
                    for j in 0..n {
                        da[i * n + j] =
                            (p[i * n + j] as f64 * (grad[i * n + j] as f64 - dot)) as f32;
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::TanhElem { a } => {
                let out = self.nodes[node_idx].value.data.clone();
                let da: Vec<f32> = grad
                    .iter()
                    .zip(&out)
                    .map(|(&g, &t)| g * (1.0 - t * t))
                    .collect();
                self.add_to_grad(*a, &da);
            }
            Op::Add { a, b } => {
                self.add_to_grad(*a, grad);
                self.add_to_grad(*b, grad);
            }
            Op::Sub { a, b } => {
                self.add_to_grad(*a, grad);
                let neg: Vec<f32> = grad.iter().map(|&g| -g).collect();
                self.add_to_grad(*b, &neg);
            }
            Op::MulElem { a, b } => {
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                let da: Vec<f32> = grad.iter().zip(&bv).map(|(&g, &y)| g * y).collect();
                let db: Vec<f32> = grad.iter().zip(&av).map(|(&g, &x)| g * x).collect();
                self.add_to_grad(*a, &da);
                self.add_to_grad(*b, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<f32> = grad.iter().map(|&g| g * c).collect();
                self.add_to_grad(*a, &da);
            }
            Op::Transpose { a } => {
                let g = DenseArray {
                    shape: self.nodes[node_idx].value.shape.clone(),
                    data: grad.to_vec(),
                };
                let da = transpose_dense(&g).unwrap();
                self.add_to_grad(*a, da.data());
            }
            Op::MeanRows { a } => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                let inv = 1.0 / m as f32;
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = grad[j] * inv;
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::LayerNormRows { a, eps } => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                let x = self.nodes[a.0].value.data.clone();
                let xhat = self.nodes[node_idx].value.data.clone();
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    let row = &x[i * n..(i + 1) * n];
                    let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                    let var: f64 =
                        row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + *eps as f64).sqrt();
                    let mut gsum = 0.0f64;
                    let mut gx = 0.0f64;
                    for j in 0..n {
                        gsum += grad[i * n + j] as f64;
                        gx += grad[i * n + j] as f64 * xhat[i * n + j] as f64;
                    }
                    let gmean = gsum / n as f64;
                    let gxmean = gx / n as f64;
                    for j in 0..n {
                        let gj = grad[i * n + j] as f64;
                        let xh = xhat[i * n + j] as f64;
                        da[i * n + j] = (inv * (gj - gmean - xh * gxmean)) as f32;
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::MulRowBroadcast { a, g } => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                let av = self.nodes[a.0].value.data.clone();
                let gv = self.nodes[g.0].value.data.clone();
                let mut da = vec![0.0f32; m * n];
                let mut dg64 = vec![0.0f64; n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = grad[i * n + j] * gv[j];
                        dg64[j] += grad[i * n + j] as f64 * av[i * n + j] as f64;
                    }
                }
                let dg: Vec<f32> = dg64.iter().map(|&v| v as f32).collect();
                self.add_to_grad(*a, &da);
                self.add_to_grad(*g, &dg);
            }
            Op::AddRowBroadcast { a, b } => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                let mut db64 = vec![0.0f64; n];
                for i in 0..m {
                    for j in 0..n {
                        db64[j] += grad[i * n + j] as f64;
                    }
                }
                let db: Vec<f32> = db64.iter().map(|&v| v as f32).collect();
                self.add_to_grad(*a, grad);
                self.add_to_grad(*b, &db);
            }
            Op::GatherRows { a, idx } => {
                let (_, n) = self.nodes[a.0].value.dims2().unwrap();
                let mut da = vec![0.0f32; self.nodes[a.0].value.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[src * n + j] += grad[r * n + j];
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::SegmentMean { a, seg, w, n_seg } => {
                let (m, n) = self.nodes[a.0].value.dims2().unwrap();
                let mut wsum = vec![0.0f64; *n_seg];
                for (&s, &wi) in seg.iter().zip(w) {
                    wsum[s] += wi as f64;
                }
                let mut da = vec![0.0f32; m * n];
                for i in 0..m {
                    let s = seg[i];
                    let frac = w[i] as f64 / wsum[s];
                    for j in 0..n {
                        da[i * n + j] = (grad[s * n + j] as f64 * frac) as f32;
                    }
                }
                self.add_to_grad(*a, &da);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<f32> = grad.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.add_to_grad(*a, &da);
            }
            Op::SumAll { a } => {
                let g = grad[0];
                let da = vec![g; self.nodes[a.0].value.len()];
                self.add_to_grad(*a, &da);
            }
            Op::CrossEntropy { logits, labels } => {
                let (m, k) = self.nodes[logits.0].value.dims2().unwrap();
                let src = self.nodes[logits.0].value.data.clone();
                let g = grad[0] as f64 / m as f64;
                let mut da = vec![0.0f32; m * k];
                for (i, &label) in labels.iter().enumerate() {
                    let row = &src[i * k..(i + 1) * k];
                    let mut p = vec![0.0f32; k];
                    softmax_row_into(row, &mut p);
                    for j in 0..k {
                        let ind = if j == label { 1.0 } else { 0.0 };
                        da[i * k + j] = (g * (p[j] as f64 - ind)) as f32;
                    }
                }
                self.add_to_grad(*logits, &da);
            }
            Op::Mse { pred, targets } => {
                let src = self.nodes[pred.0].value.data.clone();
                let g = grad[0] as f64 * 2.0 / targets.len().max(1) as f64;
                let da: Vec<f32> = src
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| (g * (p - t) as f64) as f32)
                    .collect();
                self.add_to_grad(*pred, &da);
            }
        }
    }
}

fn op_parents(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::MulElem { a, b }
        | Op::MulRowBroadcast { a, g: b }
        | Op::AddRowBroadcast { a, b } => vec![*a, *b],
        Op::SoftmaxRows { a }
        | Op::TanhElem { a }
        | Op::Scale { a, .. }
        | Op::Transpose { a }
        | Op::MeanRows { a }
        | Op::LayerNormRows { a, .. }
        | Op::GatherRows { a, .. }
        | Op::SegmentMean { a, .. }
        | Op::Dropout { a, .. }
        | Op::SumAll { a } => vec![*a],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Mse { pred, .. } => vec![*pred],
    }
}

/// Build an inverted-dropout keep mask: entries are `0.0` with probability
/// `rate`, else `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f32, rng: &mut impl rand::Rng) -> Vec<f32> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arr2(rows: &[Vec<f32>]) -> DenseArray {
        DenseArray::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.leaf(arr2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = g.leaf(arr2(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_dot() {
        let mut g = Graph::new();
        let a = g.leaf(arr2(&[vec![1.0, 2.0]]));
        let b = g.leaf(arr2(&[vec![3.0], vec![4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(DenseArray::zeros(vec![2, 3]));
        let b = g.leaf(DenseArray::zeros(vec![2, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_column_sums() {
        // d sum(a·b) / da[i][k] = Σ_j b[k][j]
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a_data: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let a = g.leaf(DenseArray::new(vec![3, 4], a_data).unwrap());
        let b = g.leaf(DenseArray::new(vec![4, 2], b_data.clone()).unwrap());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum_all(c);
        g.backward(s).unwrap();
        let ga = g.grad(a).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let colsum: f32 = b_data[k * 2] + b_data[k * 2 + 1];
                assert!((ga[i * 4 + k] - colsum).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let mut g = Graph::new();
        let a = g.leaf(arr2(&[vec![0.0, 0.0], vec![2.0f32.ln(), 0.0]]));
        let s = g.softmax_rows(a).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 0.5).abs() < 1e-6 && (v[1] - 0.5).abs() < 1e-6);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-6 && (v[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..20).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let base = DenseArray::new(vec![4, 5], data.clone()).unwrap();
        let shifted =
            DenseArray::new(vec![4, 5], data.iter().map(|x| x + 11.25).collect()).unwrap();
        let p0 = softmax_rows_dense(&base).unwrap();
        let p1 = softmax_rows_dense(&shifted).unwrap();
        for i in 0..4 {
            let sum: f64 = p0.row(i).iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        for (x, y) in p0.data().iter().zip(p1.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_gradient_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let coeff: Vec<f32> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rel = check_gradient(
            &data,
            |g, x| {
                let a = g.leaf(DenseArray::new(vec![2, 5], x.to_vec()).unwrap());
                let s = g.softmax_rows(a).unwrap();
                let c = g.leaf(DenseArray::new(vec![2, 5], coeff.clone()).unwrap());
                let prod = g.mul_elem(s, c).unwrap();
                (a, g.sum_all(prod))
            },
            1e-3,
        );
        assert!(rel < 1e-3, "rel err {rel}");
    }

    #[test]
    fn segment_mean_examples() {
        let mut g = Graph::new();
        // plain average of three rows into one segment
        let a = g.leaf(arr2(&[vec![2.0], vec![4.0], vec![6.0]]));
        let m = g.segment_mean(a, &[0, 0, 0], &[1.0, 1.0, 1.0], 1).unwrap();
        assert_eq!(g.value(m).data(), &[4.0]);
        // singleton segments are the identity
        let b = g.leaf(arr2(&[vec![2.0], vec![4.0]]));
        let m2 = g.segment_mean(b, &[0, 1], &[1.0, 1.0], 2).unwrap();
        assert_eq!(g.value(m2).data(), &[2.0, 4.0]);
        // size-weighted variant: (3·1 + 1·3)/4
        let c = g.leaf(arr2(&[vec![1.0], vec![3.0]]));
        let m3 = g.segment_mean(c, &[0, 0], &[3.0, 1.0], 1).unwrap();
        assert_eq!(g.value(m3).data(), &[1.5]);
    }

    #[test]
    fn segment_mean_rejects_bad_inputs() {
        let mut g = Graph::new();
        let a = g.leaf(arr2(&[vec![1.0], vec![2.0]]));
        assert!(matches!(
            g.segment_mean(a, &[0, 5], &[1.0, 1.0], 2),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            g.segment_mean(a, &[0, 1], &[1.0, 0.0], 2),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(DenseArray::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_half_square_gives_input() {
        let mut g = Graph::new();
        let data = vec![1.0, -2.0, 3.0, 0.25];
        let x = g.leaf(DenseArray::new(vec![2, 2], data.clone()).unwrap());
        let sq = g.mul_elem(x, x).unwrap();
        let s = g.sum_all(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        let gx = g.grad(x).unwrap();
        for (a, b) in gx.iter().zip(&data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_non_scalar_root_errors() {
        let mut g = Graph::new();
        let x = g.leaf(DenseArray::zeros(vec![2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn gather_rows_duplicates_scatter_add() {
        let mut g = Graph::new();
        let x = g.leaf(arr2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let gth = g.gather_rows(x, &[0, 0, 1]).unwrap();
        let s = g.sum_all(gth);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut g = Graph::new();
        let x = g.leaf(DenseArray::zeros(vec![2, 2]));
        assert!(matches!(
            g.gather_rows(x, &[3]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        // One composite touching tanh, layer norm, broadcasts, transpose,
        // mean_rows, segment_mean, gather and cross-entropy.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let data: Vec<f32> = (0..24).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let gamma: Vec<f32> = (0..4).map(|_| rng.gen_range(0.5..1.5)).collect();
            let gamma2 = gamma.clone();
            let rel = check_gradient(
                &data,
                move |g, x| {
                    let a = g.leaf(DenseArray::new(vec![6, 4], x.to_vec()).unwrap());
                    let ln = g.layer_norm_rows(a).unwrap();
                    let gm = g.leaf(DenseArray::new(vec![1, 4], gamma2.clone()).unwrap());
                    let scaled = g.mul_row_broadcast(ln, gm).unwrap();
                    let th = g.tanh_elem(scaled);
                    let gth = g.gather_rows(th, &[0, 2, 2, 4, 5]).unwrap();
                    let seg = g
                        .segment_mean(gth, &[0, 0, 1, 1, 2], &[1.0, 2.0, 1.0, 1.0, 3.0], 3)
                        .unwrap();
                    let t = g.transpose(seg).unwrap();
                    let mr = g.mean_rows(t).unwrap();
                    let ce_in = g.tanh_elem(mr);
                    let loss = g.cross_entropy(ce_in, &[1]).unwrap();
                    (a, loss)
                },
                1e-3,
            );
            assert!(rel < 1e-3, "rel err {rel}");
        }
    }

    #[test]
    fn rerun_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let data: Vec<f32> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let x = g.leaf(DenseArray::new(vec![5, 6], data).unwrap());
            let sm = g.softmax_rows(x).unwrap();
            let t = g.tanh_elem(sm);
            let s = g.mean_all(t);
            g.backward(s).unwrap();
            (g.value(s).data().to_vec(), g.grad(x).unwrap().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn dropout_mask_scales_kept_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = dropout_mask(1000, 0.25, &mut rng);
        let keep = 1.0 / 0.75;
        assert!(mask.iter().all(|&m| m == 0.0 || (m - keep).abs() < 1e-7));
        let kept = mask.iter().filter(|&&m| m != 0.0).count();
        assert!(kept > 650 && kept < 850, "kept {kept}");
    }

    #[test]
    fn mse_and_dropout_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = dropout_mask(8, 0.25, &mut ChaCha8Rng::seed_from_u64(2));
        let targets: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rel = check_gradient(
            &data,
            move |g, x| {
                let a = g.leaf(DenseArray::new(vec![8, 1], x.to_vec()).unwrap());
                let d = g.dropout_with_mask(a, mask.clone()).unwrap();
                let loss = g.mse(d, &targets).unwrap();
                (a, loss)
            },
            1e-3,
        );
        assert!(rel < 1e-3, "rel err {rel}");
    }

    #[test]
    fn rel_err_helper_sane() {
        assert!(max_rel_err(&[1.0, 2.0], &[1.0, 2.0]) < 1e-12);
        assert!(max_rel_err(&[1.0], &[1.1]) > 0.05);
    }
}
