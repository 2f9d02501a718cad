//! Reverse-mode automatic differentiation over a single-threaded tape.
//!
//! Every op appends a node whose parents were created earlier, so walking
//! the tape backwards from the loss visits each node after all of its
//! consumers. Tapes are cheap and confined to one thread; parallelism
//! happens across independent tapes, never within one.

use super::tensor::Tensor;
use super::NumError;

pub type NumResult<T> = Result<T, NumError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// How a binary elementwise op broadcasts its right operand.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    /// Identical shapes.
    Same,
    /// lhs is `[m, n]`, rhs is `[n]`: rhs repeated across rows.
    Row,
    /// rhs is a single value.
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Bcast),
    Mul(Bcast),
    Matmul,
    Tanh,
    Sigmoid,
    Elu,
    Softplus,
    Exp,
    Ln,
    Scale(f64),
    Softmax,
    LogSoftmax,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    EmbedLookup { ids: Vec<usize> },
    Pick { ids: Vec<usize> },
    Gather2d { rows: Vec<usize>, cols: Vec<usize> },
    Conv1d,
    MaxPoolTime { argmax: Vec<usize> },
    LayerNorm { eps: f64 },
    Sum,
    Mean,
    CrfLogZ,
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Op,
}

/// The tape of operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_FLOOR: f64 = 1e-300;

fn lse(xs: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.collect();
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, op: Op) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value out of {:?}", op);
        self.nodes.push(Node { value, parents, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a constant/input node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, vec![], Op::Leaf)
    }

    fn bcast_of(&self, op: &'static str, a: NodeId, b: NodeId) -> NumResult<Bcast> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).len() == 1 {
            Ok(Bcast::Scalar)
        } else if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            Ok(Bcast::Row)
        } else {
            Err(NumError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let bc = self.bcast_of("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = ta.clone();
        match bc {
            Bcast::Same => {
                for (o, v) in out.data_mut().iter_mut().zip(tb.data()) {
                    *o += v;
                }
            }
            Bcast::Scalar => {
                let c = tb.data()[0];
                for o in out.data_mut().iter_mut() {
                    *o += c;
                }
            }
            Bcast::Row => {
                let n = tb.len();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o += tb.data()[i % n];
                }
            }
        }
        Ok(self.push(out, vec![a.0, b.0], Op::Add(bc)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let bc = self.bcast_of("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = ta.clone();
        match bc {
            Bcast::Same => {
                for (o, v) in out.data_mut().iter_mut().zip(tb.data()) {
                    *o *= v;
                }
            }
            Bcast::Scalar => {
                let c = tb.data()[0];
                for o in out.data_mut().iter_mut() {
                    *o *= c;
                }
            }
            Bcast::Row => {
                let n = tb.len();
                for (i, o) in out.data_mut().iter_mut().enumerate() {
                    *o *= tb.data()[i % n];
                }
            }
        }
        Ok(self.push(out, vec![a.0, b.0], Op::Mul(bc)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NumResult<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = ta.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = tb.row(p);
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        Ok(self.push(t, vec![a.0, b.0], Op::Matmul))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(out, vec![a.0], Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, vec![a.0], Op::Sigmoid)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push(out, vec![a.0], Op::Elu)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(softplus);
        self.push(out, vec![a.0], Op::Softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::exp);
        self.push(out, vec![a.0], Op::Exp)
    }

    /// Natural log with a floor guard so `ln(0)` stays finite.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x.max(LN_FLOOR).ln());
        self.push(out, vec![a.0], Op::Ln)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).map(|x| c * x);
        self.push(out, vec![a.0], Op::Scale(c))
    }

    fn rows_cols(t: &Tensor) -> (usize, usize) {
        match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("softmax family needs 1-D or 2-D tensor, got {:?}", s),
        }
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (rows, cols) = Self::rows_cols(ta);
        let mut out = ta.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(out, vec![a.0], Op::Softmax)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (rows, cols) = Self::rows_cols(ta);
        let mut out = ta.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            for v in row.iter_mut() {
                *v -= z;
            }
        }
        self.push(out, vec![a.0], Op::LogSoftmax)
    }

    /// Concatenate 1-D tensors end to end or 2-D tensors along `axis`.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NumResult<NodeId> {
        if parts.is_empty() {
            return Err(NumError::Invalid("concat of zero tensors".into()));
        }
        let rank = self.value(parts[0]).rank();
        if rank == 1 {
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            let t = Tensor::from_vec(data);
            return Ok(self.push(t, parts.iter().map(|p| p.0).collect(), Op::Concat { axis: 0 }));
        }
        if axis == 0 {
            let cols = self.value(parts[0]).dims2()?.1;
            let mut rows = 0;
            let mut data = Vec::new();
            for &p in parts {
                let (r, c) = self.value(p).dims2()?;
                if c != cols {
                    return Err(NumError::ShapeMismatch {
                        op: "concat",
                        lhs: self.value(parts[0]).shape().to_vec(),
                        rhs: self.value(p).shape().to_vec(),
                    });
                }
                rows += r;
                data.extend_from_slice(self.value(p).data());
            }
            let t = Tensor::new(vec![rows, cols], data).expect("concat shape");
            Ok(self.push(t, parts.iter().map(|p| p.0).collect(), Op::Concat { axis }))
        } else if axis == 1 {
            let rows = self.value(parts[0]).dims2()?.0;
            let mut cols = 0;
            for &p in parts {
                let (r, c) = self.value(p).dims2()?;
                if r != rows {
                    return Err(NumError::ShapeMismatch {
                        op: "concat",
                        lhs: self.value(parts[0]).shape().to_vec(),
                        rhs: self.value(p).shape().to_vec(),
                    });
                }
                cols += c;
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            let t = Tensor::new(vec![rows, cols], data).expect("concat shape");
            Ok(self.push(t, parts.iter().map(|p| p.0).collect(), Op::Concat { axis }))
        } else {
            Err(NumError::Invalid(format!("concat axis {} out of range", axis)))
        }
    }

    /// Contiguous slice `start..end` along `axis` (1-D: axis 0; 2-D: 0 or 1).
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> NumResult<NodeId> {
        let ta = self.value(a);
        let out = match (ta.rank(), axis) {
            (1, 0) => {
                if end > ta.len() || start > end {
                    return Err(NumError::Invalid(format!(
                        "slice {}..{} out of bounds for {:?}",
                        start,
                        end,
                        ta.shape()
                    )));
                }
                Tensor::from_vec(ta.data()[start..end].to_vec())
            }
            (2, 0) => {
                let (r, c) = ta.dims2()?;
                if end > r || start > end {
                    return Err(NumError::Invalid(format!(
                        "slice rows {}..{} out of bounds for {:?}",
                        start,
                        end,
                        ta.shape()
                    )));
                }
                Tensor::new(vec![end - start, c], ta.data()[start * c..end * c].to_vec())
                    .expect("slice shape")
            }
            (2, 1) => {
                let (r, c) = ta.dims2()?;
                if end > c || start > end {
                    return Err(NumError::Invalid(format!(
                        "slice cols {}..{} out of bounds for {:?}",
                        start,
                        end,
                        ta.shape()
                    )));
                }
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&ta.row(i)[start..end]);
                }
                Tensor::new(vec![r, end - start], data).expect("slice shape")
            }
            _ => {
                return Err(NumError::Invalid(format!(
                    "slice axis {} unsupported for shape {:?}",
                    axis,
                    ta.shape()
                )))
            }
        };
        Ok(self.push(out, vec![a.0], Op::Slice { axis, start }))
    }

    /// Gather rows of an embedding table: `out[i] = table[ids[i]]`.
    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> NumResult<NodeId> {
        let (v, d) = self.value(table).dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumError::Invalid(format!(
                    "embedding id {} out of range (table has {} rows)",
                    id, v
                )));
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data).expect("embed shape");
        Ok(self.push(t, vec![table.0], Op::EmbedLookup { ids: ids.to_vec() }))
    }

    /// Per-row gather: `out[t] = m[t, ids[t]]`.
    pub fn pick(&mut self, m: NodeId, ids: &[usize]) -> NumResult<NodeId> {
        let (r, c) = self.value(m).dims2()?;
        if ids.len() != r {
            return Err(NumError::Invalid(format!(
                "pick needs {} indices for {} rows",
                r,
                ids.len()
            )));
        }
        let mut data = Vec::with_capacity(r);
        for (t, &id) in ids.iter().enumerate() {
            if id >= c {
                return Err(NumError::Invalid(format!("pick column {} out of {}", id, c)));
            }
            data.push(self.value(m).at2(t, id));
        }
        let t = Tensor::from_vec(data);
        Ok(self.push(t, vec![m.0], Op::Pick { ids: ids.to_vec() }))
    }

    /// Arbitrary-entry gather from a 2-D tensor: `out[i] = m[rows[i], cols[i]]`.
    pub fn gather2d(&mut self, m: NodeId, rows: &[usize], cols: &[usize]) -> NumResult<NodeId> {
        let (r, c) = self.value(m).dims2()?;
        if rows.len() != cols.len() {
            return Err(NumError::Invalid("gather2d index length mismatch".into()));
        }
        let mut data = Vec::with_capacity(rows.len());
        for (&i, &j) in rows.iter().zip(cols) {
            if i >= r || j >= c {
                return Err(NumError::Invalid(format!(
                    "gather2d ({}, {}) out of bounds for {:?}",
                    i,
                    j,
                    self.value(m).shape()
                )));
            }
            data.push(self.value(m).at2(i, j));
        }
        let t = Tensor::from_vec(data);
        Ok(self.push(
            t,
            vec![m.0],
            Op::Gather2d {
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
        ))
    }

    /// Valid (no padding) 1-D convolution over time.
    ///
    /// `input` is `[T, c_in]`, `kernel` is `[w, c_in, c_out]`; output is
    /// `[T - w + 1, c_out]`.
    pub fn conv1d(&mut self, input: NodeId, kernel: NodeId) -> NumResult<NodeId> {
        let (t_len, c_in) = self.value(input).dims2()?;
        let ks = self.value(kernel).shape().to_vec();
        if ks.len() != 3 || ks[1] != c_in {
            return Err(NumError::ShapeMismatch {
                op: "conv1d",
                lhs: self.value(input).shape().to_vec(),
                rhs: ks,
            });
        }
        let (w, c_out) = (ks[0], ks[2]);
        if t_len < w {
            return Err(NumError::Invalid(format!(
                "conv1d input length {} shorter than kernel width {}",
                t_len, w
            )));
        }
        let t_out = t_len - w + 1;
        let inp = self.value(input).data().to_vec();
        let ker = self.value(kernel).data().to_vec();
        let mut out = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            for dt in 0..w {
                for ci in 0..c_in {
                    let x = inp[(t + dt) * c_in + ci];
                    if x == 0.0 {
                        continue;
                    }
                    let kbase = (dt * c_in + ci) * c_out;
                    let obase = t * c_out;
                    for co in 0..c_out {
                        out[obase + co] += x * ker[kbase + co];
                    }
                }
            }
        }
        let t = Tensor::new(vec![t_out, c_out], out).expect("conv1d shape");
        Ok(self.push(t, vec![input.0, kernel.0], Op::Conv1d))
    }

    /// Max over the time axis of `[T, C]`, producing `[C]`.
    pub fn max_pool_time(&mut self, a: NodeId) -> NumResult<NodeId> {
        let (t_len, c) = self.value(a).dims2()?;
        if t_len == 0 {
            return Err(NumError::Invalid("max_pool_time over empty input".into()));
        }
        let mut best = vec![0usize; c];
        let mut out = self.value(a).row(0).to_vec();
        for t in 1..t_len {
            for (j, &v) in self.value(a).row(t).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    best[j] = t;
                }
            }
        }
        let t = Tensor::from_vec(out);
        Ok(self.push(t, vec![a.0], Op::MaxPoolTime { argmax: best }))
    }

    /// Normalize the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let ta = self.value(a);
        let (rows, cols) = Self::rows_cols(ta);
        let mut out = ta.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(out, vec![a.0], Op::LayerNorm { eps })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), vec![a.0], Op::Sum)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s: f64 = self.value(a).data().iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), vec![a.0], Op::Mean)
    }

    /// Log-partition of a linear-chain CRF.
    ///
    /// `emissions` is `[T, L]`; `transitions` is `[L + 2, L + 2]` with the
    /// begin state at row `L` and the end state at column `L + 1`.
    pub fn crf_log_partition(&mut self, emissions: NodeId, transitions: NodeId) -> NumResult<NodeId> {
        let (t_len, l) = self.value(emissions).dims2()?;
        let (tr, tc) = self.value(transitions).dims2()?;
        if tr != l + 2 || tc != l + 2 {
            return Err(NumError::ShapeMismatch {
                op: "crf_log_partition",
                lhs: vec![t_len, l],
                rhs: vec![tr, tc],
            });
        }
        if t_len == 0 {
            return Err(NumError::Invalid("crf over empty sequence".into()));
        }
        let alpha = crf_forward(self.value(emissions), self.value(transitions));
        let trans = self.value(transitions);
        let logz = lse((0..l).map(|j| alpha[t_len - 1][j] + trans.at2(j, l + 1)));
        Ok(self.push(Tensor::scalar(logz), vec![emissions.0, transitions.0], Op::CrfLogZ))
    }

    /// Reverse sweep from a scalar `loss`; returns one gradient slot per node.
    pub fn backward(&self, loss: NodeId) -> NumResult<Vec<Option<Tensor>>> {
        if self.value(loss).len() != 1 {
            return Err(NumError::NotScalar {
                op: "backward",
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(bc) => {
                    let (pa, pb) = (node.parents[0], node.parents[1]);
                    accumulate(&mut grads, pa, g.clone());
                    match bc {
                        Bcast::Same => accumulate(&mut grads, pb, g),
                        Bcast::Scalar => {
                            accumulate(&mut grads, pb, Tensor::scalar(g.data().iter().sum()))
                        }
                        Bcast::Row => {
                            let n = self.nodes[pb].value.len();
                            let mut acc = vec![0.0; n];
                            for (k, v) in g.data().iter().enumerate() {
                                acc[k % n] += v;
                            }
                            accumulate(&mut grads, pb, Tensor::from_vec(acc));
                        }
                    }
                }
                Op::Mul(bc) => {
                    let (pa, pb) = (node.parents[0], node.parents[1]);
                    let (va, vb) = (&self.nodes[pa].value, &self.nodes[pb].value);
                    match bc {
                        Bcast::Same => {
                            let ga = elemwise(&g, vb, |g, b| g * b);
                            let gb = elemwise(&g, va, |g, a| g * a);
                            accumulate(&mut grads, pa, ga);
                            accumulate(&mut grads, pb, gb);
                        }
                        Bcast::Scalar => {
                            let c = vb.data()[0];
                            accumulate(&mut grads, pa, g.map(|x| x * c));
                            let dot: f64 =
                                g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                            accumulate(&mut grads, pb, Tensor::scalar(dot));
                        }
                        Bcast::Row => {
                            let n = vb.len();
                            let mut ga = g.clone();
                            for (k, v) in ga.data_mut().iter_mut().enumerate() {
                                *v *= vb.data()[k % n];
                            }
                            accumulate(&mut grads, pa, ga);
                            let mut acc = vec![0.0; n];
                            for (k, (gv, av)) in g.data().iter().zip(va.data()).enumerate() {
                                acc[k % n] += gv * av;
                            }
                            accumulate(&mut grads, pb, Tensor::from_vec(acc));
                        }
                    }
                }
                Op::Matmul => {
                    let (pa, pb) = (node.parents[0], node.parents[1]);
                    let (va, vb) = (&self.nodes[pa].value, &self.nodes[pb].value);
                    let (m, k) = va.dims2().expect("matmul lhs");
                    let (_, n) = vb.dims2().expect("matmul rhs");
                    // dA = g @ B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = vb.row(p);
                            let grow = g.row(i);
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    // dB = A^T @ g
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let arow = va.row(i);
                        let grow = g.row(i);
                        for (p, &av) in arow.iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in dbrow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, pa, Tensor::new(vec![m, k], da).expect("dA"));
                    accumulate(&mut grads, pb, Tensor::new(vec![k, n], db).expect("dB"));
                }
                Op::Tanh => {
                    let y = &node.value;
                    let gx = elemwise(&g, y, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, node.parents[0], gx);
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    let gx = elemwise(&g, y, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, node.parents[0], gx);
                }
                Op::Elu => {
                    let x = &self.nodes[node.parents[0]].value;
                    let gx = elemwise(&g, x, |g, x| if x > 0.0 { g } else { g * x.exp() });
                    accumulate(&mut grads, node.parents[0], gx);
                }
                Op::Softplus => {
                    let x = &self.nodes[node.parents[0]].value;
                    let gx = elemwise(&g, x, |g, x| g / (1.0 + (-x).exp()));
                    accumulate(&mut grads, node.parents[0], gx);
                }
                Op::Exp => {
                    let y = &node.value;
                    let gx = elemwise(&g, y, |g, y| g * y);
                    accumulate(&mut grads, node.parents[0], gx);
                }
                Op::Ln => {
                    let x = &self.nodes[node.parents[0]].value;
                    let gx = elemwise(&g, x, |g, x| g / x.max(LN_FLOOR));
                    accumulate(&mut grads, node.parents[0], gx);
                }
                Op::Scale(c) => {
                    accumulate(&mut grads, node.parents[0], g.map(|x| x * c));
                }
                Op::Softmax => {
                    let y = &node.value;
                    let (rows, cols) = Self::rows_cols(y);
                    let mut gx = g.clone();
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads, node.parents[0], gx);
                }
                Op::LogSoftmax => {
                    let y = &node.value;
                    let (rows, cols) = Self::rows_cols(y);
                    let mut gx = g.clone();
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv -= yv.exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, node.parents[0], gx);
                }
                Op::Concat { axis } => {
                    let rank = node.value.rank();
                    if rank == 1 || *axis == 0 {
                        let mut offset = 0;
                        for &p in &node.parents {
                            let n = self.nodes[p].value.len();
                            let part = Tensor::new(
                                self.nodes[p].value.shape().to_vec(),
                                g.data()[offset..offset + n].to_vec(),
                            )
                            .expect("concat grad");
                            accumulate(&mut grads, p, part);
                            offset += n;
                        }
                    } else {
                        let (rows, _) = node.value.dims2().expect("concat grad");
                        let mut col_off = 0;
                        for &p in &node.parents {
                            let (_, pc) = self.nodes[p].value.dims2().expect("concat part");
                            let mut data = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                data.extend_from_slice(&g.row(r)[col_off..col_off + pc]);
                            }
                            accumulate(
                                &mut grads,
                                p,
                                Tensor::new(vec![rows, pc], data).expect("concat grad"),
                            );
                            col_off += pc;
                        }
                    }
                }
                Op::Slice { axis, start } => {
                    let p = node.parents[0];
                    let pshape = self.nodes[p].value.shape().to_vec();
                    let mut gx = Tensor::zeros(&pshape);
                    match (pshape.len(), axis) {
                        (1, 0) => {
                            gx.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                        }
                        (2, 0) => {
                            let c = pshape[1];
                            gx.data_mut()[start * c..start * c + g.len()]
                                .copy_from_slice(g.data());
                        }
                        (2, 1) => {
                            let (gr, gc) = g.dims2().expect("slice grad");
                            let c = pshape[1];
                            for r in 0..gr {
                                let dst = &mut gx.data_mut()[r * c + start..r * c + start + gc];
                                dst.copy_from_slice(g.row(r));
                            }
                        }
                        _ => unreachable!("slice axis validated at forward"),
                    }
                    accumulate(&mut grads, p, gx);
                }
                Op::EmbedLookup { ids } => {
                    let p = node.parents[0];
                    let pshape = self.nodes[p].value.shape().to_vec();
                    let d = pshape[1];
                    let mut gx = Tensor::zeros(&pshape);
                    for (k, &id) in ids.iter().enumerate() {
                        let src = g.row(k);
                        let dst = &mut gx.data_mut()[id * d..(id + 1) * d];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                    accumulate(&mut grads, p, gx);
                }
                Op::Pick { ids } => {
                    let p = node.parents[0];
                    let pshape = self.nodes[p].value.shape().to_vec();
                    let c = pshape[1];
                    let mut gx = Tensor::zeros(&pshape);
                    for (t, &id) in ids.iter().enumerate() {
                        gx.data_mut()[t * c + id] += g.data()[t];
                    }
                    accumulate(&mut grads, p, gx);
                }
                Op::Gather2d { rows, cols } => {
                    let p = node.parents[0];
                    let pshape = self.nodes[p].value.shape().to_vec();
                    let c = pshape[1];
                    let mut gx = Tensor::zeros(&pshape);
                    for (k, (&i, &j)) in rows.iter().zip(cols).enumerate() {
                        gx.data_mut()[i * c + j] += g.data()[k];
                    }
                    accumulate(&mut grads, p, gx);
                }
                Op::Conv1d => {
                    let (pi, pk) = (node.parents[0], node.parents[1]);
                    let (t_len, c_in) = self.nodes[pi].value.dims2().expect("conv input");
                    let ks = self.nodes[pk].value.shape().to_vec();
                    let (w, c_out) = (ks[0], ks[2]);
                    let t_out = t_len - w + 1;
                    let inp = self.nodes[pi].value.data();
                    let ker = self.nodes[pk].value.data();
                    let mut gi = vec![0.0; t_len * c_in];
                    let mut gk = vec![0.0; w * c_in * c_out];
                    for t in 0..t_out {
                        let grow = &g.data()[t * c_out..(t + 1) * c_out];
                        for dt in 0..w {
                            for ci in 0..c_in {
                                let x = inp[(t + dt) * c_in + ci];
                                let kbase = (dt * c_in + ci) * c_out;
                                let mut s = 0.0;
                                for co in 0..c_out {
                                    s += grow[co] * ker[kbase + co];
                                    gk[kbase + co] += grow[co] * x;
                                }
                                gi[(t + dt) * c_in + ci] += s;
                            }
                        }
                    }
                    accumulate(&mut grads, pi, Tensor::new(vec![t_len, c_in], gi).expect("dI"));
                    accumulate(&mut grads, pk, Tensor::new(ks, gk).expect("dK"));
                }
                Op::MaxPoolTime { argmax } => {
                    let p = node.parents[0];
                    let pshape = self.nodes[p].value.shape().to_vec();
                    let c = pshape[1];
                    let mut gx = Tensor::zeros(&pshape);
                    for (j, &t) in argmax.iter().enumerate() {
                        gx.data_mut()[t * c + j] += g.data()[j];
                    }
                    accumulate(&mut grads, p, gx);
                }
                Op::LayerNorm { eps } => {
                    let p = node.parents[0];
                    let x = &self.nodes[p].value;
                    let (rows, cols) = Self::rows_cols(x);
                    let nf = cols as f64;
                    let mut gx = g.clone();
                    for r in 0..rows {
                        let xr = &x.data()[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / nf;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                        let gr = &mut gx.data_mut()[r * cols..(r + 1) * cols];
                        let gmean = gr.iter().sum::<f64>() / nf;
                        let gdot = gr.iter().zip(&xhat).map(|(g, h)| g * h).sum::<f64>() / nf;
                        for (gv, h) in gr.iter_mut().zip(&xhat) {
                            *gv = inv * (*gv - gmean - h * gdot);
                        }
                    }
                    accumulate(&mut grads, p, gx);
                }
                Op::Sum => {
                    let p = node.parents[0];
                    let c = g.data()[0];
                    let gx = Tensor::full(self.nodes[p].value.shape(), c);
                    accumulate(&mut grads, p, gx);
                }
                Op::Mean => {
                    let p = node.parents[0];
                    let n = self.nodes[p].value.len().max(1) as f64;
                    let gx = Tensor::full(self.nodes[p].value.shape(), g.data()[0] / n);
                    accumulate(&mut grads, p, gx);
                }
                Op::CrfLogZ => {
                    let (pe, pt) = (node.parents[0], node.parents[1]);
                    let (ge, gt) =
                        crf_log_partition_grad(&self.nodes[pe].value, &self.nodes[pt].value);
                    let c = g.data()[0];
                    let mut ge = ge;
                    let mut gt = gt;
                    ge.scale_assign(c);
                    gt.scale_assign(c);
                    accumulate(&mut grads, pe, ge);
                    accumulate(&mut grads, pt, gt);
                }
            }
        }
        Ok(grads)
    }
}

fn elemwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(g.shape(), other.shape());
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("elemwise shape")
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Forward (alpha) recursion in log space. `alpha[t][j]` is the log-sum of
/// all path prefixes ending in label `j` at step `t`.
fn crf_forward(emissions: &Tensor, transitions: &Tensor) -> Vec<Vec<f64>> {
    let (t_len, l) = emissions.dims2().expect("crf emissions");
    let begin = l;
    let mut alpha = vec![vec![0.0; l]; t_len];
    for j in 0..l {
        alpha[0][j] = transitions.at2(begin, j) + emissions.at2(0, j);
    }
    for t in 1..t_len {
        for j in 0..l {
            alpha[t][j] = emissions.at2(t, j)
                + lse((0..l).map(|i| alpha[t - 1][i] + transitions.at2(i, j)));
        }
    }
    alpha
}

/// Gradient of the CRF log-partition: posterior marginals for emissions and
/// expected transition counts (plus begin/end terms) for the transitions.
fn crf_log_partition_grad(emissions: &Tensor, transitions: &Tensor) -> (Tensor, Tensor) {
    let (t_len, l) = emissions.dims2().expect("crf emissions");
    let (begin, end) = (l, l + 1);
    let alpha = crf_forward(emissions, transitions);
    let mut beta = vec![vec![0.0; l]; t_len];
    for j in 0..l {
        beta[t_len - 1][j] = transitions.at2(j, end);
    }
    for t in (0..t_len - 1).rev() {
        for i in 0..l {
            beta[t][i] = lse(
                (0..l).map(|j| transitions.at2(i, j) + emissions.at2(t + 1, j) + beta[t + 1][j]),
            );
        }
    }
    let logz = lse((0..l).map(|j| alpha[t_len - 1][j] + beta[t_len - 1][j]));
    let mut ge = Tensor::zeros(&[t_len, l]);
    for t in 0..t_len {
        for j in 0..l {
            ge.data_mut()[t * l + j] = (alpha[t][j] + beta[t][j] - logz).exp();
        }
    }
    let mut gt = Tensor::zeros(&[l + 2, l + 2]);
    for j in 0..l {
        // begin -> j at t = 0
        gt.data_mut()[begin * (l + 2) + j] = (alpha[0][j] + beta[0][j] - logz).exp();
        // j -> end at t = T - 1
        gt.data_mut()[j * (l + 2) + end] = (alpha[t_len - 1][j] + beta[t_len - 1][j] - logz).exp();
    }
    for t in 0..t_len.saturating_sub(1) {
        for i in 0..l {
            for j in 0..l {
                let lp = alpha[t][i]
                    + transitions.at2(i, j)
                    + emissions.at2(t + 1, j)
                    + beta[t + 1][j]
                    - logz;
                gt.data_mut()[i * (l + 2) + j] += lp.exp();
            }
        }
    }
    (ge, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads[x.0].as_ref().unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_is_symmetric_and_normalized() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![0.0, 0.0]));
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x2 = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.3, 4.0, 4.0, 4.0]).unwrap());
        let y2 = tape.softmax(x2);
        for r in 0..2 {
            let s: f64 = tape.value(y2).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![5.0, 5.0, 5.0, 5.0]));
        let y = tape.layer_norm(x, 1e-5);
        for v in tape.value(y).data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn logsoftmax_nll_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3], vec![0.2, -1.0, 0.5]).unwrap());
        let lp = tape.log_softmax(logits);
        let picked = tape.pick(lp, &[2]).unwrap();
        let sum = tape.sum(picked);
        let nll = tape.scale(sum, -1.0);
        let grads = tape.backward(nll).unwrap();
        let g = grads[logits.0].as_ref().unwrap();
        let mut sm = Tape::new();
        let l2 = sm.leaf(Tensor::new(vec![1, 3], vec![0.2, -1.0, 0.5]).unwrap());
        let probs = sm.softmax(l2);
        let p = sm.value(probs).data();
        let expect = [p[0], p[1], p[2] - 1.0];
        for (a, b) in g.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn conv1d_matches_naive_sliding_window() {
        // 5x3 input, width-2 kernel, 2 output channels.
        let input: Vec<f64> = (0..15).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let kernel: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64) * 0.25 - 0.5).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![5, 3], input.clone()).unwrap());
        let k = tape.leaf(Tensor::new(vec![2, 3, 2], kernel.clone()).unwrap());
        let y = tape.conv1d(x, k).unwrap();
        for t in 0..4 {
            for co in 0..2 {
                let mut want = 0.0;
                for dt in 0..2 {
                    for ci in 0..3 {
                        want += input[(t + dt) * 3 + ci] * kernel[(dt * 3 + ci) * 2 + co];
                    }
                }
                let got = tape.value(y).at2(t, co);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.tanh(x);
        assert!(matches!(
            tape.backward(y),
            Err(NumError::NotScalar { .. })
        ));
    }

    #[test]
    fn crf_log_partition_equals_brute_force() {
        // 2 tokens x 2 labels: enumerate all 4 paths.
        let emis = Tensor::new(vec![2, 2], vec![0.3, -0.2, 1.1, 0.4]).unwrap();
        let mut tdata = vec![0.0; 16];
        for (i, v) in tdata.iter_mut().enumerate() {
            *v = ((i * 13 % 7) as f64) * 0.21 - 0.6;
        }
        let trans = Tensor::new(vec![4, 4], tdata).unwrap();
        let mut tape = Tape::new();
        let e = tape.leaf(emis.clone());
        let t = tape.leaf(trans.clone());
        let logz = tape.crf_log_partition(e, t).unwrap();
        let mut scores = Vec::new();
        for y0 in 0..2 {
            for y1 in 0..2 {
                scores.push(
                    trans.at2(2, y0)
                        + emis.at2(0, y0)
                        + trans.at2(y0, y1)
                        + emis.at2(1, y1)
                        + trans.at2(y1, 3),
                );
            }
        }
        let want = lse(scores.into_iter());
        assert!((tape.value(logz).item() - want).abs() < 1e-10);
    }
}
