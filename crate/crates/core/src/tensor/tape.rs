use rand::Rng;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// a[r×k] · b[k×n] where r is the product of a's leading axes.
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    /// a[g×m×k] · b[g×n×k]ᵀ
    MatMulNt {
        a: Var,
        b: Var,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// a[g×m×k] · b[g×k×n]
    Bmm {
        a: Var,
        b: Var,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Square {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    MaskedSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        inner_a: usize,
        inner_b: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Broadcast {
        x: Var,
        times: usize,
    },
    Narrow {
        x: Var,
        offset: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    BceLogits {
        x: Var,
        labels: Vec<T>,
    },
    CrossEntropy {
        x: Var,
        targets: Vec<usize>,
    },
    PolyNormalize {
        x: Var,
        degenerate: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a computation in evaluation order; [`Tape::backward`] replays it in
/// reverse. Nodes are appended only after their inputs, so insertion order is
/// a topological order.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: shape,
                right: vec![value.len()],
            });
        }
        Ok(self.push_raw(shape, value, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    /// Copies a parameter onto the tape. It only tracks gradients when the
    /// tensor is trainable and `track` is set.
    pub fn param(&mut self, t: &Tensor, track: bool) -> Var {
        let value = t.data().iter().map(|&x| T::from_f32(x)).collect();
        self.push_raw(t.shape().to_vec(), value, track && t.is_trainable(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Materializes a node as an `f32` tensor (no gradient).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let data = node.value.iter().map(|x| x.as_f32()).collect();
        Tensor::new(node.shape.clone(), data).expect("node shape is consistent")
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(shape, value, rg, op)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    // ---------------------------------------------------------------- products

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa[..sa.len() - 1]);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a), self.value(b), &mut out);
        Ok(self.push(shape, out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    fn batch_dims(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(self.mismatch(op, a, b));
        }
        Ok(numel(&sa[..sa.len() - 2]))
    }

    /// `a[..., m, k] · b[..., n, k]ᵀ -> [..., m, n]` with matching leading axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let g = self.batch_dims("matmul_nt", a, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 2]);
        if sb[r - 1] != k {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); g * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for gi in 0..g {
            gemm_nt(
                m,
                k,
                n,
                &va[gi * m * k..(gi + 1) * m * k],
                &vb[gi * n * k..(gi + 1) * n * k],
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        Ok(self.push(shape, out, &[a, b], Op::MatMulNt { a, b, g, m, k, n }))
    }

    /// `a[..., m, k] · b[..., k, n] -> [..., m, n]` with matching leading axes.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let g = self.batch_dims("bmm", a, b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        if sb[r - 2] != k {
            return Err(self.mismatch("bmm", a, b));
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); g * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for gi in 0..g {
            gemm_nn(
                m,
                k,
                n,
                &va[gi * m * k..(gi + 1) * m * k],
                &vb[gi * k * n..(gi + 1) * k * n],
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        Ok(self.push(shape, out, &[a, b], Op::Bmm { a, b, g, m, k, n }))
    }

    // ------------------------------------------------------------ elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a, b], Op::Mul { a, b }))
    }

    /// Adds a `[d]` vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let vb = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d.max(1)) {
            row.iter_mut().zip(vb).for_each(|(o, &b)| *o += b);
        }
        let shape = sx.to_vec();
        Ok(self.push(shape, out, &[x, bias], Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let out = self.value(x).iter().map(|&v| v * f).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::Scale { x, factor: f })
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::Square { x })
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::Relu { x })
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::Dropout { x, mask })
    }

    // ------------------------------------------------------------ normalizers

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c == 0 {
            return Err(Error::EmptyTensor { op: "softmax_rows" });
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row, None);
        }
        Ok(self.push(shape, out, &[x], Op::Softmax { x }))
    }

    /// Softmax over the last axis of `x[b, ..., t]` where `keep[b*t + j]`
    /// says whether key position `j` of batch item `b` may be attended.
    /// Masked positions get exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::AxisOutOfRange {
                op: "masked_softmax",
                axis: 1,
                rank: shape.len(),
            });
        }
        let t = shape[shape.len() - 1];
        let b = shape[0];
        if keep.len() != b * t {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax",
                left: shape,
                right: vec![keep.len()],
            });
        }
        let rows_per_item = numel(&shape) / (b * t).max(1);
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_mut(t.max(1)).enumerate() {
            let item = r / rows_per_item.max(1);
            softmax_in_place(row, Some(&keep[item * t..(item + 1) * t]));
        }
        Ok(self.push(shape, out, &[x], Op::MaskedSoftmax { x }))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// `gain ⊙ x̂ + bias`. Row statistics accumulate in f64.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [d] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        if d == 0 {
            return Err(Error::EmptyTensor { op: "layer_norm" });
        }
        let vx = self.value(x);
        let (vg, vb) = (self.value(gain), self.value(bias));
        let rows = vx.len() / d;
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.chunks(d) {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.as_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(T::from_f64(r));
            for (j, v) in row.iter().enumerate() {
                let h = T::from_f64((v.as_f64() - mean) * r);
                xhat.push(h);
                out.push(vg[j] * h + vb[j]);
            }
        }
        Ok(self.push(
            shape,
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    // ---------------------------------------------------------------- layout

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if axis >= sa.len() {
            return Err(Error::AxisOutOfRange {
                op: "concat",
                axis,
                rank: sa.len(),
            });
        }
        if sa.len() != sb.len() || sa.iter().zip(&sb).enumerate().any(|(i, (x, y))| i != axis && x != y) {
            return Err(self.mismatch("concat", a, b));
        }
        let outer = numel(&sa[..axis]);
        let inner_a = numel(&sa[axis..]);
        let inner_b = numel(&sb[axis..]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            out.extend_from_slice(&va[o * inner_a..(o + 1) * inner_a]);
            out.extend_from_slice(&vb[o * inner_b..(o + 1) * inner_b]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        Ok(self.push(
            shape,
            out,
            &[a, b],
            Op::Concat {
                a,
                b,
                outer,
                inner_a,
                inner_b,
            },
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len()
            || perm
                .iter()
                .any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::ShapeMismatch {
                op: "permute",
                left: sx,
                right: perm.to_vec(),
            });
        }
        let out = kernels::permute(self.value(x), &sx, perm);
        let shape = perm.iter().map(|&p| sx[p]).collect();
        Ok(self.push(shape, out, &[x], Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, &[x], Op::Reshape { x }))
    }

    /// Row lookup: `table[n, d]` indexed by `idx` gives `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::AxisOutOfRange {
                op: "gather_rows",
                axis: 1,
                rank: st.len(),
            });
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                left: st.to_vec(),
                right: vec![bad],
            });
        }
        let vt = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&vt[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![idx.len(), d],
            out,
            &[table],
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Repeats `x` along a new leading axis of size `times`.
    pub fn broadcast(&mut self, x: Var, times: usize) -> Var {
        let v = self.value(x);
        let mut out = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            out.extend_from_slice(v);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        self.push(shape, out, &[x], Op::Broadcast { x, times })
    }

    /// Slices `len` entries off axis 0 starting at `start`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || start + len > sx[0] {
            return Err(Error::ShapeMismatch {
                op: "narrow",
                left: sx,
                right: vec![start, len],
            });
        }
        let inner = numel(&sx[1..]);
        let out = self.value(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = sx;
        shape[0] = len;
        Ok(self.push(
            shape,
            out,
            &[x],
            Op::Narrow {
                x,
                offset: start * inner,
            },
        ))
    }

    // ------------------------------------------------------------- reductions

    /// Per-channel maximum over every axis except the last. Ties route the
    /// gradient to the first occurrence.
    pub fn max_pool_to_vector(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap_or(&0);
        let vx = self.value(x);
        if d == 0 || vx.is_empty() {
            return Err(Error::EmptyTensor {
                op: "max_pool_to_vector",
            });
        }
        let mut argmax: Vec<usize> = (0..d).collect();
        for (i, &v) in vx.iter().enumerate().skip(d) {
            let c = i % d;
            if v > vx[argmax[c]] {
                argmax[c] = i;
            }
        }
        let out = argmax.iter().map(|&i| vx[i]).collect();
        Ok(self.push(vec![d], out, &[x], Op::MaxPool { x, argmax }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v.as_f64()).sum::<f64>();
        self.push(vec![1], vec![T::from_f64(s)], &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::EmptyTensor { op: "mean" });
        }
        let s = self.value(x).iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
        Ok(self.push(vec![1], vec![T::from_f64(s)], &[x], Op::Mean { x }))
    }

    // ----------------------------------------------------------------- losses

    /// Mean binary cross-entropy over all logits, in the stable form
    /// `max(x,0) - x·y + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let n = self.value(logits).len();
        if n != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "bce_with_logits",
                left: self.shape(logits).to_vec(),
                right: vec![labels.len()],
            });
        }
        if n == 0 {
            return Err(Error::EmptyTensor { op: "bce_with_logits" });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidLabel(bad));
        }
        let total: f64 = self
            .value(logits)
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let x = x.as_f64();
                x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
            })
            .sum();
        let labels = labels.iter().map(|&y| T::from_f64(y)).collect();
        Ok(self.push(
            vec![1],
            vec![T::from_f64(total / n as f64)],
            &[logits],
            Op::BceLogits { x: logits, labels },
        ))
    }

    /// Mean softmax cross-entropy of `logits[m, v]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sx = self.shape(logits);
        if sx.len() != 2 || sx[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: sx.to_vec(),
                right: vec![targets.len()],
            });
        }
        let (m, v) = (sx[0], sx[1]);
        if m == 0 || v == 0 {
            return Err(Error::EmptyTensor { op: "cross_entropy" });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: sx.to_vec(),
                right: vec![bad],
            });
        }
        let vx = self.value(logits);
        let mut total = 0.0f64;
        for (row, &t) in vx.chunks(v).zip(targets) {
            let max = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.as_f64()));
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[t].as_f64();
        }
        Ok(self.push(
            vec![1],
            vec![T::from_f64(total / m as f64)],
            &[logits],
            Op::CrossEntropy {
                x: logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Degree-2 polynomial normalization: `w_i = s_i² / Σ_j s_j²`. When the
    /// denominator is below `1e-12` the weights fall back to uniform and no
    /// gradient flows.
    pub fn poly2_normalize(&mut self, x: Var) -> Result<Var> {
        self.poly2_normalize_guarded(x, POLY2_GUARD)
    }

    /// [`Tape::poly2_normalize`] with a caller-chosen uniform-fallback
    /// threshold on `Σ_j s_j²`.
    pub fn poly2_normalize_guarded(&mut self, x: Var, guard: f64) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.len();
        if n == 0 {
            return Err(Error::EmptyTensor { op: "poly2_normalize" });
        }
        let z: f64 = vx.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        let degenerate = z < guard;
        let out = if degenerate {
            vec![T::from_f64(1.0 / n as f64); n]
        } else {
            vx.iter().map(|v| T::from_f64(v.as_f64() * v.as_f64() / z)).collect()
        };
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, &[x], Op::PolyNormalize { x, degenerate }))
    }

    // --------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`. Afterwards every leaf that
    /// requires a gradient and is reachable from `loss` holds one;
    /// intermediate gradients are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
                continue;
            }
            let contribs = self.local_backward(i, &g);
            for (v, c) in contribs {
                self.accumulate(v, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, c: Vec<T>) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
            None => node.grad = Some(c),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g, self.value(b), &mut da);
                    out.push((a, da));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(m, k, n, self.value(a), g, &mut db);
                    out.push((b, db));
                }
            }
            &Op::MatMulNt {
                a,
                b,
                g: groups,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    // dA = dC · B
                    let mut da = vec![T::zero(); groups * m * k];
                    for gi in 0..groups {
                        gemm_nn(
                            m,
                            n,
                            k,
                            &g[gi * m * n..(gi + 1) * m * n],
                            &vb[gi * n * k..(gi + 1) * n * k],
                            &mut da[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                    out.push((a, da));
                }
                if self.needs(b) {
                    // dB = dCᵀ · A
                    let mut db = vec![T::zero(); groups * n * k];
                    for gi in 0..groups {
                        gemm_tn(
                            m,
                            n,
                            k,
                            &g[gi * m * n..(gi + 1) * m * n],
                            &va[gi * m * k..(gi + 1) * m * k],
                            &mut db[gi * n * k..(gi + 1) * n * k],
                        );
                    }
                    out.push((b, db));
                }
            }
            &Op::Bmm {
                a,
                b,
                g: groups,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); groups * m * k];
                    for gi in 0..groups {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[gi * m * n..(gi + 1) * m * n],
                            &vb[gi * k * n..(gi + 1) * k * n],
                            &mut da[gi * m * k..(gi + 1) * m * k],
                        );
                    }
                    out.push((a, da));
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); groups * k * n];
                    for gi in 0..groups {
                        gemm_tn(
                            m,
                            k,
                            n,
                            &va[gi * m * k..(gi + 1) * m * k],
                            &g[gi * m * n..(gi + 1) * m * n],
                            &mut db[gi * k * n..(gi + 1) * k * n],
                        );
                    }
                    out.push((b, db));
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    out.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    out.push((a, g.iter().zip(self.value(b)).map(|(&g, &y)| g * y).collect()));
                }
                if self.needs(b) {
                    out.push((b, g.iter().zip(self.value(a)).map(|(&g, &x)| g * x).collect()));
                }
            }
            &Op::AddBias { x, bias } => {
                if self.needs(x) {
                    out.push((x, g.to_vec()));
                }
                if self.needs(bias) {
                    let d = self.value(bias).len();
                    let mut acc = vec![0.0f64; d];
                    for row in g.chunks(d) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v.as_f64());
                    }
                    out.push((bias, acc.into_iter().map(T::from_f64).collect()));
                }
            }
            &Op::Scale { x, factor } => out.push((x, g.iter().map(|&v| v * factor).collect())),
            &Op::Square { x } => {
                let two = T::from_f64(2.0);
                out.push((x, g.iter().zip(self.value(x)).map(|(&g, &v)| g * two * v).collect()))
            }
            &Op::Gelu { x } => out.push((
                x,
                g.iter().zip(self.value(x)).map(|(&g, &v)| g * gelu_grad(v)).collect(),
            )),
            &Op::Relu { x } => out.push((
                x,
                g.iter()
                    .zip(self.value(x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )),
            &Op::Dropout { x, ref mask } => out.push((x, g.iter().zip(mask).map(|(&g, &m)| g * m).collect())),
            &Op::Softmax { x } | &Op::MaskedSoftmax { x } => {
                let c = *node.shape.last().unwrap();
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c).zip(node.value.chunks(c)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g.as_f64() * y.as_f64()).sum();
                    let s = T::from_f64(s);
                    dx.extend(grow.iter().zip(yrow).map(|(&g, &y)| y * (g - s)));
                }
                out.push((x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let vg = self.value(*gain);
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, hrow), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..d {
                            let dh = (grow[j] * vg[j]).as_f64();
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j].as_f64();
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let r = r.as_f64();
                        for j in 0..d {
                            let dh = (grow[j] * vg[j]).as_f64();
                            dx.push(T::from_f64(r * (dh - mean_dh - hrow[j].as_f64() * mean_dh_h)));
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gain) {
                    let mut acc = vec![0.0f64; d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            acc[j] += (grow[j] * hrow[j]).as_f64();
                        }
                    }
                    out.push((*gain, acc.into_iter().map(T::from_f64).collect()));
                }
                if self.needs(*bias) {
                    let mut acc = vec![0.0f64; d];
                    for grow in g.chunks(d) {
                        acc.iter_mut().zip(grow).for_each(|(a, v)| *a += v.as_f64());
                    }
                    out.push((*bias, acc.into_iter().map(T::from_f64).collect()));
                }
            }
            &Op::Concat {
                a,
                b,
                outer,
                inner_a,
                inner_b,
            } => {
                let stride = inner_a + inner_b;
                if self.needs(a) {
                    let mut da = Vec::with_capacity(outer * inner_a);
                    for o in 0..outer {
                        da.extend_from_slice(&g[o * stride..o * stride + inner_a]);
                    }
                    out.push((a, da));
                }
                if self.needs(b) {
                    let mut db = Vec::with_capacity(outer * inner_b);
                    for o in 0..outer {
                        db.extend_from_slice(&g[o * stride + inner_a..(o + 1) * stride]);
                    }
                    out.push((b, db));
                }
            }
            Op::Permute { x, perm } => {
                out.push((*x, kernels::permute(g, &node.shape, &kernels::invert(perm))));
            }
            &Op::Reshape { x } => out.push((x, g.to_vec())),
            Op::Gather { table, idx } => {
                let st = self.shape(*table);
                let d = st[1];
                let mut dt = vec![T::zero(); st[0] * d];
                for (r, &i) in idx.iter().enumerate() {
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &v)| *a += v);
                }
                out.push((*table, dt));
            }
            &Op::Broadcast { x, times } => {
                let n = self.value(x).len();
                let mut dx = vec![T::zero(); n];
                for t in 0..times {
                    dx.iter_mut().zip(&g[t * n..(t + 1) * n]).for_each(|(a, &v)| *a += v);
                }
                out.push((x, dx));
            }
            &Op::Narrow { x, offset } => {
                let mut dx = vec![T::zero(); self.value(x).len()];
                dx[offset..offset + g.len()].copy_from_slice(g);
                out.push((x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (c, &i) in argmax.iter().enumerate() {
                    dx[i] += g[c];
                }
                out.push((*x, dx));
            }
            &Op::Sum { x } => out.push((x, vec![g[0]; self.value(x).len()])),
            &Op::Mean { x } => {
                let n = self.value(x).len();
                out.push((x, vec![g[0] / T::from_f64(n as f64); n]));
            }
            Op::BceLogits { x, labels } => {
                let n = T::from_f64(labels.len() as f64);
                let dx = self
                    .value(*x)
                    .iter()
                    .zip(labels)
                    .map(|(&l, &y)| g[0] * (sigmoid(l) - y) / n)
                    .collect();
                out.push((*x, dx));
            }
            Op::CrossEntropy { x, targets } => {
                let v = self.shape(*x)[1];
                let m = T::from_f64(targets.len() as f64);
                let mut dx = self.value(*x).to_vec();
                for (row, &t) in dx.chunks_mut(v).zip(targets) {
                    softmax_in_place(row, None);
                    row[t] -= T::one();
                    row.iter_mut().for_each(|r| *r = *r * g[0] / m);
                }
                out.push((*x, dx));
            }
            &Op::PolyNormalize { x, degenerate } => {
                let n = self.value(x).len();
                if degenerate {
                    out.push((x, vec![T::zero(); n]));
                } else {
                    let vx = self.value(x);
                    let z: f64 = vx.iter().map(|v| v.as_f64() * v.as_f64()).sum();
                    let gw: f64 = g.iter().zip(&node.value).map(|(g, w)| g.as_f64() * w.as_f64()).sum();
                    let dx = vx
                        .iter()
                        .zip(g)
                        .map(|(s, gj)| T::from_f64(2.0 * s.as_f64() / z * (gj.as_f64() - gw)))
                        .collect();
                    out.push((x, dx));
                }
            }
        }
        out
    }
}

/// Denominator guard of [`Tape::poly2_normalize`].
pub const POLY2_GUARD: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Real>(x: T) -> T {
    let x = x.as_f64();
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    T::from_f64(0.5 * x * (1.0 + t))
}

fn gelu_grad<T: Real>(x: T) -> T {
    let x = x.as_f64();
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    T::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let x = x.as_f64();
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    T::from_f64(s)
}

fn softmax_in_place<T: Real>(row: &mut [T], keep: Option<&[bool]>) {
    let allowed = |j: usize| keep.is_none_or(|k| k[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .fold(f64::NEG_INFINITY, |a, (_, v)| a.max(v.as_f64()));
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = 0.0f64;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            let e = (v.as_f64() - max).exp();
            total += e;
            *v = T::from_f64(e);
        } else {
            *v = T::zero();
        }
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v = T::from_f64(v.as_f64() * inv));
}
