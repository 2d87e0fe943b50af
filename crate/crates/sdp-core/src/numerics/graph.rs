//! Recorded-operation graph with reverse-mode gradients.
//!
//! Forward calls append nodes to an arena in execution order, which is already
//! a topological order. `backward` sweeps the arena once in reverse, adding each
//! vector-Jacobian product into per-node accumulators, so gradient accumulation
//! order is fixed by recording order and runs are reproducible bit-for-bit.

use crate::error::{Result, SdpError};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }

    /// Handle onto an existing node by raw id; diagnostics and tests only.
    pub fn probe(id: usize) -> Var {
        Var(id)
    }
}

enum Op<T> {
    Leaf,
    /// (m,k) @ (k,n)
    Matmul(Var, Var),
    /// (m,k) @ (n,k)^T
    MatmulNt(Var, Var),
    /// (B,m,k) @ (B,k,n) batched
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// rhs shape is a suffix of lhs shape; broadcast over the leading axes.
    AddBcast(Var, Var),
    /// lhs (B,T,C), rhs (B,C); broadcast over the middle axis.
    AddMidBcast(Var, Var),
    MulMidBcast(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    /// Softmax over the last axis; backward reads the cached output.
    Softmax(Var),
    Silu(Var),
    Ln(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    MeanAxis(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    GatherRows {
        table: Var,
        ids: Vec<u32>,
    },
    /// Multi-head scaled dot-product attention with cached per-head softmax rows.
    Sdpa {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    /// Rows scaled to unit L2 norm.
    L2NormRows {
        x: Var,
        inv_norm: Vec<T>,
    },
    /// (1/B) * sum_b w_b * |pred_b - target_b|^2, scalar output.
    WeightedSqError {
        pred: Var,
        target: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    eps: T,
}

/// Gradients keyed by node id after a backward pass.
#[derive(Debug)]
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_node.get(var.id()).and_then(|g| g.as_ref())
    }
}

const NORM_EPS: f64 = 1e-6;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            eps: T::of(NORM_EPS),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id()].value.shape()
    }

    /// Register an input. Tracking follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = value.needs_grad();
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Constant input regardless of the tensor flag.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value.requires_grad(false), Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.id()].needs_grad
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> SdpError {
        SdpError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm_strided(
            m, k, n,
            T::one(),
            self.value(a).data(), k as isize, 1,
            self.value(b).data(), n as isize, 1,
            T::zero(),
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b), needs))
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        T::gemm_strided(
            m, k, n,
            T::one(),
            self.value(a).data(), k as isize, 1,
            self.value(b).data(), 1, k as isize,
            T::zero(),
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatmulNt(a, b), needs))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(self.mismatch("bmm", a, b));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bsz * m * n];
        for i in 0..bsz {
            T::gemm_strided(
                m, k, n,
                T::one(),
                &self.value(a).data()[i * m * k..], k as isize, 1,
                &self.value(b).data()[i * k * n..], n as isize, 1,
                T::zero(),
                &mut out[i * m * n..],
            );
        }
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![bsz, m, n], out)?;
        Ok(self.push(value, Op::Bmm(a, b), needs))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Broadcast-add `p` over the leading axes of `x`; `p.shape` must be a
    /// suffix of `x.shape`. Covers bias rows and positional tables.
    pub fn add_bcast(&mut self, x: Var, p: Var) -> Result<Var> {
        let (sx, sp) = (self.shape(x), self.shape(p));
        if sp.len() > sx.len() || &sx[sx.len() - sp.len()..] != sp {
            return Err(self.mismatch("add_bcast", x, p));
        }
        let plen = self.value(p).numel();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + self.value(p).data()[i % plen])
            .collect();
        let needs = self.needs(x) || self.needs(p);
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddBcast(x, p), needs))
    }

    fn mid_bcast_dims(&self, name: &'static str, x: Var, s: Var) -> Result<(usize, usize, usize)> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        if sx.len() != 3 || ss.len() != 2 || sx[0] != ss[0] || sx[2] != ss[1] {
            return Err(self.mismatch(name, x, s));
        }
        Ok((sx[0], sx[1], sx[2]))
    }

    /// `y[b,t,c] = x[b,t,c] + s[b,c]` — per-sample modulation over tokens.
    pub fn add_mid_bcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, t, c) = self.mid_bcast_dims("add_mid_bcast", x, s)?;
        let mut data = self.value(x).data().to_vec();
        for bi in 0..b {
            let srow = &self.value(s).data()[bi * c..(bi + 1) * c];
            for ti in 0..t {
                let base = (bi * t + ti) * c;
                for ci in 0..c {
                    data[base + ci] += srow[ci];
                }
            }
        }
        let needs = self.needs(x) || self.needs(s);
        let value = Tensor::new(vec![b, t, c], data)?;
        Ok(self.push(value, Op::AddMidBcast(x, s), needs))
    }

    /// `y[b,t,c] = x[b,t,c] * s[b,c]`.
    pub fn mul_mid_bcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, t, c) = self.mid_bcast_dims("mul_mid_bcast", x, s)?;
        let mut data = self.value(x).data().to_vec();
        for bi in 0..b {
            let srow = &self.value(s).data()[bi * c..(bi + 1) * c];
            for ti in 0..t {
                let base = (bi * t + ti) * c;
                for ci in 0..c {
                    data[base + ci] *= srow[ci];
                }
            }
        }
        let needs = self.needs(x) || self.needs(s);
        let value = Tensor::new(vec![b, t, c], data)?;
        Ok(self.push(value, Op::MulMidBcast(x, s), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(value, Op::AddScalar(x, c), needs)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or(SdpError::InvalidShape {
            op: "softmax",
            shape: shape.clone(),
            reason: "rank 0".into(),
        })?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        let needs = self.needs(x);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Softmax(x), needs))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(silu);
        let needs = self.needs(x);
        self.push(value, Op::Silu(x), needs)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v <= T::zero()) {
            return Err(SdpError::Invalid("ln: non-positive input".into()));
        }
        let value = self.value(x).map(|v| v.ln());
        let needs = self.needs(x);
        Ok(self.push(value, Op::Ln(x), needs))
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [cols] || cols == 0 {
            return Err(self.mismatch("rmsnorm", x, gain));
        }
        let rows = self.value(x).numel() / cols;
        let mut data = vec![T::zero(); rows * cols];
        let mut inv_rms = vec![T::zero(); rows];
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let n = T::of(cols as f64);
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let inv = (ms + self.eps).sqrt().recip();
            inv_rms[r] = inv;
            for c in 0..cols {
                data[r * cols + c] = row[c] * inv * gs[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, needs))
    }

    /// Layer normalization over the last axis; affine terms optional.
    pub fn layernorm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        if cols == 0 {
            return Err(SdpError::InvalidShape {
                op: "layernorm",
                shape,
                reason: "rank 0".into(),
            });
        }
        for affine in [gain, bias].into_iter().flatten() {
            if self.shape(affine) != [cols] {
                return Err(self.mismatch("layernorm", x, affine));
            }
        }
        let rows = self.value(x).numel() / cols;
        let mut data = vec![T::zero(); rows * cols];
        let mut mean = vec![T::zero(); rows];
        let mut inv_std = vec![T::zero(); rows];
        let xs = self.value(x).data();
        let n = T::of(cols as f64);
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let inv = (var + self.eps).sqrt().recip();
            mean[r] = mu;
            inv_std[r] = inv;
            for c in 0..cols {
                let mut y = (row[c] - mu) * inv;
                if let Some(g) = gain {
                    y *= self.nodes[g.id()].value.data()[c];
                }
                if let Some(b) = bias {
                    y += self.nodes[b.id()].value.data()[c];
                }
                data[r * cols + c] = y;
            }
        }
        let needs = self.needs(x)
            || gain.map(|g| self.needs(g)).unwrap_or(false)
            || bias.map(|b| self.needs(b)).unwrap_or(false);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            },
            needs,
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(SdpError::InvalidShape {
                op: "mean_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let xs = self.value(x).data();
        let inv_n = T::of(n as f64).recip();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += xs[base + i];
                }
            }
        }
        for v in &mut data {
            *v *= inv_n;
        }
        let needs = self.needs(x);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::MeanAxis(x, axis), needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, T::of(n as f64).recip())
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(SdpError::Invalid("concat: no inputs".into()));
        }
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(SdpError::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(self.mismatch("concat", inputs[0], v));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &v in inputs {
            let n = self.shape(v)[axis];
            let xs = self.value(v).data();
            for o in 0..outer {
                let src = o * n * inner;
                let dst = (o * axis_total + offset) * inner;
                data[dst..dst + n * inner].copy_from_slice(&xs[src..src + n * inner]);
            }
            offset += n;
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Concat(inputs.to_vec(), axis), needs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(SdpError::InvalidShape {
                op: "slice",
                shape,
                reason: format!("range {start}..{end} on axis {axis}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let width = end - start;
        let mut out_shape = shape.clone();
        out_shape[axis] = width;
        let xs = self.value(x).data();
        let mut data = vec![T::zero(); outer * width * inner];
        for o in 0..outer {
            let src = (o * n + start) * inner;
            let dst = o * width * inner;
            data[dst..dst + width * inner].copy_from_slice(&xs[src..src + width * inner]);
        }
        let needs = self.needs(x);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                axis,
                start,
                end,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Embedding lookup: `table` is `(V, C)`, output is `(ids.len(), C)`.
    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(SdpError::InvalidShape {
                op: "gather_rows",
                shape: ts,
                reason: "table must be rank 2".into(),
            });
        }
        let (v, c) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(SdpError::UnknownToken {
                id: bad as u16,
                vocab: v,
            });
        }
        let xs = self.value(table).data();
        let mut data = vec![T::zero(); ids.len() * c];
        for (i, &id) in ids.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&xs[id as usize * c..(id as usize + 1) * c]);
        }
        let needs = self.needs(table);
        let value = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `(B, T, C)` tensors; `C` splits into `heads` equal slices.
    pub fn sdpa(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(self.mismatch("sdpa", q, k));
        }
        let (b, tq, c) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if heads == 0 || c % heads != 0 {
            return Err(SdpError::InvalidShape {
                op: "sdpa",
                shape: sq,
                reason: format!("width {c} not divisible by {heads} heads"),
            });
        }
        let d = c / heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); b * tq * c];
        let mut probs = vec![T::zero(); b * heads * tq * tk];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * d;
                for i in 0..tq {
                    let qrow = &qs[(bi * tq + i) * c + off..(bi * tq + i) * c + off + d];
                    let prow =
                        &mut probs[((bi * heads + h) * tq + i) * tk..((bi * heads + h) * tq + i + 1) * tk];
                    for j in 0..tk {
                        let krow = &ks[(bi * tk + j) * c + off..(bi * tk + j) * c + off + d];
                        prow[j] = qrow
                            .iter()
                            .zip(krow)
                            .map(|(&a, &b)| a * b)
                            .sum::<T>()
                            * scale;
                    }
                    softmax_row(prow);
                    let orow = &mut out[(bi * tq + i) * c + off..(bi * tq + i) * c + off + d];
                    for j in 0..tk {
                        let w = prow[j];
                        let vrow = &vs[(bi * tk + j) * c + off..(bi * tk + j) * c + off + d];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let value = Tensor::new(vec![b, tq, c], out)?;
        Ok(self.push(
            value,
            Op::Sdpa {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        ))
    }

    /// Scale rows of the last axis to unit L2 norm. Zero rows are rejected.
    pub fn l2norm_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&0);
        if cols == 0 {
            return Err(SdpError::InvalidShape {
                op: "l2norm_rows",
                shape,
                reason: "rank 0".into(),
            });
        }
        let rows = self.value(x).numel() / cols;
        let xs = self.value(x).data();
        let mut data = vec![T::zero(); rows * cols];
        let mut inv_norm = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(SdpError::ZeroNormRow { row: r });
            }
            let inv = norm.recip();
            inv_norm[r] = inv;
            for c in 0..cols {
                data[r * cols + c] = row[c] * inv;
            }
        }
        let needs = self.needs(x);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::L2NormRows { x, inv_norm }, needs))
    }

    /// Batch-mean of per-sample weighted squared error. `weights.len()` must
    /// equal the first axis of `pred`.
    pub fn weighted_sq_error(&mut self, pred: Var, target: Var, weights: &[T]) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch("weighted_sq_error", pred, target));
        }
        let b = self.shape(pred)[0];
        if weights.len() != b {
            return Err(SdpError::InvalidShape {
                op: "weighted_sq_error",
                shape: self.shape(pred).to_vec(),
                reason: format!("{} weights for batch {b}", weights.len()),
            });
        }
        let per = self.value(pred).numel() / b;
        let (ps, ts) = (self.value(pred).data(), self.value(target).data());
        let mut total = T::zero();
        for bi in 0..b {
            let mut s = T::zero();
            for i in bi * per..(bi + 1) * per {
                let d = ps[i] - ts[i];
                s += d * d;
            }
            total += weights[bi] * s;
        }
        total /= T::of(b as f64);
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSqError {
                pred,
                target,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Leaves that do not require gradients,
    /// and nodes the loss does not reach, end up with `None`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if !self.value(loss).is_scalar() {
            return Err(SdpError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut acc: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        acc[loss.id()] = Some(vec![T::one()]);
        for id in (0..=loss.id()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = acc[id].take() else { continue };
            self.apply_vjp(id, &gout, &mut acc)?;
            // Leaves keep their accumulated gradient; interior nodes drop it.
            if matches!(self.nodes[id].op, Op::Leaf) {
                acc[id] = Some(gout);
            }
        }
        let by_node = acc
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[id].value.shape().to_vec(), data)
                        .expect("gradient shape matches value shape")
                })
            })
            .collect();
        Ok(Grads { by_node })
    }

    fn add_into(&self, acc: &mut [Option<Vec<T>>], v: Var, grad: &[T]) {
        if !self.needs(v) {
            return;
        }
        match &mut acc[v.id()] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += *b;
                }
            }
            slot => *slot = Some(grad.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn apply_vjp(&self, id: usize, gout: &[T], acc: &mut [Option<Vec<T>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    // dA = dY @ B^T
                    let mut da = vec![T::zero(); m * k];
                    T::gemm_strided(
                        m, n, k,
                        T::one(),
                        gout, n as isize, 1,
                        self.value(*b).data(), 1, n as isize,
                        T::zero(),
                        &mut da,
                    );
                    self.add_into(acc, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T @ dY
                    let mut db = vec![T::zero(); k * n];
                    T::gemm_strided(
                        k, m, n,
                        T::one(),
                        self.value(*a).data(), 1, k as isize,
                        gout, n as isize, 1,
                        T::zero(),
                        &mut db,
                    );
                    self.add_into(acc, *b, &db);
                }
            }
            Op::MatmulNt(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.needs(*a) {
                    // dA = dY @ B
                    let mut da = vec![T::zero(); m * k];
                    T::gemm_strided(
                        m, n, k,
                        T::one(),
                        gout, n as isize, 1,
                        self.value(*b).data(), k as isize, 1,
                        T::zero(),
                        &mut da,
                    );
                    self.add_into(acc, *a, &da);
                }
                if self.needs(*b) {
                    // dB = dY^T @ A
                    let mut db = vec![T::zero(); n * k];
                    T::gemm_strided(
                        n, m, k,
                        T::one(),
                        gout, 1, n as isize,
                        self.value(*a).data(), k as isize, 1,
                        T::zero(),
                        &mut db,
                    );
                    self.add_into(acc, *b, &db);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); bsz * m * k];
                    for i in 0..bsz {
                        T::gemm_strided(
                            m, n, k,
                            T::one(),
                            &gout[i * m * n..], n as isize, 1,
                            &self.value(*b).data()[i * k * n..], 1, n as isize,
                            T::zero(),
                            &mut da[i * m * k..],
                        );
                    }
                    self.add_into(acc, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); bsz * k * n];
                    for i in 0..bsz {
                        T::gemm_strided(
                            k, m, n,
                            T::one(),
                            &self.value(*a).data()[i * m * k..], 1, k as isize,
                            &gout[i * m * n..], n as isize, 1,
                            T::zero(),
                            &mut db[i * k * n..],
                        );
                    }
                    self.add_into(acc, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.add_into(acc, *a, gout);
                self.add_into(acc, *b, gout);
            }
            Op::Sub(a, b) => {
                self.add_into(acc, *a, gout);
                if self.needs(*b) {
                    let neg: Vec<T> = gout.iter().map(|&g| -g).collect();
                    self.add_into(acc, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da: Vec<T> = gout
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&g, &y)| g * y)
                        .collect();
                    self.add_into(acc, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<T> = gout
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &x)| g * x)
                        .collect();
                    self.add_into(acc, *b, &db);
                }
            }
            Op::AddBcast(x, p) => {
                self.add_into(acc, *x, gout);
                if self.needs(*p) {
                    let plen = self.value(*p).numel();
                    let mut dp = vec![T::zero(); plen];
                    for (i, &g) in gout.iter().enumerate() {
                        dp[i % plen] += g;
                    }
                    self.add_into(acc, *p, &dp);
                }
            }
            Op::AddMidBcast(x, s) => {
                self.add_into(acc, *x, gout);
                if self.needs(*s) {
                    let (b, t, c) = {
                        let sx = self.shape(*x);
                        (sx[0], sx[1], sx[2])
                    };
                    let mut ds = vec![T::zero(); b * c];
                    for bi in 0..b {
                        for ti in 0..t {
                            let base = (bi * t + ti) * c;
                            for ci in 0..c {
                                ds[bi * c + ci] += gout[base + ci];
                            }
                        }
                    }
                    self.add_into(acc, *s, &ds);
                }
            }
            Op::MulMidBcast(x, s) => {
                let (b, t, c) = {
                    let sx = self.shape(*x);
                    (sx[0], sx[1], sx[2])
                };
                if self.needs(*x) {
                    let ss = self.value(*s).data();
                    let mut dx = vec![T::zero(); b * t * c];
                    for bi in 0..b {
                        for ti in 0..t {
                            let base = (bi * t + ti) * c;
                            for ci in 0..c {
                                dx[base + ci] = gout[base + ci] * ss[bi * c + ci];
                            }
                        }
                    }
                    self.add_into(acc, *x, &dx);
                }
                if self.needs(*s) {
                    let xs = self.value(*x).data();
                    let mut ds = vec![T::zero(); b * c];
                    for bi in 0..b {
                        for ti in 0..t {
                            let base = (bi * t + ti) * c;
                            for ci in 0..c {
                                ds[bi * c + ci] += gout[base + ci] * xs[base + ci];
                            }
                        }
                    }
                    self.add_into(acc, *s, &ds);
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    let dx: Vec<T> = gout.iter().map(|&g| g * *c).collect();
                    self.add_into(acc, *x, &dx);
                }
            }
            Op::AddScalar(x, _) => self.add_into(acc, *x, gout),
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let y = self.nodes[id].value.data();
                    let cols = *self.nodes[id].value.shape().last().unwrap();
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..y.len() / cols {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &gout[r * cols..(r + 1) * cols];
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for c in 0..cols {
                            dx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    self.add_into(acc, *x, &dx);
                }
            }
            Op::Silu(x) => {
                if self.needs(*x) {
                    let dx: Vec<T> = gout
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| {
                            let s = sigmoid(v);
                            g * s * (T::one() + v * (T::one() - s))
                        })
                        .collect();
                    self.add_into(acc, *x, &dx);
                }
            }
            Op::Ln(x) => {
                if self.needs(*x) {
                    let dx: Vec<T> = gout
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| g / v)
                        .collect();
                    self.add_into(acc, *x, &dx);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let cols = *self.shape(*x).last().unwrap();
                let rows = self.value(*x).numel() / cols;
                let xs = self.value(*x).data();
                let gs = self.value(*gain).data();
                let n = T::of(cols as f64);
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let base = r * cols;
                        let mut dot = T::zero();
                        for c in 0..cols {
                            dot += gout[base + c] * gs[c] * xs[base + c];
                        }
                        let coef = inv * inv * inv * dot / n;
                        for c in 0..cols {
                            dx[base + c] = inv * gout[base + c] * gs[c] - xs[base + c] * coef;
                        }
                    }
                    self.add_into(acc, *x, &dx);
                }
                if self.needs(*gain) {
                    let mut dg = vec![T::zero(); cols];
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        for c in 0..cols {
                            dg[c] += gout[r * cols + c] * xs[r * cols + c] * inv;
                        }
                    }
                    self.add_into(acc, *gain, &dg);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let cols = *self.shape(*x).last().unwrap();
                let rows = self.value(*x).numel() / cols;
                let xs = self.value(*x).data();
                let n = T::of(cols as f64);
                if self.needs(*x) {
                    let gs = gain.map(|g| self.value(g).data());
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let inv = inv_std[r];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_xhat = T::zero();
                        for c in 0..cols {
                            let xhat = (xs[base + c] - mean[r]) * inv;
                            let dh = match gs {
                                Some(gv) => gout[base + c] * gv[c],
                                None => gout[base + c],
                            };
                            sum_dh += dh;
                            sum_dh_xhat += dh * xhat;
                        }
                        let m1 = sum_dh / n;
                        let m2 = sum_dh_xhat / n;
                        for c in 0..cols {
                            let xhat = (xs[base + c] - mean[r]) * inv;
                            let dh = match gs {
                                Some(gv) => gout[base + c] * gv[c],
                                None => gout[base + c],
                            };
                            dx[base + c] = inv * (dh - m1 - xhat * m2);
                        }
                    }
                    self.add_into(acc, *x, &dx);
                }
                if let Some(g) = gain {
                    if self.needs(*g) {
                        let mut dg = vec![T::zero(); cols];
                        for r in 0..rows {
                            let base = r * cols;
                            for c in 0..cols {
                                let xhat = (xs[base + c] - mean[r]) * inv_std[r];
                                dg[c] += gout[base + c] * xhat;
                            }
                        }
                        self.add_into(acc, *g, &dg);
                    }
                }
                if let Some(b) = bias {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                db[c] += gout[r * cols + c];
                            }
                        }
                        self.add_into(acc, *b, &db);
                    }
                }
            }
            Op::MeanAxis(x, axis) => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let (outer, n, inner) = split_axis(shape, *axis);
                    let inv_n = T::of(n as f64).recip();
                    let mut dx = vec![T::zero(); outer * n * inner];
                    for o in 0..outer {
                        for a in 0..n {
                            let base = (o * n + a) * inner;
                            for i in 0..inner {
                                dx[base + i] = gout[o * inner + i] * inv_n;
                            }
                        }
                    }
                    self.add_into(acc, *x, &dx);
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let dx = vec![gout[0]; self.value(*x).numel()];
                    self.add_into(acc, *x, &dx);
                }
            }
            Op::Concat(inputs, axis) => {
                let out_shape = self.nodes[id].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut dv = vec![T::zero(); outer * n * inner];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            dv[dst..dst + n * inner].copy_from_slice(&gout[src..src + n * inner]);
                        }
                        self.add_into(acc, v, &dv);
                    }
                    offset += n;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                end,
            } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let (outer, n, inner) = split_axis(shape, *axis);
                    let width = end - start;
                    let mut dx = vec![T::zero(); outer * n * inner];
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * width * inner;
                        dx[dst..dst + width * inner].copy_from_slice(&gout[src..src + width * inner]);
                    }
                    self.add_into(acc, *x, &dx);
                }
            }
            Op::Reshape(x) => self.add_into(acc, *x, gout),
            Op::GatherRows { table, ids } => {
                if self.needs(*table) {
                    let c = self.shape(*table)[1];
                    let mut dt = vec![T::zero(); self.value(*table).numel()];
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = id as usize * c;
                        for j in 0..c {
                            dt[dst + j] += gout[i * c + j];
                        }
                    }
                    self.add_into(acc, *table, &dt);
                }
            }
            Op::Sdpa {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                self.sdpa_backward(*q, *k, *v, *heads, probs, gout, acc);
            }
            Op::L2NormRows { x, inv_norm } => {
                if self.needs(*x) {
                    let cols = *self.shape(*x).last().unwrap();
                    let y = self.nodes[id].value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..inv_norm.len() {
                        let base = r * cols;
                        let mut dot = T::zero();
                        for c in 0..cols {
                            dot += gout[base + c] * y[base + c];
                        }
                        for c in 0..cols {
                            dx[base + c] = (gout[base + c] - y[base + c] * dot) * inv_norm[r];
                        }
                    }
                    self.add_into(acc, *x, &dx);
                }
            }
            Op::WeightedSqError {
                pred,
                target,
                weights,
            } => {
                let b = weights.len();
                let per = self.value(*pred).numel() / b;
                let (ps, ts) = (self.value(*pred).data(), self.value(*target).data());
                let coef = T::of(2.0 / b as f64) * gout[0];
                if self.needs(*pred) || self.needs(*target) {
                    let mut dp = vec![T::zero(); ps.len()];
                    for bi in 0..b {
                        let w = weights[bi] * coef;
                        for i in bi * per..(bi + 1) * per {
                            dp[i] = w * (ps[i] - ts[i]);
                        }
                    }
                    if self.needs(*target) {
                        let dt: Vec<T> = dp.iter().map(|&g| -g).collect();
                        self.add_into(acc, *target, &dt);
                    }
                    self.add_into(acc, *pred, &dp);
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn sdpa_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gout: &[T],
        acc: &mut [Option<Vec<T>>],
    ) {
        let (b, tq, c) = {
            let s = self.shape(q);
            (s[0], s[1], s[2])
        };
        let tk = self.shape(k)[1];
        let d = c / heads;
        let scale = T::of(1.0 / (d as f64).sqrt());
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); qs.len()];
        let mut dk = vec![T::zero(); ks.len()];
        let mut dv = vec![T::zero(); vs.len()];
        let mut dp = vec![T::zero(); tk];
        let mut ds = vec![T::zero(); tk];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * d;
                for i in 0..tq {
                    let prow =
                        &probs[((bi * heads + h) * tq + i) * tk..((bi * heads + h) * tq + i + 1) * tk];
                    let grow = &gout[(bi * tq + i) * c + off..(bi * tq + i) * c + off + d];
                    // dV and dP
                    for j in 0..tk {
                        let vrow = &vs[(bi * tk + j) * c + off..(bi * tk + j) * c + off + d];
                        let mut acc_dp = T::zero();
                        let dvrow = &mut dv[(bi * tk + j) * c + off..(bi * tk + j) * c + off + d];
                        for t in 0..d {
                            acc_dp += grow[t] * vrow[t];
                            dvrow[t] += prow[j] * grow[t];
                        }
                        dp[j] = acc_dp;
                    }
                    // dS = P * (dP - sum(dP * P))
                    let dot = dp.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..tk {
                        ds[j] = prow[j] * (dp[j] - dot) * scale;
                    }
                    // dQ += dS @ K, dK += dS^T @ Q
                    let qrow = &qs[(bi * tq + i) * c + off..(bi * tq + i) * c + off + d];
                    let dqrow = &mut dq[(bi * tq + i) * c + off..(bi * tq + i) * c + off + d];
                    for j in 0..tk {
                        let krow = &ks[(bi * tk + j) * c + off..(bi * tk + j) * c + off + d];
                        let dkrow = &mut dk[(bi * tk + j) * c + off..(bi * tk + j) * c + off + d];
                        for t in 0..d {
                            dqrow[t] += ds[j] * krow[t];
                            dkrow[t] += ds[j] * qrow[t];
                        }
                    }
                }
            }
        }
        self.add_into(acc, q, &dq);
        self.add_into(acc, k, &dk);
        self.add_into(acc, v, &dv);
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Split a shape at `axis` into (product before, axis length, product after).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[8]));
        let s = g.softmax(x).unwrap();
        for &p in g.value(s).data() {
            assert_eq!(p, 0.125);
        }
    }

    #[test]
    fn matmul_by_identity_preserves_input() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| {
            if i % 4 == 0 { 1.0 } else { 0.0 }
        }));
        let a = g.constant(Tensor::from_fn(&[3, 5], |i| i as f64 * 0.37 - 1.0));
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out).data(), g.value(a).data());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[4], |i| i as f64).requires_grad(true));
        let loss = g.sum_all(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_squared_norm_is_x() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[5], |i| i as f64 - 2.0).requires_grad(true));
        let sq = g.mul(x, x).unwrap();
        let sum = g.sum_all(sq);
        let loss = g.scale(sum, 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), g.value(x).data());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3]).requires_grad(true));
        let y = g.silu(x);
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, SdpError::NonScalarLoss { .. }));
    }

    #[test]
    fn unreachable_and_frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]).requires_grad(true));
        let unused = g.leaf(Tensor::zeros(&[2]).requires_grad(true));
        let frozen = g.constant(Tensor::from_fn(&[2], |i| i as f64));
        let prod = g.mul(x, frozen).unwrap();
        let loss = g.sum_all(prod);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_some());
        assert!(grads.get(unused).is_none());
        assert!(grads.get(frozen).is_none());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn gradient_accumulates_over_shared_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn(&[3], |i| i as f64 + 1.0).requires_grad(true));
        let doubled = g.add(x, x).unwrap();
        let loss = g.sum_all(doubled);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
