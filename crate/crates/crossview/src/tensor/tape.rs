use super::{Scalar, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    Gelu { a: Var },
    Softplus { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: S },
    Transpose { a: Var },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    SliceCols { a: Var, start: usize, len: usize },
    L2NormalizeRows { a: Var },
    SumAll { a: Var },
    SumAxis { a: Var, axis: usize },
    TakeDiag { a: Var },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires: bool,
}

/// Record of executed tensor ops. Backward traverses in strict reverse
/// execution order, accumulating into leaf gradients additively. After
/// `backward` the tape is consumed: recording or a second backward is an
/// error. A tape and its variables belong to one thread; run independent
/// tapes for parallel work.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` required one.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape")
        })
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires: bool) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let finite_op = op_name(&op);
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: finite_op });
        }
        self.nodes.push(Node {
            value,
            op,
            requires,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(TensorError::NotRank2 {
                op,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Register a rank-2 tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Result<Var, TensorError> {
        if t.rank() != 2 {
            return Err(TensorError::NotRank2 {
                op: "leaf",
                shape: t.shape().to_vec(),
            });
        }
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor<S>) -> Result<Var, TensorError> {
        self.leaf(t, false)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = matmul_raw(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
        );
        let req = self.req(a) || self.req(b);
        self.push(
            Tensor::new(vec![m, n], data)?,
            Op::MatMul { a, b },
            req,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binop("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binop("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binop("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn binop(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var, TensorError> {
        let (ar, ac) = self.rank2(name, a)?;
        let (br, bc) = self.rank2(name, b)?;
        let (r, c) = broadcast2(ar, ac, br, bc).ok_or(TensorError::ShapeMismatch {
            op: name,
            left: vec![ar, ac],
            right: vec![br, bc],
        })?;
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(ad[bidx(i, j, ar, ac)], bd[bidx(i, j, br, bc)]));
            }
        }
        let req = self.req(a) || self.req(b);
        self.push(Tensor::new(vec![r, c], out)?, op, req)
    }

    /// Multiply every element by a compile-time constant (not a tape input).
    pub fn scale(&mut self, a: Var, c: S) -> Result<Var, TensorError> {
        let (r, cl) = self.rank2("scale", a)?;
        let data: Vec<S> = self.nodes[a.0].value.data().iter().map(|&v| v * c).collect();
        let req = self.req(a);
        self.push(Tensor::new(vec![r, cl], data)?, Op::Scale { a, c }, req)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("gelu", a)?;
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| gelu_fwd(x))
            .collect();
        let req = self.req(a);
        self.push(Tensor::new(vec![r, c], data)?, Op::Gelu { a }, req)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("softplus", a)?;
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| softplus_fwd(x))
            .collect();
        let req = self.req(a);
        self.push(Tensor::new(vec![r, c], data)?, Op::Softplus { a }, req)
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows), computed
    /// with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("softmax", a)?;
        if axis > 1 {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
            });
        }
        let ad = self.nodes[a.0].value.data();
        let mut out = vec![S::zero(); r * c];
        let (outer, axis_len, stride) = if axis == 1 { (r, c, 1) } else { (c, r, c) };
        for o in 0..outer {
            let base = if axis == 1 { o * c } else { o };
            let mut mx = S::neg_infinity();
            for s in 0..axis_len {
                mx = mx.max(ad[base + s * stride]);
            }
            let mut denom = S::zero();
            for s in 0..axis_len {
                let e = (ad[base + s * stride] - mx).exp();
                out[base + s * stride] = e;
                denom += e;
            }
            for s in 0..axis_len {
                out[base + s * stride] /= denom;
            }
        }
        let req = self.req(a);
        self.push(Tensor::new(vec![r, c], out)?, Op::Softmax { a, axis }, req)
    }

    /// Per-row normalization to zero mean / unit variance over the last
    /// dim, then affine with `gain` and `bias` (both `1×d`).
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: S,
    ) -> Result<Var, TensorError> {
        let (r, d) = self.rank2("layer_norm", x)?;
        let (gr, gd) = self.rank2("layer_norm", gain)?;
        let (br, bd) = self.rank2("layer_norm", bias)?;
        if gr != 1 || br != 1 || gd != d || bd != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: vec![r, d],
                right: vec![gd.max(bd)],
            });
        }
        let xd = self.nodes[x.0].value.data();
        let gd_ = self.nodes[gain.0].value.data();
        let bd_ = self.nodes[bias.0].value.data();
        let mut out = vec![S::zero(); r * d];
        let dn = S::from_usize(d);
        for i in 0..r {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv_std * gd_[j] + bd_[j];
            }
        }
        let req = self.req(x) || self.req(gain) || self.req(bias);
        self.push(
            Tensor::new(vec![r, d], out)?,
            Op::LayerNorm { x, gain, bias, eps },
            req,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("transpose", a)?;
        let ad = self.nodes[a.0].value.data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        let req = self.req(a);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { a }, req)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("reshape", a)?;
        if r * c != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: vec![r, c],
                right: vec![rows, cols],
            });
        }
        let data = self.nodes[a.0].value.data().to_vec();
        let req = self.req(a);
        self.push(Tensor::new(vec![rows, cols], data)?, Op::Reshape { a }, req)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyConcat);
        }
        if axis > 1 {
            return Err(TensorError::BadAxis { op: "concat", axis });
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.rank2("concat", p))
            .collect::<Result<_, _>>()?;
        let (r0, c0) = dims[0];
        let (rows, cols, out) = if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: vec![r0, c0],
                    right: vec![dims.iter().map(|d| d.1).max().unwrap()],
                });
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for &p in parts {
                out.extend_from_slice(self.nodes[p.0].value.data());
            }
            (rows, c0, out)
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: vec![r0, c0],
                    right: vec![dims.iter().map(|d| d.0).max().unwrap()],
                });
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = vec![S::zero(); r0 * cols];
            let mut off = 0;
            for (&p, &(_, pc)) in parts.iter().zip(&dims) {
                let pd = self.nodes[p.0].value.data();
                for i in 0..r0 {
                    out[i * cols + off..i * cols + off + pc]
                        .copy_from_slice(&pd[i * pc..(i + 1) * pc]);
                }
                off += pc;
            }
            (r0, cols, out)
        };
        let req = parts.iter().any(|&p| self.req(p));
        self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        )
    }

    /// Select rows by index, preserving the order of `idx`. Backward
    /// scatter-adds upstream gradients into the source rows.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let ad = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&ad[i * c..(i + 1) * c]);
        }
        let req = self.req(a);
        self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            req,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("slice_cols", a)?;
        if start + len > c || len == 0 {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let ad = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&ad[i * c + start..i * c + start + len]);
        }
        let req = self.req(a);
        self.push(
            Tensor::new(vec![r, len], out)?,
            Op::SliceCols { a, start, len },
            req,
        )
    }

    /// Normalize each row to unit Euclidean norm. A zero-norm row is an
    /// error, never a division.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("l2_normalize", a)?;
        let ad = self.nodes[a.0].value.data();
        let mut out = vec![S::zero(); r * c];
        let floor = S::from_f64(1e-30);
        for i in 0..r {
            let row = &ad[i * c..(i + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if !(norm > floor) {
                return Err(TensorError::ZeroNorm { row: i });
            }
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        let req = self.req(a);
        self.push(
            Tensor::new(vec![r, c], out)?,
            Op::L2NormalizeRows { a },
            req,
        )
    }

    /// Sum of all elements, as a `1×1` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.rank2("sum_all", a)?;
        let s: S = self.nodes[a.0].value.data().iter().copied().sum();
        let req = self.req(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, req)
    }

    /// Sum along `axis`, keeping the reduced dim at extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("sum_axis", a)?;
        if axis > 1 {
            return Err(TensorError::BadAxis {
                op: "sum_axis",
                axis,
            });
        }
        let ad = self.nodes[a.0].value.data();
        let (shape, out) = if axis == 1 {
            let mut out = vec![S::zero(); r];
            for i in 0..r {
                out[i] = ad[i * c..(i + 1) * c].iter().copied().sum();
            }
            (vec![r, 1], out)
        } else {
            let mut out = vec![S::zero(); c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += ad[i * c + j];
                }
            }
            (vec![1, c], out)
        };
        let req = self.req(a);
        self.push(Tensor::new(shape, out)?, Op::SumAxis { a, axis }, req)
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn take_diag(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rank2("take_diag", a)?;
        if r != c {
            return Err(TensorError::ShapeMismatch {
                op: "take_diag",
                left: vec![r, c],
                right: vec![r, r],
            });
        }
        let ad = self.nodes[a.0].value.data();
        let out: Vec<S> = (0..r).map(|i| ad[i * c + i]).collect();
        let req = self.req(a);
        self.push(Tensor::new(vec![r, 1], out)?, Op::TakeDiag { a }, req)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// node on a `requires_grad` path and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lshape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lshape.to_vec(),
            });
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![S::one()]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter()) {
            if let Some(g) = grad {
                if g.iter().any(|v| !v.is_finite()) {
                    let _ = node;
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contrib: &[S]) {
        if !self.nodes[target.0].requires {
            return;
        }
        let slot = &mut self.grads[target.0];
        match slot {
            Some(g) => {
                for (gv, &cv) in g.iter_mut().zip(contrib) {
                    *gv += cv;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize, g: &[S]) {
        // Ops only reference earlier nodes, so reads of input values and
        // the write into their grad slots never alias node i.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (m, k) = dims2(&self.nodes[a.0].value);
                let n = dims2(&self.nodes[b.0].value).1;
                if self.req(*a) {
                    let da = matmul_nt(g, self.nodes[b.0].value.data(), m, n, k);
                    self.accumulate(*a, &da);
                }
                if self.req(*b) {
                    let db = matmul_tn(self.nodes[a.0].value.data(), g, m, k, n);
                    self.accumulate(*b, &db);
                }
            }

            Op::Add { a, b } => {
                let (r, c) = dims2(&self.nodes[i].value);
                for v in [*a, *b] {
                    if self.req(v) {
                        let (vr, vc) = dims2(&self.nodes[v.0].value);
                        let red = reduce_to(g, r, c, vr, vc);
                        self.accumulate(v, &red);
                    }
                }
            }

            Op::Sub { a, b } => {
                let (r, c) = dims2(&self.nodes[i].value);
                if self.req(*a) {
                    let (vr, vc) = dims2(&self.nodes[a.0].value);
                    let red = reduce_to(g, r, c, vr, vc);
                    self.accumulate(*a, &red);
                }
                if self.req(*b) {
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    let (vr, vc) = dims2(&self.nodes[b.0].value);
                    let red = reduce_to(&neg, r, c, vr, vc);
                    self.accumulate(*b, &red);
                }
            }

            Op::Mul { a, b } => {
                let (r, c) = dims2(&self.nodes[i].value);
                let (ar, ac) = dims2(&self.nodes[a.0].value);
                let (br, bc) = dims2(&self.nodes[b.0].value);
                if self.req(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let mut full = vec![S::zero(); r * c];
                    for ii in 0..r {
                        for jj in 0..c {
                            full[ii * c + jj] = g[ii * c + jj] * bd[bidx(ii, jj, br, bc)];
                        }
                    }
                    let red = reduce_to(&full, r, c, ar, ac);
                    self.accumulate(*a, &red);
                }
                if self.req(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let mut full = vec![S::zero(); r * c];
                    for ii in 0..r {
                        for jj in 0..c {
                            full[ii * c + jj] = g[ii * c + jj] * ad[bidx(ii, jj, ar, ac)];
                        }
                    }
                    let red = reduce_to(&full, r, c, br, bc);
                    self.accumulate(*b, &red);
                }
            }

            Op::Scale { a, c } => {
                if self.req(*a) {
                    let da: Vec<S> = g.iter().map(|&v| v * *c).collect();
                    self.accumulate(*a, &da);
                }
            }

            Op::Gelu { a } => {
                if self.req(*a) {
                    let xd = self.nodes[a.0].value.data();
                    let da: Vec<S> = g
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &x)| gv * gelu_bwd(x))
                        .collect();
                    self.accumulate(*a, &da);
                }
            }

            Op::Softplus { a } => {
                if self.req(*a) {
                    let xd = self.nodes[a.0].value.data();
                    let da: Vec<S> = g
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &x)| gv * sigmoid(x))
                        .collect();
                    self.accumulate(*a, &da);
                }
            }

            Op::Softmax { a, axis } => {
                if self.req(*a) {
                    let sd = self.nodes[i].value.data();
                    let (r, c) = dims2(&self.nodes[i].value);
                    let (outer, axis_len, stride) =
                        if *axis == 1 { (r, c, 1) } else { (c, r, c) };
                    let mut da = vec![S::zero(); r * c];
                    for o in 0..outer {
                        let base = if *axis == 1 { o * c } else { o };
                        let mut dot = S::zero();
                        for s in 0..axis_len {
                            let f = base + s * stride;
                            dot += g[f] * sd[f];
                        }
                        for s in 0..axis_len {
                            let f = base + s * stride;
                            da[f] = sd[f] * (g[f] - dot);
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let (r, d) = dims2(&self.nodes[x.0].value);
                let xd = self.nodes[x.0].value.data();
                let gd = self.nodes[gain.0].value.data();
                let dn = S::from_usize(d);
                let mut dx = vec![S::zero(); r * d];
                let mut dgain = vec![S::zero(); d];
                let mut dbias = vec![S::zero(); d];
                for v in 0..r {
                    let row = &xd[v * d..(v + 1) * d];
                    let grow = &g[v * d..(v + 1) * d];
                    let mean = row.iter().copied().sum::<S>() / dn;
                    let var =
                        row.iter().map(|&t| (t - mean) * (t - mean)).sum::<S>() / dn;
                    let inv_std = (var + *eps).sqrt().recip();
                    let xhat: Vec<S> = row.iter().map(|&t| (t - mean) * inv_std).collect();
                    let dxhat: Vec<S> =
                        grow.iter().zip(gd).map(|(&gv, &gn)| gv * gn).collect();
                    let sum_dxhat: S = dxhat.iter().copied().sum();
                    let sum_dxhat_xhat: S =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dx[v * d + j] = inv_std / dn
                            * (dn * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if self.req(*x) {
                    self.accumulate(*x, &dx);
                }
                if self.req(*gain) {
                    self.accumulate(*gain, &dgain);
                }
                if self.req(*bias) {
                    self.accumulate(*bias, &dbias);
                }
            }

            Op::Transpose { a } => {
                if self.req(*a) {
                    let (r, c) = dims2(&self.nodes[i].value);
                    let mut da = vec![S::zero(); r * c];
                    for ii in 0..r {
                        for jj in 0..c {
                            da[jj * r + ii] = g[ii * c + jj];
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }

            Op::Reshape { a } => {
                if self.req(*a) {
                    self.accumulate(*a, g);
                }
            }

            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.numel();
                        if self.req(p) {
                            let slice = g[off..off + n].to_vec();
                            self.accumulate(p, &slice);
                        }
                        off += n;
                    }
                } else {
                    let (r, c) = dims2(&self.nodes[i].value);
                    let mut off = 0;
                    for &p in parts {
                        let (_, pc) = dims2(&self.nodes[p.0].value);
                        if self.req(p) {
                            let mut dp = vec![S::zero(); r * pc];
                            for ii in 0..r {
                                dp[ii * pc..(ii + 1) * pc]
                                    .copy_from_slice(&g[ii * c + off..ii * c + off + pc]);
                            }
                            self.accumulate(p, &dp);
                        }
                        off += pc;
                    }
                }
            }

            Op::GatherRows { a, idx } => {
                if self.req(*a) {
                    let (r, c) = dims2(&self.nodes[a.0].value);
                    let mut da = vec![S::zero(); r * c];
                    for (out_row, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            da[src * c + j] += g[out_row * c + j];
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }

            Op::SliceCols { a, start, len } => {
                if self.req(*a) {
                    let (r, c) = dims2(&self.nodes[a.0].value);
                    let mut da = vec![S::zero(); r * c];
                    for ii in 0..r {
                        da[ii * c + start..ii * c + start + len]
                            .copy_from_slice(&g[ii * len..(ii + 1) * len]);
                    }
                    self.accumulate(*a, &da);
                }
            }

            Op::L2NormalizeRows { a } => {
                if self.req(*a) {
                    let (r, c) = dims2(&self.nodes[a.0].value);
                    let xd = self.nodes[a.0].value.data();
                    let yd = self.nodes[i].value.data();
                    let mut da = vec![S::zero(); r * c];
                    for ii in 0..r {
                        let x = &xd[ii * c..(ii + 1) * c];
                        let y = &yd[ii * c..(ii + 1) * c];
                        let grow = &g[ii * c..(ii + 1) * c];
                        let norm = x.iter().map(|&v| v * v).sum::<S>().sqrt();
                        let gy: S = grow.iter().zip(y).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            da[ii * c + j] = (grow[j] - y[j] * gy) / norm;
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }

            Op::SumAll { a } => {
                if self.req(*a) {
                    let n = self.nodes[a.0].value.numel();
                    let da = vec![g[0]; n];
                    self.accumulate(*a, &da);
                }
            }

            Op::SumAxis { a, axis } => {
                if self.req(*a) {
                    let (r, c) = dims2(&self.nodes[a.0].value);
                    let mut da = vec![S::zero(); r * c];
                    for ii in 0..r {
                        for jj in 0..c {
                            da[ii * c + jj] = if *axis == 1 { g[ii] } else { g[jj] };
                        }
                    }
                    self.accumulate(*a, &da);
                }
            }

            Op::TakeDiag { a } => {
                if self.req(*a) {
                    let (r, c) = dims2(&self.nodes[a.0].value);
                    let mut da = vec![S::zero(); r * c];
                    for ii in 0..r {
                        da[ii * c + ii] = g[ii];
                    }
                    self.accumulate(*a, &da);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn dims2<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Gelu { .. } => "gelu",
        Op::Softplus { .. } => "softplus",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Transpose { .. } => "transpose",
        Op::Reshape { .. } => "reshape",
        Op::Concat { .. } => "concat",
        Op::GatherRows { .. } => "gather_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::L2NormalizeRows { .. } => "l2_normalize",
        Op::SumAll { .. } => "sum_all",
        Op::SumAxis { .. } => "sum_axis",
        Op::TakeDiag { .. } => "take_diag",
    }
}

/// Broadcast two rank-2 shapes; each dim must match or be 1.
fn broadcast2(ar: usize, ac: usize, br: usize, bc: usize) -> Option<(usize, usize)> {
    let r = if ar == br {
        ar
    } else if ar == 1 {
        br
    } else if br == 1 {
        ar
    } else {
        return None;
    };
    let c = if ac == bc {
        ac
    } else if ac == 1 {
        bc
    } else if bc == 1 {
        ac
    } else {
        return None;
    };
    Some((r, c))
}

#[inline]
fn bidx(i: usize, j: usize, r: usize, c: usize) -> usize {
    let ii = if r == 1 { 0 } else { i };
    let jj = if c == 1 { 0 } else { j };
    ii * c + jj
}

/// Sum a full-size gradient down to a broadcast input's shape.
fn reduce_to<S: Scalar>(g: &[S], r: usize, c: usize, tr: usize, tc: usize) -> Vec<S> {
    if tr == r && tc == c {
        return g.to_vec();
    }
    let mut out = vec![S::zero(); tr * tc];
    for i in 0..r {
        for j in 0..c {
            out[bidx(i, j, tr, tc)] += g[i * c + j];
        }
    }
    out
}

/// `a[m×k] · b[k×n]`, ikj order for cache locality.
pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ -> [m×k]` without materializing the transpose.
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n] -> [k×n]` without materializing the transpose.
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += av * bv;
            }
        }
    }
    out
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let c = S::from_f64(0.7978845608028654);
    let a = S::from_f64(0.044715);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    let du = c * (S::one() + three * a * x * x);
    half * (S::one() + t) + half * x * sech2 * du
}

fn softplus_fwd<S: Scalar>(x: S) -> S {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
