use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Matmul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    SwapDims12(Var),
    Sigmoid(Var),
    Silu(Var),
    Softmax(Var),
    ReverseCumsum(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Bce(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    SumLastDim(Var),
    Clamp(Var, f64, f64),
    InterpGather(Var, Var),
    LayerNorm(Var, f64),
    Rope(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Clamp applied to probabilities inside [`Graph::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Record of one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of a differentiable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::new(ta.shape().to_vec(), data).expect("shape preserved"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| scale * v + shift).collect();
        let t = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.unary(x, t, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    fn row_op(&mut self, op: &'static str, x: Var, v: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (tx, tv) = (self.value(x), self.value(v));
        let k = tx.last_dim();
        if tv.numel() != k {
            return Err(Error::dim(op, tx.shape(), tv.shape()));
        }
        let data = tx
            .data()
            .chunks(k)
            .flat_map(|row| row.iter().zip(tv.data()).map(|(&a, &b)| f(a, b)))
            .collect();
        Ok(Tensor::new(tx.shape().to_vec(), data).expect("shape preserved"))
    }

    /// Adds vector `b` to every row of `x` (broadcast over leading dims).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.row_op("add_row", x, b, |a, b| a + b)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(t, Op::AddRow(x, b), rg))
    }

    /// Multiplies every row of `x` elementwise by vector `v`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let t = self.row_op("mul_row", x, v, |a, b| a * b)?;
        let rg = self.rg(&[x, v]);
        Ok(self.push(t, Op::MulRow(x, v), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg))
    }

    /// Batched matrix product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            mm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![batch, m, n], out)?, Op::Bmm(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose", &s, &[]));
        }
        let t = transpose_last2(self.value(x));
        Ok(self.unary(x, t, Op::TransposeLast2(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, t, Op::Reshape(x)))
    }

    /// `[A,B,C,D] -> [A,C,B,D]`; used to split and merge attention heads.
    pub fn swap_dims12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("swap_dims12", &s, &[4]));
        }
        let t = swap12(self.value(x));
        Ok(self.unary(x, t, Op::SwapDims12(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = map(self.value(x), sigmoid);
        self.unary(x, t, Op::Sigmoid(x))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let t = map(self.value(x), |v| v * sigmoid(v));
        self.unary(x, t, Op::Silu(x))
    }

    /// Max-subtracted softmax over the last axis. Masked-out entries
    /// (`mask[i] == false`) get weight exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let src = self.value(x);
        if let Some(m) = mask {
            if m.len() != src.numel() {
                return Err(Error::dim("softmax mask", src.shape(), &[m.len()]));
            }
        }
        let n = src.last_dim();
        let mut out = vec![0.0; src.numel()];
        for (row, (xs, ys)) in src.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[row * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| xs[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row });
            }
            let mut total = 0.0;
            for j in (0..n).filter(|&j| keep(j)) {
                ys[j] = (xs[j] - max).exp();
                total += ys[j];
            }
            for j in (0..n).filter(|&j| keep(j)) {
                ys[j] /= total;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.unary(x, t, Op::Softmax(x)))
    }

    /// `out[j] = sum_{k >= j} x[k]` along the last axis.
    pub fn reverse_cumsum(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = src.last_dim();
        let mut out = vec![0.0; src.numel()];
        for (xs, ys) in src.data().chunks(n).zip(out.chunks_mut(n)) {
            let mut acc = 0.0;
            for k in (0..n).rev() {
                acc += xs[k];
                ys[k] = acc;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out).expect("shape preserved");
        self.unary(x, t, Op::ReverseCumsum(x))
    }

    /// Row lookup `table[ids]`; the backward pass scatter-adds into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let src = self.value(table);
        if src.shape().len() != 2 {
            return Err(Error::dim("gather_rows", src.shape(), &[2]));
        }
        let (rows, d) = (src.shape()[0], src.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { id, bound: rows });
            }
            out.extend_from_slice(src.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.unary(table, t, Op::Gather(table, ids.to_vec())))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let lead = self.shape(*first);
        let lead = lead[..lead.len() - 1].to_vec();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", &lead, s));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let src = self.value(p);
        if src.numel() != labels.len() {
            return Err(Error::dim("bce_loss", src.shape(), &[labels.len()]));
        }
        let loss = bce(src.data(), labels);
        Ok(self.unary(p, Tensor::scalar(loss), Op::Bce(p, labels.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.data(x);
        let s = src.iter().sum::<f64>() / src.len() as f64;
        self.unary(x, Tensor::scalar(s), Op::Mean(x))
    }

    /// Sums the last axis away; a 1-D input yields shape `[1]`.
    pub fn sum_lastdim(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = src.last_dim();
        let data: Vec<f64> = src.data().chunks(n).map(|r| r.iter().sum()).collect();
        let mut shape = src.shape()[..src.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, data).expect("shape");
        self.unary(x, t, Op::SumLastDim(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = map(self.value(x), |v| v.clamp(lo, hi));
        self.unary(x, t, Op::Clamp(x, lo, hi))
    }

    /// Linear interpolation of per-row integer logits at fractional
    /// positions: `z: [R, P]`, `pos: [R, m]` gives `[R, m]`.
    ///
    /// Positions are clamped to `[0, P - 1]`.
    pub fn interp_gather(&mut self, z: Var, pos: Var) -> Result<Var> {
        let (sz, sp) = (self.shape(z), self.shape(pos));
        if sz.len() != 2 || sp.len() != 2 || sz[0] != sp[0] {
            return Err(Error::dim("interp_gather", sz, sp));
        }
        let (rows, width, m) = (sz[0], sz[1], sp[1]);
        let (zd, pd) = (self.data(z), self.data(pos));
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let zr = &zd[r * width..(r + 1) * width];
            for j in 0..m {
                out[r * m + j] = interpolate(zr, pd[r * m + j]);
            }
        }
        let rg = self.rg(&[z, pos]);
        Ok(self.push(Tensor::new(vec![rows, m], out)?, Op::InterpGather(z, pos), rg))
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let n = src.last_dim();
        let mut out = vec![0.0; src.numel()];
        for (xs, ys) in src.data().chunks(n).zip(out.chunks_mut(n)) {
            let (mu, inv) = moments(xs, eps);
            for (y, &v) in ys.iter_mut().zip(xs) {
                *y = (v - mu) * inv;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out).expect("shape");
        self.unary(x, t, Op::LayerNorm(x, eps))
    }

    /// Rotates consecutive pairs of each row by `angle_row * theta_i`,
    /// `theta_i = base^(-2i/d)`.
    pub fn rope(&mut self, x: Var, positions: &[f64], base: f64) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        let rows = src.numel() / d.max(1);
        if d % 2 != 0 {
            return Err(Error::Config(format!("rotary dimension must be even, got {d}")));
        }
        if positions.len() != rows {
            return Err(Error::dim("rope positions", &[rows], &[positions.len()]));
        }
        let mut out = src.data().to_vec();
        let freqs = rope_frequencies(d, base);
        for (r, &pos) in positions.iter().enumerate() {
            let angles: Vec<f64> = freqs.iter().map(|f| pos * f).collect();
            rotate_pairs_in_place(&mut out[r * d..(r + 1) * d], &angles, false);
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        // Store per-row positions; frequencies are recomputed in backward.
        let mut meta = positions.to_vec();
        meta.push(base);
        Ok(self.unary(x, t, Op::Rope(x, meta)))
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every
    /// differentiable leaf. Each graph supports exactly one call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(up);
                continue;
            }
            self.backprop_node(i, &up, &mut grads);
        }
        self.leaf_grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, i: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut send = |v: Var, g: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, up.to_vec());
                send(*b, up.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, up.to_vec());
                send(*b, up.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                send(*a, up.iter().zip(db).map(|(g, y)| g * y).collect());
                send(*b, up.iter().zip(da).map(|(g, x)| g * x).collect());
            }
            Op::Affine(x, s) => send(*x, up.iter().map(|g| g * s).collect()),
            Op::AddRow(x, b) => {
                let k = self.value(*b).numel();
                send(*x, up.to_vec());
                send(*b, column_sums(up, k));
            }
            Op::MulRow(x, v) => {
                let vd = self.data(*v);
                let k = vd.len();
                let gx = up.chunks(k).flat_map(|r| r.iter().zip(vd).map(|(g, w)| g * w)).collect();
                let prod: Vec<f64> = up.iter().zip(self.data(*x)).map(|(g, x)| g * x).collect();
                send(*x, gx);
                send(*v, column_sums(&prod, k));
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    mm_nt(up, db, &mut ga, m, n, k);
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    mm_tn(da, up, &mut gb, m, k, n);
                    send(*b, gb);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        mm_nt(
                            &up[t * m * n..(t + 1) * m * n],
                            &db[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        mm_tn(
                            &da[t * m * k..(t + 1) * m * k],
                            &up[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    send(*b, gb);
                }
            }
            Op::TransposeLast2(x) => {
                let g = Tensor::new(node.value.shape().to_vec(), up.to_vec()).expect("shape");
                send(*x, transpose_last2(&g).into_data());
            }
            Op::Reshape(x) => send(*x, up.to_vec()),
            Op::SwapDims12(x) => {
                let g = Tensor::new(node.value.shape().to_vec(), up.to_vec()).expect("shape");
                send(*x, swap12(&g).into_data());
            }
            Op::Sigmoid(x) => send(*x, up.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Silu(x) => {
                let g = up
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (1.0 - s))
                    })
                    .collect();
                send(*x, g);
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let mut g = vec![0.0; out.len()];
                for ((ys, gs), dst) in out.chunks(n).zip(up.chunks(n)).zip(g.chunks_mut(n)) {
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        dst[j] = ys[j] * (gs[j] - dot);
                    }
                }
                send(*x, g);
            }
            Op::ReverseCumsum(x) => {
                let n = node.value.last_dim();
                let mut g = vec![0.0; up.len()];
                for (gs, dst) in up.chunks(n).zip(g.chunks_mut(n)) {
                    let mut acc = 0.0;
                    for k in 0..n {
                        acc += gs[k];
                        dst[k] = acc;
                    }
                }
                send(*x, g);
            }
            Op::Gather(table, ids) => {
                let d = self.value(*table).last_dim();
                let mut g = vec![0.0; self.value(*table).numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        g[id * d + c] += up[r * d + c];
                    }
                }
                send(*table, g);
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.numel() / width.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        g.extend_from_slice(&up[r * width + offset..r * width + offset + w]);
                    }
                    send(p, g);
                    offset += w;
                }
            }
            Op::Bce(p, labels) => {
                let n = labels.len() as f64;
                let g = self
                    .data(*p)
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                            return 0.0;
                        }
                        up[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                    })
                    .collect();
                send(*p, g);
            }
            Op::Sum(x) => send(*x, vec![up[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![up[0] / n as f64; n]);
            }
            Op::SumLastDim(x) => {
                let n = self.value(*x).last_dim();
                send(*x, up.iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect());
            }
            Op::Clamp(x, lo, hi) => {
                let g = up
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, v)| if (*lo..=*hi).contains(v) { *g } else { 0.0 })
                    .collect();
                send(*x, g);
            }
            Op::InterpGather(z, pos) => {
                let (sz, sp) = (self.shape(*z), self.shape(*pos));
                let (rows, width, m) = (sz[0], sz[1], sp[1]);
                let (zd, pd) = (self.data(*z), self.data(*pos));
                let mut gz = vec![0.0; rows * width];
                let mut gp = vec![0.0; rows * m];
                let top = (width - 1) as f64;
                for r in 0..rows {
                    let zr = &zd[r * width..(r + 1) * width];
                    for j in 0..m {
                        let g = up[r * m + j];
                        let raw = pd[r * m + j];
                        let p = raw.clamp(0.0, top);
                        let (lo, hi, w_hi) = bracket(p);
                        gz[r * width + hi] += w_hi * g;
                        gz[r * width + lo] += (1.0 - w_hi) * g;
                        if (0.0..=top).contains(&raw) {
                            let slope = if hi > lo {
                                zr[hi] - zr[lo]
                            } else if lo + 1 < width {
                                zr[lo + 1] - zr[lo]
                            } else {
                                0.0
                            };
                            gp[r * m + j] = g * slope;
                        }
                    }
                }
                send(*z, gz);
                send(*pos, gp);
            }
            Op::LayerNorm(x, eps) => {
                let n = node.value.last_dim();
                let mut g = vec![0.0; up.len()];
                for ((xs, gs), (ys, dst)) in self
                    .data(*x)
                    .chunks(n)
                    .zip(up.chunks(n))
                    .zip(out.chunks(n).zip(g.chunks_mut(n)))
                {
                    let (_, inv) = moments(xs, *eps);
                    let g_mean = gs.iter().sum::<f64>() / n as f64;
                    let gy_mean = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dst[j] = inv * (gs[j] - g_mean - ys[j] * gy_mean);
                    }
                }
                send(*x, g);
            }
            Op::Rope(x, meta) => {
                let d = node.value.last_dim();
                let (positions, base) = meta.split_at(meta.len() - 1);
                let freqs = rope_frequencies(d, base[0]);
                let mut g = up.to_vec();
                for (r, &pos) in positions.iter().enumerate() {
                    let angles: Vec<f64> = freqs.iter().map(|f| pos * f).collect();
                    rotate_pairs_in_place(&mut g[r * d..(r + 1) * d], &angles, true);
                }
                send(*x, g);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

fn column_sums(rows: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for r in rows.chunks(k) {
        out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
    }
    out
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("shape")
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over clamped probabilities.
pub(crate) fn bce(p: &[f64], y: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / p.len() as f64
}

/// Floor index, ceil index and the weight on the ceil entry.
fn bracket(p: f64) -> (usize, usize, f64) {
    let lo = p.floor();
    (lo as usize, p.ceil() as usize, p - lo)
}

/// `(p - floor p) * z[ceil p] + (1 - p + floor p) * z[floor p]`, with `p`
/// clamped to the table range.
pub(crate) fn interpolate(z: &[f64], p: f64) -> f64 {
    let p = p.clamp(0.0, (z.len() - 1) as f64);
    let (lo, hi, w_hi) = bracket(p);
    w_hi * z[hi] + (1.0 - w_hi) * z[lo]
}

fn moments(xs: &[f64], eps: f64) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

pub(crate) fn rope_frequencies(d: usize, base: f64) -> Vec<f64> {
    (0..d / 2).map(|i| base.powf(-2.0 * i as f64 / d as f64)).collect()
}

/// Rotates `(x[2i], x[2i+1])` by `angles[i]` (or by `-angles[i]` when
/// `inverse`).
pub(crate) fn rotate_pairs_in_place(x: &mut [f64], angles: &[f64], inverse: bool) {
    for (i, &a) in angles.iter().enumerate() {
        let (s, c) = a.sin_cos();
        let s = if inverse { -s } else { s };
        let (x0, x1) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = x0 * c - x1 * s;
        x[2 * i + 1] = x0 * s + x1 * c;
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n].iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = t.numel() / (m * n).max(1);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = src[off + i * n + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let l = shape.len();
    shape.swap(l - 2, l - 1);
    Tensor::new(shape, out).expect("shape")
}

fn swap12(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    Tensor::new(vec![a, c, b, d], out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let i = g.constant(Tensor::eye(2));
        let out = g.matmul(a, i).unwrap();
        assert_eq!(g.data(out), &[1.0, 2.0, 3.0, 4.0]);

        let x = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let y = g.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.data(z), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sigmoid_and_silu_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 3f64.ln(), 50.0, -800.0]));
        let s = g.sigmoid(x);
        let d = g.data(s).to_vec();
        assert_eq!(d[0], 0.5);
        assert!(approx(d[1], 0.75, 1e-15));
        assert!(d.iter().all(|v| v.is_finite()));
        let u = g.silu(x);
        let d = g.data(u).to_vec();
        assert_eq!(d[0], 0.0);
        assert!(approx(d[1], 3f64.ln() * 0.75, 1e-15));
        assert!(approx(d[1], 0.8240, 1e-4));
        assert!(approx(d[2], 50.0, 1e-12));
    }

    #[test]
    fn softmax_analytic_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2f64.ln(), 0.0, 7.0]]).unwrap());
        let mask = [true, true, false];
        let y = g.softmax(x, Some(&mask)).unwrap();
        let d = g.data(y);
        assert!(approx(d[0], 2.0 / 3.0, 1e-15));
        assert!(approx(d[1], 1.0 / 3.0, 1e-15));
        assert_eq!(d[2], 0.0);

        for c in [-1e3, 0.0, 5.5, 1e3] {
            let x = g.constant(Tensor::vector(vec![c; 3]));
            let y = g.softmax(x, None).unwrap();
            for &v in g.data(y) {
                assert!(approx(v, 1.0 / 3.0, 1e-15));
            }
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let err = g.softmax(x, Some(&[true, false, false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn reverse_cumsum_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let y = g.reverse_cumsum(x);
        assert_eq!(g.data(y), &[3.0, 2.0, 1.0]);
        let x = g.constant(Tensor::vector(vec![0.2, 0.9, 0.4]));
        let y = g.reverse_cumsum(x);
        let d = g.data(y);
        assert!(approx(d[0], 1.5, 1e-15) && approx(d[1], 1.3, 1e-15) && d[2] == 0.4);
    }

    #[test]
    fn gather_rows_basis_and_repeated_ids() {
        let mut g = Graph::new();
        let table = g.param(Tensor::eye(3));
        let first = g.gather_rows(table, &[0]).unwrap();
        assert_eq!(g.data(first), &[1.0, 0.0, 0.0]);
        let rep = g.gather_rows(table, &[2, 2]).unwrap();
        let loss = g.sum(rep);
        g.backward(loss).unwrap();
        assert_eq!(
            g.grad(table).unwrap().data(),
            &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0]
        );
    }

    #[test]
    fn gather_rows_out_of_range() {
        let mut g = Graph::new();
        let table = g.param(Tensor::eye(3));
        let err = g.gather_rows(table, &[1, 3]).unwrap_err();
        assert!(matches!(err, Error::Index { id: 3, bound: 3 }));
    }

    #[test]
    fn concat_orders_parts_and_rejects_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let single = g.concat(&[a]).unwrap();
        assert_eq!(g.data(single), &[1.0, 2.0]);
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let m = g.constant(Tensor::zeros(&[2, 2]));
        let n = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.concat(&[m, n]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn bce_values() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![1.0 - BCE_EPS]));
        let l = g.bce_loss(p, &[1.0]).unwrap();
        assert!(g.data(l)[0] < 1e-6);
        let p = g.constant(Tensor::vector(vec![0.5]));
        let l = g.bce_loss(p, &[1.0]).unwrap();
        assert!(approx(g.data(l)[0], 2f64.ln(), 1e-15));
        let p = g.constant(Tensor::vector(vec![0.0, 1.0]));
        let l = g.bce_loss(p, &[1.0, 0.0]).unwrap();
        assert!(g.data(l)[0].is_finite());
    }

    #[test]
    fn backward_simple_losses_and_single_use() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(matches!(g.backward(loss), Err(Error::State(_))));

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0]));
        let unused = g.param(Tensor::zeros(&[2, 2]));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn swap_dims12_round_trips() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(Tensor::new(vec![1, 2, 3, 4], data.clone()).unwrap());
        let y = g.swap_dims12(x).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 2, 4]);
        assert_eq!(&g.data(y)[4..8], &data[12..16]);
        let z = g.swap_dims12(y).unwrap();
        assert_eq!(g.data(z), &data[..]);
    }

    #[test]
    fn interpolation_hits_integers_exactly() {
        let z = [0.0, 4.0, 8.0, 12.0];
        assert_eq!(interpolate(&z, 2.0), 8.0);
        assert_eq!(interpolate(&z, 1.25), 5.0);
        assert_eq!(interpolate(&z, 9.0), 12.0);
        assert_eq!(interpolate(&z, -1.0), 0.0);
    }
}
