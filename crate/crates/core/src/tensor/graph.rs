use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    /// x * sigmoid(x)
    Silu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(UnaryKind, Var),
    // logistic of each input, kept for the derivative
    Silu(Var, Vec<f64>),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Reduce {
        input: Var,
        axis: usize,
        kind: ReduceKind,
        // flat input index chosen by each output element (max only)
        argmax: Vec<usize>,
    },
    GatherRows {
        input: Var,
        // None selects a zero row
        index: Vec<Option<usize>>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Expand {
        input: Var,
        width: usize,
        jac: Vec<f64>,
    },
    Conv2d {
        input: Var,
        weight: Var,
    },
    // normalised values and reciprocal standard deviation per row
    LayerNorm {
        input: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, a) | Op::Silu(a, _) | Op::Scale(a, _) | Op::Transpose(a) | Op::Reshape(a) => vec![*a],
            Op::Reduce { input, .. }
            | Op::GatherRows { input, .. }
            | Op::Expand { input, .. }
            | Op::LayerNorm { input, .. } => vec![*input],
            Op::Concat { inputs } => inputs.clone(),
            Op::Conv2d { input, weight } => vec![*input, *weight],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Define-by-run computation graph. Single-writer; build, run backward,
/// read gradients, drop.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    // exp overflow gives inf and hence exactly 0, so no branch is needed
    1.0 / (1.0 + (-x).exp())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand maps onto a broadcast output.
enum Bcast {
    Same,
    /// Output viewed as `[outer, mid, inner]` with the operand shaped
    /// `[outer, inner]`, i.e. a single contiguous run of broadcast axes.
    Strided { mid: usize, inner: usize },
    Map(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], inp: &[usize]) -> Bcast {
        let out_n: usize = out.iter().product();
        let in_n: usize = inp.iter().product();
        if out_n == in_n {
            return Bcast::Same;
        }
        let rank = out.len();
        let padded: Vec<usize> = std::iter::repeat(1).take(rank - inp.len()).chain(inp.iter().copied()).collect();
        let broadcast: Vec<bool> = (0..rank).map(|i| padded[i] != out[i]).collect();
        if let (Some(first), Some(last)) = (broadcast.iter().position(|&b| b), broadcast.iter().rposition(|&b| b)) {
            // axes of extent one in the output are neutral either way
            if (first..=last).all(|i| broadcast[i] || out[i] == 1) {
                let mid = out[first..=last].iter().product();
                let inner = out[last + 1..].iter().product();
                return Bcast::Strided { mid, inner };
            }
        }
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..rank).rev() {
            strides[i] = if padded[i] == 1 { 0 } else { s };
            s *= padded[i];
        }
        let mut map = Vec::with_capacity(out_n);
        let mut idx = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..out_n {
            map.push(flat);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                flat += strides[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                flat -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    /// Calls `f(output_index, operand_index)` for every output element in order.
    #[inline]
    fn visit(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            Bcast::Same => (0..n).for_each(|i| f(i, i)),
            Bcast::Strided { mid, inner } => {
                let block = mid * inner;
                if block == 0 {
                    return;
                }
                let mut o = 0;
                for base in (0..n / block).map(|q| q * inner) {
                    for _ in 0..*mid {
                        for i in 0..*inner {
                            f(o, base + i);
                            o += 1;
                        }
                    }
                }
            }
            Bcast::Map(m) => m.iter().enumerate().for_each(|(o, &j)| f(o, j)),
        }
    }

    fn indices(&self, n: usize) -> Vec<usize> {
        let mut v = Vec::with_capacity(n);
        self.visit(n, |_, j| v.push(j));
        v
    }
}

fn accumulate<'a>(slot: &'a mut Option<Vec<f64>>, len: usize) -> &'a mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Adds an elementwise contribution, taking it over directly when the slot is empty.
fn accumulate_iter(slot: &mut Option<Vec<f64>>, contrib: impl Iterator<Item = f64>) {
    match slot {
        Some(dst) => dst.iter_mut().zip(contrib).for_each(|(d, c)| *d += c),
        None => *slot = Some(contrib.collect()),
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Adds a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let mut t = tensor;
        t.set_grad(None);
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.values[v.0].data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Copy of the node value with its gradient attached.
    pub fn tensor(&self, v: Var) -> Tensor {
        let mut t = self.values[v.0].clone().with_requires_grad(self.needs_grad[v.0]);
        t.set_grad(self.grads[v.0].clone());
        t
    }

    fn binary(&mut self, a: Var, b: Var, op_name: &'static str) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(op_name, sa, sb))?;
        let ma = Bcast::new(&out, sa);
        let mb = Bcast::new(&out, sb);
        Ok((out, ma, mb))
    }

    fn binary_value(&self, a: Var, b: Var, out: &[usize], ma: &Bcast, mb: &Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let da = self.data(a);
        let db = self.data(b);
        let n: usize = out.iter().product();
        let data: Vec<f64> = match (ma, mb) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, _) => {
                let mut out = Vec::with_capacity(n);
                mb.visit(n, |o, j| out.push(f(da[o], db[j])));
                out
            }
            (_, Bcast::Same) => {
                let mut out = Vec::with_capacity(n);
                ma.visit(n, |o, j| out.push(f(da[j], db[o])));
                out
            }
            _ => {
                let ib = mb.indices(n);
                let mut out = Vec::with_capacity(n);
                ma.visit(n, |o, j| out.push(f(da[j], db[ib[o]])));
                out
            }
        };
        Tensor::new(out.to_vec(), data).expect("broadcast shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ma, mb) = self.binary(a, b, "add")?;
        let v = self.binary_value(a, b, &out, &ma, &mb, |x, y| x + y);
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ma, mb) = self.binary(a, b, "sub")?;
        let v = self.binary_value(a, b, &out, &ma, &mb, |x, y| x - y);
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, ma, mb) = self.binary(a, b, "mul")?;
        let v = self.binary_value(a, b, &out, &ma, &mb, |x, y| x * y);
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        if kind == UnaryKind::Silu {
            let src = self.value(a);
            let n = src.numel();
            let (mut sig, mut data) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for &x in src.data() {
                let s = sigmoid(x);
                sig.push(s);
                data.push(x * s);
            }
            let v = Tensor::new(src.shape().to_vec(), data).expect("same shape");
            let ng = self.needs_grad[a.0];
            let sig = if ng { sig } else { Vec::new() };
            return self.push(v, Op::Silu(a, sig), ng);
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Neg => |x| -x,
            UnaryKind::Exp => f64::exp,
            UnaryKind::Silu => |x| x * sigmoid(x),
            UnaryKind::Sigmoid => sigmoid,
        };
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let v = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.needs_grad[a.0];
        self.push(v, Op::Unary(kind, a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| x * s).collect();
        let v = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.needs_grad[a.0];
        self.push(v, Op::Scale(a, s), ng)
    }

    /// c = a · b for matrices `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let v = Tensor::new(vec![m, n], out)?;
        let ng = self.needs_grad[a.0] || self.needs_grad[b.0];
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], out)?;
        let ng = self.needs_grad[a.0];
        Ok(self.push(v, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshaped(shape)?;
        let ng = self.needs_grad[a.0];
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Reduces `axis` away. Max routes its gradient to the first argmax.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("reduce", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for (d, &x) in dst.iter_mut().zip(&src[base..base + inner]) {
                            *d += x;
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / len as f64;
                    out.iter_mut().for_each(|x| *x *= inv);
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = o * len * inner + i;
                        for l in 1..len {
                            let idx = (o * len + l) * inner + i;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        out[o * inner + i] = src[best];
                        argmax[o * inner + i] = best;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let v = Tensor::new(out_shape, out)?;
        let ng = self.needs_grad[a.0];
        Ok(self.push(v, Op::Reduce { input: a, axis, kind, argmax }, ng))
    }

    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    /// Selects rows along axis 0; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let idx: Vec<Option<usize>> = index.iter().map(|&i| Some(i)).collect();
        self.gather_rows_padded(a, &idx)
    }

    /// Like [`Graph::gather_rows`], with `None` producing an all-zero row.
    pub fn gather_rows_padded(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || index.is_empty() {
            return Err(Error::shape("gather_rows", &shape, &[index.len()]));
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("gather index {bad} out of range for {rows} rows")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(index.len() * width);
        for r in index {
            match r {
                Some(r) => out.extend_from_slice(&src[r * width..(r + 1) * width]),
                None => out.extend(std::iter::repeat_n(0.0, width)),
            }
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        let v = Tensor::new(out_shape, out)?;
        let ng = self.needs_grad[a.0];
        Ok(self.push(v, Op::GatherRows { input: a, index: index.to_vec() }, ng))
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*p)[r * w..(r + 1) * w]);
            }
        }
        let mut out_shape = lead;
        out_shape.push(total);
        let v = Tensor::new(out_shape, out)?;
        let ng = parts.iter().any(|p| self.needs_grad[p.0]);
        Ok(self.push(v, Op::Concat { inputs: parts.to_vec() }, ng))
    }

    /// Expands every element `x` into `width` values `f(x)` with a local
    /// Jacobian. `eval(x, values, derivs)` fills both slices.
    pub fn map_expand(&mut self, a: Var, width: usize, eval: impl Fn(f64, &mut [f64], &mut [f64])) -> Var {
        let src = self.value(a);
        let n = src.numel();
        let mut vals = vec![0.0; n * width];
        let mut jac = vec![0.0; n * width];
        for (i, &x) in src.data().iter().enumerate() {
            eval(x, &mut vals[i * width..(i + 1) * width], &mut jac[i * width..(i + 1) * width]);
        }
        let mut shape = src.shape().to_vec();
        shape.push(width);
        let v = Tensor::new(shape, vals).expect("expand shape");
        let ng = self.needs_grad[a.0];
        self.push(v, Op::Expand { input: a, width, jac }, ng)
    }

    /// Normalises every row along the last axis to zero mean and unit
    /// variance: `(x - mean) / sqrt(var + eps)` with the biased variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let src = self.value(a);
        let width = *src.shape().last().ok_or_else(|| Error::shape("layer_norm", src.shape(), &[]))?;
        if width == 0 {
            return Err(Error::shape("layer_norm", src.shape(), &[]));
        }
        let rows = src.numel() / width;
        let mut xhat = vec![0.0; src.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, (row, out)) in src.data().chunks_exact(width).zip(xhat.chunks_exact_mut(width)).enumerate() {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, x) in out.iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std[r] = is;
        }
        let v = Tensor::new(src.shape().to_vec(), xhat.clone()).expect("layer_norm shape");
        let ng = self.needs_grad[a.0];
        let xhat = if ng { xhat } else { Vec::new() };
        Ok(self.push(v, Op::LayerNorm { input: a, xhat, inv_std }, ng))
    }

    /// Single-output-channel 2D convolution with zero "same" padding.
    /// `input: B×H×W×Cin` (channels last), `weight: kh×kw×Cin`, output `B×H×W`.
    pub fn conv2d_same(&mut self, input: Var, weight: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 3 || si[3] != sw[2] || sw[0] % 2 == 0 || sw[1] % 2 == 0 {
            return Err(Error::shape("conv2d_same", &si, &sw));
        }
        let (b, h, w, c) = (si[0], si[1], si[2], si[3]);
        let (kh, kw) = (sw[0], sw[1]);
        let x = self.data(input);
        let k = self.data(weight);
        let mut out = vec![0.0; b * h * w];
        for bi in 0..b {
            for yi in 0..h {
                for xi in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..kh {
                        let yy = yi as isize + dy as isize - (kh / 2) as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let xx = xi as isize + dx as isize - (kw / 2) as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let xbase = ((bi * h + yy as usize) * w + xx as usize) * c;
                            let kbase = (dy * kw + dx) * c;
                            for ci in 0..c {
                                acc += x[xbase + ci] * k[kbase + ci];
                            }
                        }
                    }
                    out[(bi * h + yi) * w + xi] = acc;
                }
            }
        }
        let v = Tensor::new(vec![b, h, w], out)?;
        let ng = self.needs_grad[input.0] || self.needs_grad[weight.0];
        Ok(self.push(v, Op::Conv2d { input, weight }, ng))
    }

    /// Mean softmax cross-entropy of `logits: B×C` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &z[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &x) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (x - mx).exp();
                denom += *p;
            }
            probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p /= denom);
            loss += -(row[labels[r]] - mx - denom.ln());
        }
        let v = Tensor::new(vec![], vec![loss / b as f64])?;
        let ng = self.needs_grad[logits.0];
        Ok(self.push(v, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, ng))
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Populates `∂loss/∂node` for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward already ran on this graph; call zero_grads first"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.needs_grad[id] || matches!(self.ops[id], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            for input in self.ops[id].inputs() {
                if input.0 >= id {
                    return Err(Error::Internal(format!("cycle: node {id} consumes node {}", input.0)));
                }
            }
            self.backprop_node(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, g: &[f64]) -> Result<()> {
        let values = &self.values;
        let grads = &mut self.grads;
        let needs = &self.needs_grad;
        let out_shape = values[id].shape();
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.ops[id], Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !needs[v.0] {
                        continue;
                    }
                    let map = Bcast::new(out_shape, values[v.0].shape());
                    if let Bcast::Same = map {
                        accumulate_iter(&mut grads[v.0], g.iter().map(|&x| s * x));
                        continue;
                    }
                    let dst = accumulate(&mut grads[v.0], values[v.0].numel());
                    map.visit(g.len(), |o, j| dst[j] += s * g[o]);
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !needs[v.0] {
                        continue;
                    }
                    let mv = Bcast::new(out_shape, values[v.0].shape());
                    let mo = Bcast::new(out_shape, values[other.0].shape());
                    let od = values[other.0].data();
                    let dst = accumulate(&mut grads[v.0], values[v.0].numel());
                    match (&mv, &mo) {
                        (_, Bcast::Same) => mv.visit(g.len(), |o, j| dst[j] += g[o] * od[o]),
                        (Bcast::Same, _) => mo.visit(g.len(), |o, j| dst[o] += g[o] * od[j]),
                        _ => {
                            let io = mo.indices(g.len());
                            mv.visit(g.len(), |o, j| dst[j] += g[o] * od[io[o]]);
                        }
                    }
                }
            }
            Op::Unary(kind, a) => {
                let x = values[a.0].data();
                let y = values[id].data();
                let slot = &mut grads[a.0];
                match kind {
                    UnaryKind::Neg => accumulate_iter(slot, g.iter().map(|&gi| -gi)),
                    UnaryKind::Exp => accumulate_iter(slot, g.iter().zip(y).map(|(&gi, &yi)| gi * yi)),
                    UnaryKind::Silu => accumulate_iter(
                        slot,
                        g.iter().zip(x).map(|(&gi, &xi)| {
                            let s = sigmoid(xi);
                            gi * s * (1.0 + xi * (1.0 - s))
                        }),
                    ),
                    UnaryKind::Sigmoid => accumulate_iter(slot, g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (1.0 - yi))),
                }
            }
            Op::Silu(a, sig) => {
                let x = values[a.0].data();
                accumulate_iter(
                    &mut grads[a.0],
                    g.iter().zip(x).zip(sig).map(|((&gi, &xi), &s)| gi * s * (1.0 + xi * (1.0 - s))),
                );
            }
            Op::Scale(a, s) => accumulate_iter(&mut grads[a.0], g.iter().map(|&gi| s * gi)),
            Op::MatMul(a, b) => {
                let sa = values[a.0].shape();
                let sb = values[b.0].shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs[a.0] {
                    let bd = values[b.0].data();
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bd[p * n + j];
                        }
                    }
                    let dst = accumulate(&mut grads[a.0], m * k);
                    // dA = g · Bᵀ
                    matmul_into(g, &bt, dst, m, n, k);
                }
                if needs[b.0] {
                    let ad = values[a.0].data();
                    let dst = accumulate(&mut grads[b.0], k * n);
                    // dB[p,:] += A[i,p] g[i,:]
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &gv) in dst[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let s = values[a.0].shape();
                let (r, c) = (s[0], s[1]);
                let dst = accumulate(&mut grads[a.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        dst[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) => accumulate_iter(&mut grads[a.0], g.iter().copied()),
            Op::Reduce { input, axis, kind, argmax } => {
                let shape = values[input.0].shape();
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let dst = accumulate(&mut grads[input.0], outer * len * inner);
                match kind {
                    ReduceKind::Max => {
                        for (&src, &gi) in argmax.iter().zip(g) {
                            dst[src] += gi;
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s = if *kind == ReduceKind::Mean { 1.0 / len as f64 } else { 1.0 };
                        for o in 0..outer {
                            let grow = &g[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for (d, &gi) in dst[base..base + inner].iter_mut().zip(grow) {
                                    *d += s * gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherRows { input, index } => {
                let n = values[input.0].numel();
                let width = n / values[input.0].shape()[0];
                let dst = accumulate(&mut grads[input.0], n);
                for (r, src) in index.iter().enumerate() {
                    let Some(src) = *src else { continue };
                    for (d, &gi) in dst[src * width..(src + 1) * width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *d += gi;
                    }
                }
            }
            Op::Concat { inputs } => {
                let total = *out_shape.last().expect("rank ≥ 1");
                let rows = g.len() / total;
                let mut offset = 0;
                for p in inputs {
                    let w = *values[p.0].shape().last().expect("rank ≥ 1");
                    if needs[p.0] {
                        let dst = accumulate(&mut grads[p.0], rows * w);
                        for r in 0..rows {
                            for (d, &gi) in dst[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + w])
                            {
                                *d += gi;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Expand { input, width, jac } => {
                let n = values[input.0].numel();
                let dst = accumulate(&mut grads[input.0], n);
                for (i, d) in dst.iter_mut().enumerate() {
                    let r = i * width..(i + 1) * width;
                    *d += g[r.clone()].iter().zip(&jac[r]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::LayerNorm { input, xhat, inv_std } => {
                let n = xhat.len();
                let width = n / inv_std.len();
                let dst = accumulate(&mut grads[input.0], n);
                for (r, is) in inv_std.iter().enumerate() {
                    let span = r * width..(r + 1) * width;
                    let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                    let gm = gr.iter().sum::<f64>() / width as f64;
                    let gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    for ((d, gi), xi) in dst[span].iter_mut().zip(gr).zip(xr) {
                        *d += is * (gi - gm - xi * gx);
                    }
                }
            }
            Op::Conv2d { input, weight } => {
                let si = values[input.0].shape();
                let sw = values[weight.0].shape();
                let (b, h, w, c) = (si[0], si[1], si[2], si[3]);
                let (kh, kw) = (sw[0], sw[1]);
                let x = values[input.0].data();
                let k = values[weight.0].data();
                let mut gx = if needs[input.0] { Some(vec![0.0; x.len()]) } else { None };
                let mut gk = if needs[weight.0] { Some(vec![0.0; k.len()]) } else { None };
                for bi in 0..b {
                    for yi in 0..h {
                        for xi in 0..w {
                            let go = g[(bi * h + yi) * w + xi];
                            if go == 0.0 {
                                continue;
                            }
                            for dy in 0..kh {
                                let yy = yi as isize + dy as isize - (kh / 2) as isize;
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let xx = xi as isize + dx as isize - (kw / 2) as isize;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    let xbase = ((bi * h + yy as usize) * w + xx as usize) * c;
                                    let kbase = (dy * kw + dx) * c;
                                    for ci in 0..c {
                                        if let Some(gx) = gx.as_mut() {
                                            gx[xbase + ci] += go * k[kbase + ci];
                                        }
                                        if let Some(gk) = gk.as_mut() {
                                            gk[kbase + ci] += go * x[xbase + ci];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (v, contrib) in [(*input, gx), (*weight, gk)] {
                    if let Some(contrib) = contrib {
                        let dst = accumulate(&mut grads[v.0], contrib.len());
                        dst.iter_mut().zip(&contrib).for_each(|(d, &c)| *d += c);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = values[logits.0].shape()[1];
                let b = labels.len();
                let scale = g[0] / b as f64;
                let dst = accumulate(&mut grads[logits.0], b * c);
                for r in 0..b {
                    for j in 0..c {
                        let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                        dst[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
        Ok(())
    }

    /// `elementwise(tag, a, b)` in one entry point; unary tags ignore `b`.
    pub fn elementwise(&mut self, tag: &str, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::contract(format!("{tag} needs two operands")));
        match tag {
            "add" => self.add(a, need_b()?),
            "sub" => self.sub(a, need_b()?),
            "mul" => self.mul(a, need_b()?),
            "neg" => Ok(self.neg(a)),
            "exp" => Ok(self.exp(a)),
            "silu" | "sigmoid-linear-unit" => Ok(self.silu(a)),
            "sigmoid" => Ok(self.sigmoid(a)),
            other => Err(Error::contract(format!("unknown elementwise op {other}"))),
        }
    }
}
