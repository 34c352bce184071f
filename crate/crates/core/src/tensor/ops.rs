use super::shape::{broadcast_shape, numel, split_axis, Mapping};
use super::tape::{CustomOp, Op, Tape, Unary, Var};
use super::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

// out[m,n] += a[m,k] * b[k,n]
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,k] += g[m,n] * b[k,n]^T
fn mm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k,n] += a[m,k]^T * g[m,n]
fn mm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
    a_map: Mapping,
    b_map: Mapping,
    out_shape: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    // Shared right operand: fold a's batch axes into its rows.
    if bb.is_empty() {
        let rows = numel(ab) * m;
        let mut out_shape = ab.to_vec();
        out_shape.extend([m, n]);
        return Ok(MatmulPlan {
            m: rows,
            k,
            n,
            batch: 1,
            a_map: Mapping::Identity,
            b_map: Mapping::Identity,
            out_shape,
        });
    }
    let batch_shape = broadcast_shape(ab, bb).ok_or_else(|| Error::dim("matmul", a, b))?;
    let mut out_shape = batch_shape.clone();
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        batch: numel(&batch_shape),
        a_map: Mapping::new(ab, &batch_shape),
        b_map: Mapping::new(bb, &batch_shape),
        out_shape,
    })
}

impl Tape {
    fn binary_needs(&self, a: Var, b: Var) -> bool {
        self.needs(a) || self.needs(b)
    }

    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = plan_matmul(self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; numel(&plan.out_shape)];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        for bi in 0..plan.batch {
            let ao = plan.a_map.at(bi) * m * k;
            let bo = plan.b_map.at(bi) * k * n;
            mm(
                &av[ao..ao + m * k],
                &bv[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(&plan.out_shape, out)?;
        let needs = self.binary_needs(a, b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::dim(name, sa, sb))?;
        let ma = Mapping::new(sa, &out_shape);
        let mb = Mapping::new(sb, &out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let data = (0..n).map(|i| f(av[ma.at(i)], bv[mb.at(i)])).collect();
        Ok((Tensor::new(&out_shape, data)?, self.binary_needs(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, needs) = self.broadcast_binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), needs))
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Gelu => |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Scale(_) => |x| x,
        };
        let src = self.value(x);
        let data: Vec<f64> = match kind {
            Unary::Scale(c) => src.data().iter().map(|v| v * c).collect(),
            _ => src.data().iter().map(|&v| f(v)).collect(),
        };
        let t = Tensor::new(src.shape(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Unary(x, kind), needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(op, self.shape(x), &[axis]));
        }
        Ok(())
    }

    fn check_finite(&self, x: Var, op: &str) -> Result<()> {
        if self.value(x).data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite input to {op}")));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        self.check_finite(x, "softmax")?;
        let src = self.value(x);
        let (outer, n, inner) = split_axis(src.shape(), axis);
        let xv = src.data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| xv[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (xv[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let t = Tensor::new(src.shape(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Softmax(x, axis), needs))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "log_softmax")?;
        self.check_finite(x, "log_softmax")?;
        let src = self.value(x);
        let (outer, n, inner) = split_axis(src.shape(), axis);
        let xv = src.data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n).map(|j| xv[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (xv[base + j * inner] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[base + j * inner] = xv[base + j * inner] - lse;
                }
            }
        }
        let t = Tensor::new(src.shape(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::LogSoftmax(x, axis), needs))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "sum_axis")?;
        let src = self.value(x);
        let (outer, n, inner) = split_axis(src.shape(), axis);
        let xv = src.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(&shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SumAxis(x, axis), needs))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "mean_axis")?;
        let n = self.shape(x)[axis];
        if n == 0 {
            return Err(Error::Input("mean over an empty axis".into()));
        }
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let r = src.rank();
        if r < 2 {
            return Err(Error::dim("transpose", src.shape(), &[]));
        }
        let (m, n) = (src.shape()[r - 2], src.shape()[r - 1]);
        let batch = src.numel() / (m * n).max(1);
        let xv = src.data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            let o = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = xv[o + i * n + j];
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(&shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis, "narrow")?;
        let src = self.value(x);
        let (outer, n, inner) = split_axis(src.shape(), axis);
        if start + len > n {
            return Err(Error::dim("narrow", src.shape(), &[axis, start, len]));
        }
        let xv = src.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&xv[from..from + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Narrow { x, axis, start }, needs))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), axis }, needs))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let d = *src
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm", src.shape(), &[]))?;
        let rows = src.numel() / d.max(1);
        let xv = src.data();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let t = Tensor::new(src.shape(), xhat.clone())?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::LayerNorm { x, xhat, inv_std }, needs))
    }

    /// Records a hand-written operation whose forward value is `output`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// Divides each row (last axis) by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let axis = self
            .shape(x)
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::dim("l2_normalize", &[], &[]))?;
        let sq = self.mul(x, x)?;
        let ss = self.sum_axis(sq, axis)?;
        let norm = self.sqrt(ss);
        self.div(x, norm)
    }

    pub(crate) fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let plan = plan_matmul(ta.shape(), tb.shape()).expect("validated in forward");
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.needs(*a) {
                    let mut ga = vec![0.0; ta.numel()];
                    for bi in 0..plan.batch {
                        let ao = plan.a_map.at(bi) * m * k;
                        let bo = plan.b_map.at(bi) * k * n;
                        mm_nt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Tape::accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; tb.numel()];
                    for bi in 0..plan.batch {
                        let ao = plan.a_map.at(bi) * m * k;
                        let bo = plan.b_map.at(bi) * k * n;
                        mm_tn(
                            &ta.data()[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    Tape::accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ma = Mapping::new(ta.shape(), out.shape());
                let mb = Mapping::new(tb.shape(), out.shape());
                let (av, bv) = (ta.data(), tb.data());
                let op = &node.op;
                if self.needs(*a) {
                    let mut ga = vec![0.0; ta.numel()];
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ma.at(i)] += match op {
                            Op::Add(..) | Op::Sub(..) => gi,
                            Op::Mul(..) => gi * bv[mb.at(i)],
                            _ => gi / bv[mb.at(i)],
                        };
                    }
                    Tape::accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; tb.numel()];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = mb.at(i);
                        gb[j] += match op {
                            Op::Add(..) => gi,
                            Op::Sub(..) => -gi,
                            Op::Mul(..) => gi * av[ma.at(i)],
                            _ => -gi * av[ma.at(i)] / (bv[j] * bv[j]),
                        };
                    }
                    Tape::accumulate(grads, *b, gb);
                }
            }
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let yv = out.data();
                let gx: Vec<f64> = match kind {
                    Unary::Exp => g.iter().zip(yv).map(|(g, y)| g * y).collect(),
                    Unary::Ln => g.iter().zip(xv).map(|(g, x)| g / x).collect(),
                    Unary::Sqrt => g.iter().zip(yv).map(|(g, y)| g * 0.5 / y).collect(),
                    Unary::Scale(c) => g.iter().map(|g| g * c).collect(),
                    Unary::Gelu => g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| {
                            let inner = GELU_C * (x + 0.044715 * x * x * x);
                            let th = inner.tanh();
                            let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)
                        })
                        .collect(),
                };
                Tape::accumulate(grads, *x, gx);
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let yv = out.data();
                let log = matches!(node.op, Op::LogSoftmax(..));
                let mut gx = vec![0.0; yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let at = |j: usize| base + j * inner;
                        if log {
                            let gsum: f64 = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] = g[at(j)] - yv[at(j)].exp() * gsum;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|j| g[at(j)] * yv[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] = yv[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                Tape::accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                Tape::accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let mut gx = vec![0.0; numel(shape)];
                for o in 0..outer {
                    for j in 0..n {
                        gx[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                Tape::accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => {
                let r = out.rank();
                let (n, m) = (out.shape()[r - 2], out.shape()[r - 1]);
                let batch = out.numel() / (m * n).max(1);
                let mut gx = vec![0.0; g.len()];
                for b in 0..batch {
                    let o = b * m * n;
                    for i in 0..n {
                        for j in 0..m {
                            gx[o + j * n + i] = g[o + i * m + j];
                        }
                    }
                }
                Tape::accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => Tape::accumulate(grads, *x, g.to_vec()),
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = split_axis(shape, *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    gx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                Tape::accumulate(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[from..from + len * inner]);
                        }
                        Tape::accumulate(grads, v, gx);
                    }
                    offset += len;
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; g.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = is * (gr[j] - mg - xr[j] * mgx);
                    }
                }
                Tape::accumulate(grads, *x, gx);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let adj = op.backward(&values, out, g, &needs);
                for ((&v, gv), need) in inputs.iter().zip(adj).zip(needs) {
                    if let (Some(gv), true) = (gv, need) {
                        Tape::accumulate(grads, v, gv);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_identity_and_empty() {
        let mut tape = Tape::new();
        let m = t(&[3, 3], &[1., -2., 3., 0.5, 5., 6., 7., 8., 9.]);
        let i3 = tape.constant(Tensor::eye(3));
        let mv = tape.constant(m.clone());
        let p = tape.matmul(i3, mv).unwrap();
        assert!(tape.value(p).bit_eq(&m));

        let a = tape.constant(Tensor::zeros(&[2, 0]));
        let b = tape.constant(Tensor::zeros(&[0, 3]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 3]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-15);
        let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        for (v, e) in tape.value(y).data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((v - e).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[f64::NAN, 0.]));
        assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn elementwise_cases() {
        let mut tape = Tape::new();
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let ones = tape.constant(Tensor::ones(&[2, 3]));
        let xv = tape.constant(x.clone());
        let y = tape.mul(ones, xv).unwrap();
        assert!(tape.value(y).bit_eq(&x));

        let a = tape.constant(Tensor::zeros(&[3, 1, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 5, 4]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 5, 4]);

        let s = tape.constant(t(&[1, 1], &[2.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let r = tape.mul(s, m).unwrap();
        assert_eq!(tape.value(r).data(), &[2., 4., 6., 8.]);

        let bad = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(tape.add(m, bad).is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut store = ParamStore::new();
        store.insert("p", t(&[4], &[1., 2., 3., 4.]), true).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let l = tape.sum(p);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get("p").unwrap().grad().unwrap(), &[1.; 4]);

        let mut store = ParamStore::new();
        store.insert("p", t(&[2], &[1., 2.]), true).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get("p").unwrap().grad().unwrap(), &[2., 4.]);
        // A second sweep accumulates.
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get("p").unwrap().grad().unwrap(), &[4., 8.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::ones(&[2]), true).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        assert!(matches!(tape.backward(p, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[2]), false).unwrap();
        store.insert("p", Tensor::ones(&[2]), true).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let p = tape.param(&store, "p").unwrap();
        let y = tape.mul(w, p).unwrap();
        let l = tape.sum(y);
        tape.backward(l, &mut store).unwrap();
        assert!(store.get("w").unwrap().grad().is_none());
        assert!(store.get("p").unwrap().grad().is_some());
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 5, 3], |i| i as f64));
        let a = tape.narrow(x, 1, 0, 1).unwrap();
        let b = tape.narrow(x, 1, 1, 4).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert!(tape.value(y).bit_eq(tape.value(x)));
    }
}
