use super::kernels::{causal_col2im, causal_im2col, gemm, permute};
use super::{huber, huber_grad, sigmoid, softplus, GradError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu {
        x: Var,
        sig: Vec<f64>,
    },
    Tanh(Var),
    Huber(Var, f64),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Matmul(Var, Var),
    CausalConv {
        x: Var,
        kernel: Var,
        dilation: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: f64,
        weights: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err<T>(msg: String) -> Result<T, GradError> {
    Err(GradError::Shape(msg))
}

impl Tape {
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
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.clone()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&a| f(a)).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, GradError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (shape, data): (Vec<usize>, Vec<f64>) = if av.shape() == bv.shape() {
            (
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else if bv.numel() == 1 {
            let y = bv.data()[0];
            (av.shape().to_vec(), av.data().iter().map(|&x| f(x, y)).collect())
        } else if av.numel() == 1 {
            let x = av.data()[0];
            (bv.shape().to_vec(), bv.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return shape_err(format!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape()));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |a| a * c)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddConst(x), |a| a + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// Natural log; every input element must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var, GradError> {
        if let Some(bad) = self.nodes[x.0].value.data().iter().find(|&&a| a <= 0.0 || a.is_nan()) {
            return Err(GradError::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let sig: Vec<f64> = xv.data().iter().map(|&a| sigmoid(a)).collect();
        let data = xv.data().iter().zip(&sig).map(|(a, s)| a * s).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::Silu { x, sig }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn huber(&mut self, x: Var, delta: f64) -> Var {
        self.unary(x, Op::Huber(x, delta), |a| huber(a, delta))
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |a| a.max(floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GradError> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.numel() || shape.contains(&0) {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", v.shape()));
        }
        let value = v.with_shape(shape.to_vec());
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, GradError> {
        let v = &self.nodes[x.0].value;
        let rank = v.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("bad permutation {perm:?} for rank {rank}"));
        }
        let data = permute(v.data(), v.shape(), perm);
        let shape = perm.iter().map(|&p| v.shape()[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, GradError> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return shape_err("transpose needs rank >= 2".into());
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, GradError> {
        let Some(&first) = xs.first() else {
            return shape_err("concat of nothing".into());
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range"));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err(format!("concat mismatch {:?} vs {:?}", s, base));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = &self.nodes[x.0].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec(), axis), rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, GradError> {
        let v = &self.nodes[x.0].value;
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return shape_err(format!("narrow({axis}, {start}, {len}) on {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Narrow { x, axis, start }, rg))
    }

    /// Add a vector `bias` of length `shape(x)[axis]` along `axis`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, GradError> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let shape = xv.shape();
        if axis >= shape.len() || bv.numel() != shape[axis] {
            return shape_err(format!(
                "bias of {:?} does not fit axis {axis} of {shape:?}",
                bv.shape()
            ));
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let b = bv.data();
        let mut data = xv.data().to_vec();
        for (block, &bj) in data.chunks_mut(inner).zip(b.iter().cycle()) {
            block.iter_mut().for_each(|a| *a += bj);
        }
        let value = Tensor::from_parts(shape.to_vec(), data);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias { x, bias, axis }, rg))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), &mut out, (n, 1), false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), rg))
    }

    /// Dilated causal convolution.
    ///
    /// `x` is `[in, time]` or `[in, batch, time]`; `kernel` is `[out, in, k]`
    /// with tap `j` applied at lag `j*dilation`, i.e.
    /// `y[o, t] = Σ_c Σ_j kernel[o, c, j] * x[c, t - j*dilation]`, with zero
    /// left padding so the output keeps the input length. Each batch segment
    /// is padded independently.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var, GradError> {
        let (xv, kv) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let (channels, batch, time) = match *xv.shape() {
            [c, t] => (c, 1, t),
            [c, b, t] => (c, b, t),
            ref s => return shape_err(format!("conv input must be rank 2 or 3, got {s:?}")),
        };
        let [out_ch, in_ch, k] = *kv.shape() else {
            return shape_err(format!("conv kernel must be [out, in, k], got {:?}", kv.shape()));
        };
        if in_ch != channels {
            return shape_err(format!("conv kernel expects {in_ch} channels, input has {channels}"));
        }
        if dilation == 0 {
            return Err(GradError::InvalidInput("dilation must be >= 1".into()));
        }
        let n = batch * time;
        let cols = causal_im2col(xv.data(), channels, batch, time, k, dilation);
        let mut out = vec![0.0; out_ch * n];
        let ck = channels * k;
        gemm(
            out_ch,
            ck,
            n,
            kv.data(),
            (ck, 1),
            &cols,
            (n, 1),
            &mut out,
            (n, 1),
            false,
        );
        let shape = if xv.shape().len() == 2 {
            vec![out_ch, time]
        } else {
            vec![out_ch, batch, time]
        };
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::CausalConv { x, kernel, dilation },
            rg,
        ))
    }

    /// Scaled dot-product attention `softmax(q·kᵀ·scale)·v`, rows stabilised
    /// by subtracting their maximum. Shapes are `[tq, d]`, `[tk, d]`,
    /// `[tk, dv]`, or the same with a leading batch axis.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var, GradError> {
        let (qs, ks, vs) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let dims = |s: &[usize]| -> Option<(usize, usize, usize)> {
            match *s {
                [t, d] => Some((1, t, d)),
                [b, t, d] => Some((b, t, d)),
                _ => None,
            }
        };
        let (Some((bq, tq, d)), Some((bk, tk, dk)), Some((bv, tv, dv))) = (dims(&qs), dims(&ks), dims(&vs)) else {
            return shape_err(format!("attention shapes {qs:?} {ks:?} {vs:?}"));
        };
        if qs.len() != ks.len() || ks.len() != vs.len() || bq != bk || bk != bv || d != dk || tk != tv {
            return shape_err(format!("attention shapes {qs:?} {ks:?} {vs:?}"));
        }
        let batch = bq;
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut weights = vec![0.0; batch * tq * tk];
        let mut out = vec![0.0; batch * tq * dv];
        for b in 0..batch {
            let w = &mut weights[b * tq * tk..(b + 1) * tq * tk];
            gemm(
                tq,
                d,
                tk,
                &qd[b * tq * d..],
                (d, 1),
                &kd[b * tk * d..],
                (1, d),
                w,
                (tk, 1),
                false,
            );
            for row in w.chunks_mut(tk) {
                let mut max = f64::NEG_INFINITY;
                for s in row.iter_mut() {
                    *s *= scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
            gemm(
                tq,
                tk,
                dv,
                w,
                (tk, 1),
                &vd[b * tk * dv..],
                (dv, 1),
                &mut out[b * tq * dv..(b + 1) * tq * dv],
                (dv, 1),
                false,
            );
        }
        let mut shape = qs.clone();
        *shape.last_mut().unwrap() = dv;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Attention {
                q,
                k,
                v,
                scale,
                weights,
            },
            rg,
        ))
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, GradError> {
        let xv = &self.nodes[x.0].value;
        let f = *xv.shape().last().unwrap();
        if self.nodes[gain.0].value.numel() != f || self.nodes[bias.0].value.numel() != f {
            return shape_err(format!("layer_norm params must have {f} entries"));
        }
        let g = self.nodes[gain.0].value.data();
        let bb = self.nodes[bias.0].value.data();
        let rows = xv.numel() / f;
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * f..(r + 1) * f];
            let mu = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / f as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..f {
                let h = (row[i] - mu) * is;
                xhat[r * f + i] = h;
                out[r * f + i] = h * g[i] + bb[i];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(GradError::InvalidInput(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        accumulate(&mut self.grads[loss.0], vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.local_backward(i, &g);
            self.grads[i] = Some(g);
            for (parent, pg) in contributions {
                if self.nodes[parent.0].requires_grad {
                    accumulate(&mut self.grads[parent.0], pg);
                }
            }
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient contributions of node `i` to its parents given its output gradient `g`.
    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let map = |x: Var, f: &dyn Fn(usize, f64) -> f64| -> Vec<(Var, Vec<f64>)> {
            vec![(x, g.iter().enumerate().map(|(j, &gj)| f(j, gj)).collect())]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                vec![
                    (*a, self.unbroadcast(*a, g.to_vec())),
                    (*b, self.unbroadcast(*b, g.to_vec())),
                ]
            }
            Op::Sub(a, b) => vec![
                (*a, self.unbroadcast(*a, g.to_vec())),
                (*b, self.unbroadcast(*b, g.iter().map(|v| -v).collect())),
            ],
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let pick = |v: &[f64], j: usize| if v.len() == 1 { v[0] } else { v[j] };
                let ga = g.iter().enumerate().map(|(j, &gj)| gj * pick(bv, j)).collect();
                let gb = g.iter().enumerate().map(|(j, &gj)| gj * pick(av, j)).collect();
                vec![(*a, self.unbroadcast(*a, ga)), (*b, self.unbroadcast(*b, gb))]
            }
            Op::Scale(x, c) => map(*x, &|_, gj| gj * c),
            Op::AddConst(x) | Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Exp(x) => map(*x, &|j, gj| gj * y[j]),
            Op::Log(x) => {
                let xv = self.val(*x);
                map(*x, &|j, gj| gj / xv[j])
            }
            Op::Sigmoid(x) => map(*x, &|j, gj| gj * y[j] * (1.0 - y[j])),
            Op::Softplus(x) => {
                let xv = self.val(*x);
                map(*x, &|j, gj| gj * sigmoid(xv[j]))
            }
            Op::Silu { x, sig } => {
                let xv = self.val(*x);
                map(*x, &|j, gj| {
                    let s = sig[j];
                    gj * (s + xv[j] * s * (1.0 - s))
                })
            }
            Op::Tanh(x) => map(*x, &|j, gj| gj * (1.0 - y[j] * y[j])),
            Op::Huber(x, delta) => {
                let xv = self.val(*x);
                map(*x, &|j, gj| gj * huber_grad(xv[j], *delta))
            }
            Op::ClampMin(x, floor) => {
                let xv = self.val(*x);
                map(*x, &|j, gj| if xv[j] > *floor { gj } else { 0.0 })
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.val(*x).len()])],
            Op::Mean(x) => {
                let n = self.val(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                vec![(*x, permute(g, node.value.shape(), &inverse))]
            }
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f64>> = xs.iter().map(|x| Vec::with_capacity(self.val(*x).len())).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (x, part) in xs.iter().zip(parts.iter_mut()) {
                        let chunk = self.shape(*x)[*axis] * inner;
                        part.extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                xs.iter().copied().zip(parts).collect()
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let dim = in_shape[*axis];
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; self.val(*x).len()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::AddBias { x, bias, axis } => {
                let shape = node.value.shape();
                let inner: usize = shape[axis + 1..].iter().product();
                let dim = shape[*axis];
                let mut gb = vec![0.0; dim];
                for (block, j) in g.chunks(inner).zip((0..dim).cycle()) {
                    gb[j] += block.iter().sum::<f64>();
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), self.val(*b), (1, n), &mut ga, (k, 1), false);
                    out.push((*a, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.val(*a), (1, k), g, (n, 1), &mut gb, (n, 1), false);
                    out.push((*b, gb));
                }
                out
            }
            Op::CausalConv { x, kernel, dilation } => {
                let xs = self.shape(*x);
                let (channels, batch, time) = match *xs {
                    [c, t] => (c, 1, t),
                    [c, b, t] => (c, b, t),
                    _ => unreachable!(),
                };
                let ks = self.shape(*kernel);
                let (out_ch, k) = (ks[0], ks[2]);
                let n = batch * time;
                let ck = channels * k;
                let mut out = Vec::new();
                if self.rg(*kernel) {
                    let cols = causal_im2col(self.val(*x), channels, batch, time, k, *dilation);
                    let mut gk = vec![0.0; out_ch * ck];
                    gemm(out_ch, n, ck, g, (n, 1), &cols, (1, n), &mut gk, (ck, 1), false);
                    out.push((*kernel, gk));
                }
                if self.rg(*x) {
                    let mut gcols = vec![0.0; ck * n];
                    gemm(
                        ck,
                        out_ch,
                        n,
                        self.val(*kernel),
                        (1, ck),
                        g,
                        (n, 1),
                        &mut gcols,
                        (n, 1),
                        false,
                    );
                    let mut gx = vec![0.0; channels * n];
                    causal_col2im(&gcols, &mut gx, channels, batch, time, k, *dilation);
                    out.push((*x, gx));
                }
                out
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                weights,
            } => {
                let qs = self.shape(*q);
                let (tq, d) = (qs[qs.len() - 2], qs[qs.len() - 1]);
                let ks = self.shape(*k);
                let tk = ks[ks.len() - 2];
                let dv = *self.shape(*v).last().unwrap();
                let batch = self.val(*q).len() / (tq * d);
                let (qd, kd, vd) = (self.val(*q), self.val(*k), self.val(*v));
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; tq * tk];
                for b in 0..batch {
                    let p = &weights[b * tq * tk..(b + 1) * tq * tk];
                    let go = &g[b * tq * dv..(b + 1) * tq * dv];
                    // dV = Pᵀ dO
                    gemm(
                        tk,
                        tq,
                        dv,
                        p,
                        (1, tk),
                        go,
                        (dv, 1),
                        &mut gv[b * tk * dv..],
                        (dv, 1),
                        false,
                    );
                    // dP = dO Vᵀ
                    gemm(
                        tq,
                        dv,
                        tk,
                        go,
                        (dv, 1),
                        &vd[b * tk * dv..],
                        (1, dv),
                        &mut dp,
                        (tk, 1),
                        false,
                    );
                    for (prow, dprow) in p.chunks(tk).zip(dp.chunks_mut(tk)) {
                        let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                        for (pi, di) in prow.iter().zip(dprow.iter_mut()) {
                            *di = pi * (*di - dot) * scale;
                        }
                    }
                    // dQ = dS K, dK = dSᵀ Q
                    gemm(
                        tq,
                        tk,
                        d,
                        &dp,
                        (tk, 1),
                        &kd[b * tk * d..],
                        (d, 1),
                        &mut gq[b * tq * d..],
                        (d, 1),
                        false,
                    );
                    gemm(
                        tk,
                        tq,
                        d,
                        &dp,
                        (1, tk),
                        &qd[b * tq * d..],
                        (d, 1),
                        &mut gk[b * tk * d..],
                        (d, 1),
                        false,
                    );
                }
                vec![(*q, gq), (*k, gk), (*v, gv)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.val(*gain);
                let f = gv.len();
                let rows = inv_std.len();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; f];
                let mut gb = vec![0.0; f];
                for r in 0..rows {
                    let gr = &g[r * f..(r + 1) * f];
                    let hr = &xhat[r * f..(r + 1) * f];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for i in 0..f {
                        gg[i] += gr[i] * hr[i];
                        gb[i] += gr[i];
                        let dh = gr[i] * gv[i];
                        mean_d += dh;
                        mean_dh += dh * hr[i];
                    }
                    mean_d /= f as f64;
                    mean_dh /= f as f64;
                    for i in 0..f {
                        let dh = gr[i] * gv[i];
                        gx[r * f + i] = inv_std[r] * (dh - mean_d - hr[i] * mean_dh);
                    }
                }
                vec![(*x, gx), (*gain, gg), (*bias, gb)]
            }
        }
    }

    fn unbroadcast(&self, target: Var, g: Vec<f64>) -> Vec<f64> {
        if self.val(target).len() == 1 && g.len() != 1 {
            vec![g.iter().sum()]
        } else {
            g
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}
