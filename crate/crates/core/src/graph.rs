//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass.  Each
//! node stores its value and, when any input requires a gradient, a closure
//! that maps the output gradient to input gradients.  [`Graph::backward`]
//! walks the tape once in reverse.

use crate::tensor::{batch_of, gemm, log_softmax_in_place, mview, MatView, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct BackCtx<'a, F> {
    inputs: Vec<&'a Tensor<F>>,
    output: &'a Tensor<F>,
    grad: &'a Tensor<F>,
    needs: Vec<bool>,
}

type BackwardFn<F> = Box<dyn Fn(&BackCtx<'_, F>) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Tensor<F>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of one scalar with respect to every leaf that required them.
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, inputs: Vec<Var>, backward: BackwardFn<F>) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            backward: if requires_grad { Some(backward) } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), F::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let ctx = BackCtx {
                inputs: node.inputs.iter().map(|i| &self.nodes[i.0].value).collect(),
                output: &node.value,
                grad: &g,
                needs: node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect(),
            };
            let input_grads = bw(&ctx);
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[inp.0].value.shape());
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Grads { grads }
    }

    // ----- elementwise and broadcasting -----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, BinOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, BinOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.broadcast_binary(a, b, BinOp::Mul)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, op: BinOp) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank = sa.len().max(sb.len());
        let (pa, pb) = (left_pad(&sa, rank), left_pad(&sb, rank));
        let out_shape = broadcast_shape(&pa, &pb);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![F::zero(); out_shape.iter().product()];
        let (da, db) = (va.data(), vb.data());
        for_each_bcast(&out_shape, &pa, &pb, |o, ia, ib| {
            out[o] = match op {
                BinOp::Add => da[ia] + db[ib],
                BinOp::Sub => da[ia] - db[ib],
                BinOp::Mul => da[ia] * db[ib],
            }
        });
        let value = Tensor::new(out_shape.clone(), out);
        self.push(
            value,
            vec![a, b],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let (da, db) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut ga = ctx.needs[0].then(|| vec![F::zero(); da.len()]);
                let mut gb = ctx.needs[1].then(|| vec![F::zero(); db.len()]);
                for_each_bcast(&out_shape, &pa, &pb, |o, ia, ib| {
                    let (fa, fb) = match op {
                        BinOp::Add => (g[o], g[o]),
                        BinOp::Sub => (g[o], -g[o]),
                        BinOp::Mul => (g[o] * db[ib], g[o] * da[ia]),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += fa;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += fb;
                    }
                });
                vec![
                    ga.map(|v| Tensor::new(sa.clone(), v)),
                    gb.map(|v| Tensor::new(sb.clone(), v)),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(
            value,
            vec![a],
            Box::new(move |ctx| vec![Some(ctx.grad.map(|g| g * s))]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(
            value,
            vec![a],
            Box::new(|ctx| {
                vec![Some(ctx.inputs[0].zip_map(ctx.grad, |x, g| {
                    if x > F::zero() {
                        g
                    } else {
                        F::zero()
                    }
                }))]
            }),
        )
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: F) -> Var {
        let value = self.value(a).map(|v| v.max(floor).ln());
        self.push(
            value,
            vec![a],
            Box::new(move |ctx| {
                vec![Some(ctx.inputs[0].zip_map(ctx.grad, |x, g| {
                    if x > floor {
                        g / x
                    } else {
                        F::zero()
                    }
                }))]
            }),
        )
    }

    // ----- linear algebra -----

    /// Batched `op(a) * op(b)`, see [`crate::tensor::matmul`].
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = crate::tensor::matmul(self.value(a), self.value(b), ta, tb);
        self.push(
            value,
            vec![a, b],
            Box::new(move |ctx| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let (ga, gb) = matmul_backward(a, b, ctx.grad, ta, tb, ctx.needs[0], ctx.needs[1]);
                vec![ga, gb]
            }),
        )
    }

    /// `x * w + b` with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w, false, false);
        self.add(xw, b)
    }

    pub fn transpose_last2(&mut self, a: Var) -> Var {
        let t = transpose_last2(self.value(a));
        self.push(
            t,
            vec![a],
            Box::new(|ctx| vec![Some(transpose_last2(ctx.grad))]),
        )
    }

    // ----- normalization -----

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("rank >= 1");
        assert_eq!(self.shape(gain), &[n]);
        assert_eq!(self.shape(bias), &[n]);
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let rows = xv.numel() / n;
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        let nf = F::c(n as f64);
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out);
        self.push(
            value,
            vec![x, gain, bias],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gain = ctx.inputs[1].data();
                let mut dgain = vec![F::zero(); n];
                let mut dbias = vec![F::zero(); n];
                let mut dx = ctx.needs[0].then(|| vec![F::zero(); g.len()]);
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..n {
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                        let dh = gr[j] * gain[j];
                        m1 += dh;
                        m2 += dh * hr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        m1 /= nf;
                        m2 /= nf;
                        for j in 0..n {
                            let dh = gr[j] * gain[j];
                            dx[r * n + j] = rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                }
                vec![
                    dx.map(|d| Tensor::new(ctx.grad.shape().to_vec(), d)),
                    Some(Tensor::new(vec![n], dgain)),
                    Some(Tensor::new(vec![n], dbias)),
                ]
            }),
        )
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let value = crate::tensor::softmax_last(self.value(a));
        self.push(
            value,
            vec![a],
            Box::new(|ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let n = *ctx.output.shape().last().unwrap();
                let mut dx = vec![F::zero(); y.len()];
                for r in 0..y.len() / n {
                    let s = (0..n).map(|j| g[r * n + j] * y[r * n + j]).sum::<F>();
                    for j in 0..n {
                        dx[r * n + j] = y[r * n + j] * (g[r * n + j] - s);
                    }
                }
                vec![Some(Tensor::new(ctx.output.shape().to_vec(), dx))]
            }),
        )
    }

    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = *av.shape().last().expect("rank >= 1");
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(n) {
            log_softmax_in_place(row);
        }
        let value = Tensor::new(av.shape().to_vec(), out);
        self.push(
            value,
            vec![a],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad.data();
                let mut dx = vec![F::zero(); y.len()];
                for r in 0..y.len() / n {
                    let s = g[r * n..(r + 1) * n].iter().copied().sum::<F>();
                    for j in 0..n {
                        dx[r * n + j] = g[r * n + j] - y[r * n + j].exp() * s;
                    }
                }
                vec![Some(Tensor::new(ctx.output.shape().to_vec(), dx))]
            }),
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rank(), 2);
        let (b, c) = (lv.dim(0), lv.dim(1));
        assert_eq!(labels.len(), b);
        let mut logp = lv.data().to_vec();
        for row in logp.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        let bf = F::c(b as f64);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -logp[i * c + y])
            .sum::<F>()
            / bf;
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0];
                let mut dx: Vec<F> = logp.iter().map(|&lp| lp.exp()).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * c + y] -= F::one();
                }
                for v in dx.iter_mut() {
                    *v = *v * g / bf;
                }
                vec![Some(Tensor::new(vec![b, c], dx))]
            }),
        )
    }

    // ----- reductions -----

    pub fn sum_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = *av.shape().last().expect("rank >= 1");
        let out: Vec<F> = av.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let mut shape = av.shape()[..av.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let in_shape = av.shape().to_vec();
        self.push(
            Tensor::new(shape, out),
            vec![a],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = Vec::with_capacity(g.len() * n);
                for &gv in g {
                    dx.extend(std::iter::repeat(gv).take(n));
                }
                vec![Some(Tensor::new(in_shape.clone(), dx))]
            }),
        )
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv = F::one() / F::c(len as f64);
        let mut out = vec![F::zero(); outer * inner];
        let d = av.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (x, &y) in dst.iter_mut().zip(src) {
                    *x += y;
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(
            Tensor::new(out_shape, out),
            vec![a],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![F::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(Tensor::new(shape.clone(), dx))]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<F>();
        let shape = av.shape().to_vec();
        self.push(
            Tensor::scalar(s),
            vec![a],
            Box::new(move |ctx| vec![Some(Tensor::full(&shape, ctx.grad.data()[0]))]),
        )
    }

    // ----- shape manipulation -----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        let in_shape = self.shape(a).to_vec();
        self.push(
            value,
            vec![a],
            Box::new(move |ctx| vec![Some(ctx.grad.clone().reshape(&in_shape))]),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.push(
            Tensor::new(out_shape, out),
            vec![a],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![F::zero(); outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(shape.clone(), dx))]
            }),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(s.len(), first.len());
                assert_eq!(&s[..axis], &first[..axis], "concat outer dims");
                assert_eq!(&s[axis + 1..], &first[axis + 1..], "concat inner dims");
                s[axis]
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        self.push(
            Tensor::new(shape, out),
            parts.to_vec(),
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut grads: Vec<Vec<F>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gi, &l) in grads.iter_mut().zip(&lens) {
                        gi.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .zip(&ctx.needs)
                    .map(|((gi, s), &need)| need.then(|| Tensor::new(s.clone(), gi)))
                    .collect()
            }),
        )
    }

    /// Sliding windows along the time axis of a channels-last sequence
    /// `[B, T, C]`, giving `[B, T_out, k * C]` with zero padding.
    pub fn im2col1d(&mut self, x: Var, k: usize, pad_left: usize, pad_right: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3);
        let (b, t, c) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert!(t + pad_left + pad_right >= k, "kernel longer than padded input");
        let to = t + pad_left + pad_right + 1 - k;
        let mut out = vec![F::zero(); b * to * k * c];
        let d = xv.data();
        for bi in 0..b {
            for ti in 0..to {
                for j in 0..k {
                    let src = ti as isize + j as isize - pad_left as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let s = (bi * t + src as usize) * c;
                    let o = ((bi * to + ti) * k + j) * c;
                    out[o..o + c].copy_from_slice(&d[s..s + c]);
                }
            }
        }
        self.push(
            Tensor::new(vec![b, to, k * c], out),
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![F::zero(); b * t * c];
                for bi in 0..b {
                    for ti in 0..to {
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad_left as isize;
                            if src < 0 || src as usize >= t {
                                continue;
                            }
                            let s = (bi * t + src as usize) * c;
                            let o = ((bi * to + ti) * k + j) * c;
                            for ci in 0..c {
                                dx[s + ci] += g[o + ci];
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![b, t, c], dx))]
            }),
        )
    }

    /// Square patches of a channels-last image `[B, H, W, C]`, giving
    /// `[B, Ho * Wo, k * k * C]`.
    pub fn im2col2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 4);
        let (b, h, w, c) = (xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let cols = k * k * c;
        let mut out = vec![F::zero(); b * ho * wo * cols];
        let d = xv.data();
        let src_index = move |bi: usize, oy: usize, ox: usize, ky: usize, kx: usize| -> Option<usize> {
            let y = (oy * stride + ky) as isize - pad as isize;
            let x = (ox * stride + kx) as isize - pad as isize;
            if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                None
            } else {
                Some(((bi * h + y as usize) * w + x as usize) * c)
            }
        };
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((bi * ho + oy) * wo + ox) * cols;
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some(s) = src_index(bi, oy, ox, ky, kx) {
                                let o = row + (ky * k + kx) * c;
                                out[o..o + c].copy_from_slice(&d[s..s + c]);
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![b, ho * wo, cols], out),
            vec![x],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![F::zero(); b * h * w * c];
                for bi in 0..b {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let row = ((bi * ho + oy) * wo + ox) * cols;
                            for ky in 0..k {
                                for kx in 0..k {
                                    if let Some(s) = src_index(bi, oy, ox, ky, kx) {
                                        let o = row + (ky * k + kx) * c;
                                        for ci in 0..c {
                                            dx[s + ci] += g[o + ci];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(vec![b, h, w, c], dx))]
            }),
        )
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

/// Prepends unit axes up to `rank`.
fn left_pad(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast needs equal rank: {:?} vs {:?}", a, b);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {:?} with {:?}", a, b);
            x.max(y)
        })
        .collect()
}

fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_bcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    if sa == out && sb == out {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    let rank = out.len();
    let (ta, tb) = (bcast_strides(sa, out), bcast_strides(sb, out));
    let inner = out[rank - 1];
    let (ia, ib) = (ta[rank - 1], tb[rank - 1]);
    let outer = total / inner.max(1);
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut base_a = 0;
        let mut base_b = 0;
        for d in 0..rank - 1 {
            base_a += idx[d] * ta[d];
            base_b += idx[d] * tb[d];
        }
        for j in 0..inner {
            f(o * inner + j, base_a + j * ia, base_b + j * ib);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn transpose_last2<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    let r = t.rank();
    let (m, n) = (t.dim(r - 2), t.dim(r - 1));
    let batch = batch_of(t.shape());
    let mut out = vec![F::zero(); t.numel()];
    let d = t.data();
    for p in 0..batch {
        let base = p * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = d[base + i * n + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

fn matmul_backward<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    g: &Tensor<F>,
    ta: bool,
    tb: bool,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>) {
    let (ba, bb) = (batch_of(a.shape()), batch_of(b.shape()));
    let batch = ba.max(bb);
    let (ar, ac) = (a.dim(a.rank() - 2), a.dim(a.rank() - 1));
    let (br, bc) = (b.dim(b.rank() - 2), b.dim(b.rank() - 1));
    let m = if ta { ac } else { ar };
    let n = if tb { br } else { bc };
    let gd = g.data();

    let mut ga = need_a.then(|| vec![F::zero(); a.numel()]);
    let mut gb = need_b.then(|| vec![F::zero(); b.numel()]);

    if bb == 1 && !ta && ba == batch {
        let gv = MatView::row_major(0, batch * m, n);
        let av = MatView::row_major(0, batch * ar, ac);
        let opb = mview(0, br, bc, tb);
        if let Some(ga) = ga.as_mut() {
            gemm(gd, gv, b.data(), opb.t(), F::zero(), ga, av);
        }
        if let Some(gb) = gb.as_mut() {
            let bv = MatView::row_major(0, br, bc);
            if tb {
                gemm(gd, gv.t(), a.data(), av, F::zero(), gb, bv);
            } else {
                gemm(a.data(), av.t(), gd, gv, F::zero(), gb, bv);
            }
        }
    } else {
        for p in 0..batch {
            let ao = if ba == 1 { 0 } else { p * ar * ac };
            let bo = if bb == 1 { 0 } else { p * br * bc };
            let gv = MatView::row_major(p * m * n, m, n);
            let opa = mview(ao, ar, ac, ta);
            let opb = mview(bo, br, bc, tb);
            if let Some(ga) = ga.as_mut() {
                let beta = if ba == 1 && p > 0 { F::one() } else { F::zero() };
                let out = MatView::row_major(ao, ar, ac);
                if ta {
                    gemm(b.data(), opb, gd, gv.t(), beta, ga, out);
                } else {
                    gemm(gd, gv, b.data(), opb.t(), beta, ga, out);
                }
            }
            if let Some(gb) = gb.as_mut() {
                let beta = if bb == 1 && p > 0 { F::one() } else { F::zero() };
                let out = MatView::row_major(bo, br, bc);
                if tb {
                    gemm(gd, gv.t(), a.data(), opa, beta, gb, out);
                } else {
                    gemm(a.data(), opa.t(), gd, gv, beta, gb, out);
                }
            }
        }
    }
    (
        ga.map(|v| Tensor::new(a.shape().to_vec(), v)),
        gb.map(|v| Tensor::new(b.shape().to_vec(), v)),
    )
}
