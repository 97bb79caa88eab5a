use std::rc::Rc;

use super::{Graph, Var};
use crate::kernels::{col2im, im2col, matmul, ConvGeom};
use crate::entropy_engine::likelihood::discretized_gaussian;
use crate::scalar::{normal_cdf, normal_pdf, Scalar};
use crate::tensor::Tensor;

/// Marks an output element of an [`IndexMap`] that reads zero.
pub const SKIP: u32 = u32::MAX;

/// Output element `i` reads input element `src[i]` (or zero for [`SKIP`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    pub out_shape: Vec<usize>,
    pub src: Vec<u32>,
}

impl IndexMap {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let data = x.data();
        let out = self
            .src
            .iter()
            .map(|&s| if s == SKIP { T::zero() } else { data[s as usize] })
            .collect();
        Tensor::from_vec(&self.out_shape, out).expect("index map shape")
    }

    /// Adjoint: scatter-add `grad` back into a tensor of `in_shape`.
    pub fn scatter<T: Scalar>(&self, grad: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
        let mut out = Tensor::zeros(in_shape);
        let dst = out.data_mut();
        for (&s, &g) in self.src.iter().zip(grad.data()) {
            if s != SKIP {
                dst[s as usize] += g;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Gelu,
    Softplus,
    Sigmoid,
    Exp,
    Ln,
}

impl Activation {
    #[inline]
    fn eval<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(s) => {
                if x >= T::zero() {
                    x
                } else {
                    x * T::lit(s)
                }
            }
            Activation::Gelu => x * normal_cdf(x),
            Activation::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Exp => x.exp(),
            Activation::Ln => x.ln(),
        }
    }

    /// Derivative given input `x` and output `y`.
    #[inline]
    fn deriv<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x >= T::zero() {
                    T::one()
                } else {
                    T::lit(s)
                }
            }
            Activation::Gelu => normal_cdf(x) + x * normal_pdf(x),
            Activation::Softplus => T::one() / (T::one() + (-x).exp()),
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Exp => y,
            Activation::Ln => T::one() / x,
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_transpose_out(size: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (size - 1) * stride + kernel + out_pad - 2 * pad
}

impl<T: Scalar> Graph<T> {
    // ----- elementwise -------------------------------------------------------

    pub fn activation(&self, x: &Var<T>, act: Activation) -> Var<T> {
        let out = x.value.map(|v| act.eval(v));
        let xv = x.rc();
        let yv = Rc::new(out.clone());
        self.record(out, &[x], move |g, _| {
            let d = xv
                .data()
                .iter()
                .zip(yv.data())
                .zip(g.data())
                .map(|((&a, &b), &gg)| gg * act.deriv(a, b))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), d).unwrap())]
        })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.value.zip_map(&b.value, |x, y| x + y);
        self.record(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        })
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.value.zip_map(&b.value, |x, y| x - y);
        self.record(out, &[a, b], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        })
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.value.zip_map(&b.value, |x, y| x * y);
        let (av, bv) = (a.rc(), b.rc());
        self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&bv, |gg, y| gg * y)),
                needs[1].then(|| g.zip_map(&av, |gg, x| gg * x)),
            ]
        })
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "div shape mismatch");
        let out = a.value.zip_map(&b.value, |x, y| x / y);
        let (bv, ov) = (b.rc(), Rc::new(out.clone()));
        self.record(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&bv, |gg, y| gg / y)),
                needs[1].then(|| {
                    let t = g.zip_map(&ov, |gg, q| gg * q);
                    t.zip_map(&bv, |v, y| -v / y)
                }),
            ]
        })
    }

    pub fn mul_scalar(&self, x: &Var<T>, s: T) -> Var<T> {
        self.record(x.value.scale(s), &[x], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&self, x: &Var<T>, s: T) -> Var<T> {
        self.record(x.value.map(|v| v + s), &[x], |g, _| vec![Some(g.clone())])
    }

    /// Elementwise clamp; gradient passes only where the input was inside `[lo, hi]`.
    pub fn clamp(&self, x: &Var<T>, lo: T, hi: T) -> Var<T> {
        let out = x.value.map(|v| v.max(lo).min(hi));
        let xv = x.rc();
        self.record(out, &[x], move |g, _| {
            vec![Some(g.zip_map(&xv, |gg, v| if v < lo || v > hi { T::zero() } else { gg }))]
        })
    }

    pub fn clamp_min(&self, x: &Var<T>, lo: T) -> Var<T> {
        self.clamp(x, lo, T::infinity())
    }

    /// `max(x, bound)` whose gradient also passes below the bound when it
    /// points upward (negative upstream gradient), so bounded values can
    /// recover during training.
    pub fn lower_bound(&self, x: &Var<T>, bound: T) -> Var<T> {
        let out = x.value.map(|v| v.max(bound));
        let xv = x.rc();
        self.record(out, &[x], move |g, _| {
            vec![Some(g.zip_map(&xv, |gg, v| if v >= bound || gg < T::zero() { gg } else { T::zero() }))]
        })
    }

    // ----- broadcasting ------------------------------------------------------

    /// `x + b` with `b` (length `x.shape[axis]`) broadcast along every other axis.
    pub fn add_axis(&self, x: &Var<T>, b: &Var<T>, axis: usize) -> Var<T> {
        let (outer, n, inner) = split_axis(x.shape(), axis);
        assert_eq!(b.value.numel(), n, "add_axis bias length");
        let mut out = x.value.as_ref().clone();
        {
            let bd = b.value.data();
            let d = out.data_mut();
            for o in 0..outer {
                for c in 0..n {
                    let bb = bd[c];
                    for v in &mut d[(o * n + c) * inner..(o * n + c + 1) * inner] {
                        *v += bb;
                    }
                }
            }
        }
        let bshape = b.shape().to_vec();
        self.record(out, &[x, b], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                let gd = g.data();
                for o in 0..outer {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += gd[(o * n + c) * inner..(o * n + c + 1) * inner].iter().copied().sum::<T>();
                    }
                }
                Tensor::from_vec(&bshape, acc).unwrap()
            });
            vec![needs[0].then(|| g.clone()), gb]
        })
    }

    /// `x * s` with `s` (length `x.shape[axis]`) broadcast along every other axis.
    pub fn mul_axis(&self, x: &Var<T>, s: &Var<T>, axis: usize) -> Var<T> {
        let (outer, n, inner) = split_axis(x.shape(), axis);
        assert_eq!(s.value.numel(), n, "mul_axis scale length");
        let mut out = x.value.as_ref().clone();
        {
            let sd = s.value.data();
            let d = out.data_mut();
            for o in 0..outer {
                for c in 0..n {
                    for v in &mut d[(o * n + c) * inner..(o * n + c + 1) * inner] {
                        *v *= sd[c];
                    }
                }
            }
        }
        let (xv, sv) = (x.rc(), s.rc());
        self.record(out, &[x, s], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut t = g.clone();
                let sd = sv.data();
                let d = t.data_mut();
                for o in 0..outer {
                    for c in 0..n {
                        for v in &mut d[(o * n + c) * inner..(o * n + c + 1) * inner] {
                            *v *= sd[c];
                        }
                    }
                }
                t
            });
            let gs = needs[1].then(|| {
                let xd = xv.data();
                let mut acc = vec![T::zero(); n];
                for o in 0..outer {
                    for (c, a) in acc.iter_mut().enumerate() {
                        let r = (o * n + c) * inner..(o * n + c + 1) * inner;
                        *a += gd[r.clone()].iter().zip(&xd[r]).map(|(&p, &q)| p * q).sum::<T>();
                    }
                }
                Tensor::from_vec(sv.shape(), acc).unwrap()
            });
            vec![gx, gs]
        })
    }

    /// `x + b` where `x` is `[k, ...b.shape]` (b repeated over the leading axis).
    pub fn add_leading(&self, x: &Var<T>, b: &Var<T>) -> Var<T> {
        let block = b.value.numel();
        assert_eq!(x.value.numel() % block, 0, "add_leading block size");
        let mut out = x.value.as_ref().clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for (v, &bb) in chunk.iter_mut().zip(b.value.data()) {
                *v += bb;
            }
        }
        let bshape = b.shape().to_vec();
        self.record(out, &[x, b], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); block];
                for chunk in g.data().chunks(block) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                Tensor::from_vec(&bshape, acc).unwrap()
            });
            vec![needs[0].then(|| g.clone()), gb]
        })
    }

    // ----- reductions --------------------------------------------------------

    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let shape = x.shape().to_vec();
        self.record(Tensor::scalar(x.value.sum()), &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let n = T::from_usize(x.value.numel()).unwrap();
        let s = self.sum(x);
        self.mul_scalar(&s, T::one() / n)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&self, a: &Var<T>, b: &Var<T>) -> Var<T> {
        assert_eq!(a.shape(), b.shape(), "mse shape mismatch");
        let n = T::from_usize(a.value.numel()).unwrap();
        let diff = a.value.zip_map(&b.value, |x, y| x - y);
        let v = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
        let diff = Rc::new(diff);
        self.record(Tensor::scalar(v), &[a, b], move |g, needs| {
            let k = T::lit(2.0) * g.data()[0] / n;
            let ga = diff.scale(k);
            vec![needs[0].then(|| ga.clone()), needs[1].then(|| ga.map(|v| -v))]
        })
    }

    /// `Σ −log₂(p)`.
    pub fn neg_log2_sum(&self, p: &Var<T>) -> Var<T> {
        let ln2 = T::lit(std::f64::consts::LN_2);
        let total = p.value.data().iter().map(|&v| -v.ln() / ln2).sum::<T>();
        let pv = p.rc();
        self.record(Tensor::scalar(total), &[p], move |g, _| {
            let s = g.data()[0];
            vec![Some(pv.map(|v| -s / (v * ln2)))]
        })
    }

    /// Mean over the spatial axes of an NCHW tensor → `[n, c]`.
    pub fn mean_spatial(&self, x: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = x.value.data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        self.record(Tensor::from_vec(&[n, c], out).unwrap(), &[x], move |g, _| {
            let mut d = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                d.extend(std::iter::repeat(gv * inv).take(hw));
            }
            vec![Some(Tensor::from_vec(&[n, c, h, w], d).unwrap())]
        })
    }

    // ----- shape ops ---------------------------------------------------------

    pub fn reshape(&self, x: &Var<T>, shape: &[usize]) -> Var<T> {
        let out = x.value.as_ref().clone().reshape(shape).expect("reshape");
        let orig = x.shape().to_vec();
        self.record(out, &[x], move |g, _| vec![Some(g.clone().reshape(&orig).unwrap())])
    }

    pub fn gather(&self, x: &Var<T>, map: &Rc<IndexMap>) -> Var<T> {
        let out = map.apply(&x.value);
        let in_shape = x.shape().to_vec();
        let map = map.clone();
        self.record(out, &[x], move |g, _| vec![Some(map.scatter(g, &in_shape))])
    }

    pub fn concat_channels(&self, parts: &[&Var<T>]) -> Var<T> {
        assert!(!parts.is_empty());
        let (n, _, h, w) = parts[0].value.dims4();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (pn, pc, ph, pw) = p.value.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat_channels shape mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.value.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::from_vec(&[n, total, h, w], data).unwrap();
        self.record(out, parts, move |g, needs| {
            let mut start = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let r = need.then(|| g.narrow_channels(start, c));
                    start += c;
                    r
                })
                .collect()
        })
    }

    pub fn narrow_channels(&self, x: &Var<T>, start: usize, len: usize) -> Var<T> {
        let out = x.value.narrow_channels(start, len);
        let shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| {
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let plane = h * w;
            let mut full = Tensor::zeros(&shape);
            for b in 0..n {
                let dst = (b * c + start) * plane;
                full.data_mut()[dst..dst + len * plane]
                    .copy_from_slice(&g.data()[b * len * plane..(b + 1) * len * plane]);
            }
            vec![Some(full)]
        })
    }

    /// Pick channels by index (in the given order) from an NCHW tensor.
    pub fn gather_channels(&self, x: &Var<T>, channels: &[usize]) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let plane = h * w;
        let mut src = Vec::with_capacity(n * channels.len() * plane);
        for b in 0..n {
            for &ch in channels {
                assert!(ch < c, "channel {ch} out of range {c}");
                let base = (b * c + ch) * plane;
                src.extend((base..base + plane).map(|i| i as u32));
            }
        }
        let map = Rc::new(IndexMap {
            out_shape: vec![n, channels.len(), h, w],
            src,
        });
        self.gather(x, &map)
    }

    // ----- linear algebra ----------------------------------------------------

    /// Batched matmul `[B, m, k] × [B, k, n]`, either operand optionally stored transposed.
    pub fn bmm(&self, a: &Var<T>, b: &Var<T>, trans_a: bool, trans_b: bool) -> Var<T> {
        let (sa, sb) = (a.shape(), b.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm shapes {sa:?} {sb:?}");
        let batch = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dims {sa:?} {sb:?}");
        let mut out = Tensor::zeros(&[batch, m, n]);
        for i in 0..batch {
            matmul(
                m,
                k,
                n,
                &a.value.data()[i * m * k..(i + 1) * m * k],
                trans_a,
                &b.value.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let (av, bv) = (a.rc(), b.rc());
        let (ashape, bshape) = (sa.to_vec(), sb.to_vec());
        self.record(out, &[a, b], move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                let mut ga = Tensor::zeros(&ashape);
                for i in 0..batch {
                    let gc = &gd[i * m * n..(i + 1) * m * n];
                    let bb = &bv.data()[i * k * n..(i + 1) * k * n];
                    let dst = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                    if trans_a {
                        matmul(k, n, m, bb, trans_b, gc, true, dst, false);
                    } else {
                        matmul(m, n, k, gc, false, bb, !trans_b, dst, false);
                    }
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = Tensor::zeros(&bshape);
                for i in 0..batch {
                    let gc = &gd[i * m * n..(i + 1) * m * n];
                    let aa = &av.data()[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb.data_mut()[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        matmul(n, m, k, gc, true, aa, trans_a, dst, false);
                    } else {
                        matmul(k, m, n, aa, !trans_a, gc, false, dst, false);
                    }
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// `[rows, in] × W[in, out] + b[out]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let (rows, inner) = (x.shape()[0], x.shape()[1]);
        let outw = w.shape()[1];
        assert_eq!(w.shape()[0], inner, "linear weight shape");
        let x3 = self.reshape(x, &[1, rows, inner]);
        let w3 = self.reshape(w, &[1, inner, outw]);
        let y = self.bmm(&x3, &w3, false, false);
        let y = self.reshape(&y, &[rows, outw]);
        match b {
            Some(b) => self.add_axis(&y, b, 1),
            None => y,
        }
    }

    /// Normalize each row (last axis) to unit L2 norm; norms below `eps` are replaced by `eps`.
    pub fn l2_normalize_rows(&self, x: &Var<T>, eps: T) -> Var<T> {
        let d = *x.shape().last().unwrap();
        let norms: Vec<T> = x
            .value
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let mut out = x.value.as_ref().clone();
        for (r, &nrm) in out.data_mut().chunks_mut(d).zip(&norms) {
            for v in r {
                *v /= nrm;
            }
        }
        let yv = Rc::new(out.clone());
        let xv = x.rc();
        self.record(out, &[x], move |g, _| {
            let mut gx = g.clone();
            for (((gr, yr), xr), &nrm) in gx
                .data_mut()
                .chunks_mut(d)
                .zip(yv.data().chunks(d))
                .zip(xv.data().chunks(d))
                .zip(&norms)
            {
                let raw = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                if raw > eps {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (gv, &yy) in gr.iter_mut().zip(yr) {
                        *gv = (*gv - yy * dot) / nrm;
                    }
                } else {
                    for gv in gr.iter_mut() {
                        *gv /= nrm;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, x: &Var<T>) -> Var<T> {
        let d = *x.shape().last().unwrap();
        let mut out = x.value.as_ref().clone();
        for r in out.data_mut().chunks_mut(d) {
            let mx = r.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in r.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in r.iter_mut() {
                *v /= s;
            }
        }
        let yv = Rc::new(out.clone());
        self.record(out, &[x], move |g, _| {
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(d).zip(yv.data().chunks(d)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (gv, &yy) in gr.iter_mut().zip(yr) {
                    *gv = yy * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm_rows(&self, x: &Var<T>, gain: &Var<T>, bias: &Var<T>, eps: T) -> Var<T> {
        let d = *x.shape().last().unwrap();
        let dn = T::from_usize(d).unwrap();
        let rows = x.value.numel() / d;
        let mut xhat = Vec::with_capacity(x.value.numel());
        let mut inv_std = Vec::with_capacity(rows);
        for r in x.value.data().chunks(d) {
            let mean = r.iter().copied().sum::<T>() / dn;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            xhat.extend(r.iter().map(|&v| (v - mean) * is));
        }
        let gd = gain.value.data();
        let bd = bias.value.data();
        let out: Vec<T> = xhat
            .chunks(d)
            .flat_map(|r| r.iter().enumerate().map(move |(j, &v)| v * gd[j] + bd[j]))
            .collect();
        let out = Tensor::from_vec(x.shape(), out).unwrap();
        let xhat = Rc::new(xhat);
        let gv = gain.rc();
        self.record(out, &[x, gain, bias], move |g, needs| {
            let gdat = g.data();
            let gx = needs[0].then(|| {
                let mut gx = Vec::with_capacity(gdat.len());
                for ((gr, xr), &is) in gdat.chunks(d).zip(xhat.chunks(d)).zip(&inv_std) {
                    let dxh: Vec<T> = gr.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                    let m1 = dxh.iter().copied().sum::<T>() / dn;
                    let m2 = dxh.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    gx.extend(dxh.iter().zip(xr).map(|(&a, &b)| (a - m1 - b * m2) * is));
                }
                Tensor::from_vec(g.shape(), gx).unwrap()
            });
            let ggain = needs[1].then(|| {
                let mut acc = vec![T::zero(); d];
                for (gr, xr) in gdat.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        acc[j] += gr[j] * xr[j];
                    }
                }
                Tensor::from_vec(&[d], acc).unwrap()
            });
            let gbias = needs[2].then(|| {
                let mut acc = vec![T::zero(); d];
                for gr in gdat.chunks(d) {
                    for j in 0..d {
                        acc[j] += gr[j];
                    }
                }
                Tensor::from_vec(&[d], acc).unwrap()
            });
            vec![gx, ggain, gbias]
        })
    }

    // ----- convolutions ------------------------------------------------------

    /// 2-D convolution, `x: [n, cin, h, w]`, `w: [cout, cin, k, k]`.
    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, stride: usize, pad: usize) -> Var<T> {
        let (n, cin, h, wd) = x.value.dims4();
        let (cout, wcin, k, k2) = w.value.dims4();
        assert_eq!(cin, wcin, "conv2d input channels: x {:?} w {:?}", x.shape(), w.shape());
        assert_eq!(k, k2);
        let geom = ConvGeom::new(cin, h, wd, k, stride, pad);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut out = Tensor::zeros(&[n, cout, geom.out_h, geom.out_w]);
        let mut col = vec![T::zero(); rows * cols];
        let in_sz = cin * h * wd;
        for i in 0..n {
            im2col(&x.value.data()[i * in_sz..(i + 1) * in_sz], &geom, &mut col);
            let dst = &mut out.data_mut()[i * cout * cols..(i + 1) * cout * cols];
            matmul(cout, rows, cols, w.value.data(), false, &col, false, dst, false);
        }
        let (xv, wv) = (x.rc(), w.rc());
        let wshape = w.shape().to_vec();
        let xshape = x.shape().to_vec();
        let y = self.record(out, &[x, w], move |g, needs| {
            let mut gx = needs[0].then(|| Tensor::zeros(&xshape));
            let mut gw = needs[1].then(|| Tensor::zeros(&wshape));
            let mut col = vec![T::zero(); rows * cols];
            for i in 0..n {
                let go = &g.data()[i * cout * cols..(i + 1) * cout * cols];
                if let Some(gw) = gw.as_mut() {
                    im2col(&xv.data()[i * in_sz..(i + 1) * in_sz], &geom, &mut col);
                    matmul(cout, cols, rows, go, false, &col, true, gw.data_mut(), true);
                }
                if let Some(gx) = gx.as_mut() {
                    matmul(rows, cout, cols, wv.data(), true, go, false, &mut col, false);
                    col2im(&col, &geom, &mut gx.data_mut()[i * in_sz..(i + 1) * in_sz]);
                }
            }
            vec![gx, gw]
        });
        match b {
            Some(b) => self.add_axis(&y, b, 1),
            None => y,
        }
    }

    /// Transposed convolution, `x: [n, cin, h, w]`, `w: [cin, cout, k, k]`.
    /// Output side is `(h − 1)·stride + k + out_pad − 2·pad`.
    pub fn conv_transpose2d(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var<T> {
        let (n, cin, h, wd) = x.value.dims4();
        let (wcin, cout, k, _) = w.value.dims4();
        assert_eq!(cin, wcin, "conv_transpose2d input channels");
        let oh = conv_transpose_out(h, k, stride, pad, out_pad);
        let ow = conv_transpose_out(wd, k, stride, pad, out_pad);
        // Geometry of the forward conv that maps the output grid onto the input grid.
        let geom = ConvGeom {
            channels: cout,
            height: oh,
            width: ow,
            kernel: k,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let in_sz = cin * cols;
        let out_sz = cout * oh * ow;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        let mut col = vec![T::zero(); rows * cols];
        for i in 0..n {
            let xi = &x.value.data()[i * in_sz..(i + 1) * in_sz];
            matmul(rows, cin, cols, w.value.data(), true, xi, false, &mut col, false);
            col2im(&col, &geom, &mut out.data_mut()[i * out_sz..(i + 1) * out_sz]);
        }
        let (xv, wv) = (x.rc(), w.rc());
        let (xshape, wshape) = (x.shape().to_vec(), w.shape().to_vec());
        let y = self.record(out, &[x, w], move |g, needs| {
            let mut gx = needs[0].then(|| Tensor::zeros(&xshape));
            let mut gw = needs[1].then(|| Tensor::zeros(&wshape));
            let mut col = vec![T::zero(); rows * cols];
            for i in 0..n {
                im2col(&g.data()[i * out_sz..(i + 1) * out_sz], &geom, &mut col);
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx.data_mut()[i * in_sz..(i + 1) * in_sz];
                    matmul(cin, rows, cols, wv.data(), false, &col, false, dst, false);
                }
                if let Some(gw) = gw.as_mut() {
                    let xi = &xv.data()[i * in_sz..(i + 1) * in_sz];
                    matmul(cin, cols, rows, xi, false, &col, true, gw.data_mut(), true);
                }
            }
            vec![gx, gw]
        });
        match b {
            Some(b) => self.add_axis(&y, b, 1),
            None => y,
        }
    }

    /// 2×2 average pooling with stride 2. An odd side is zero-padded by one on
    /// both ends (padding counted in the average), giving `(s + 1) / 2` outputs.
    pub fn avg_pool2(&self, x: &Var<T>) -> Var<T> {
        let (n, c, h, w) = x.value.dims4();
        let (ph, pw) = (h % 2, w % 2);
        let (oh, ow) = (h / 2 + ph, w / 2 + pw);
        // Input index of tap `t` for output `o`, or None in the padding.
        let tap = |o: usize, t: usize, pad: usize, size: usize| (2 * o + t).checked_sub(pad).filter(|&v| v < size);
        let q = T::lit(0.25);
        let xd = x.value.data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = T::zero();
                    for ti in 0..2 {
                        for tj in 0..2 {
                            if let (Some(r), Some(cc)) = (tap(i, ti, ph, h), tap(j, tj, pw, w)) {
                                s += xd[base + r * w + cc];
                            }
                        }
                    }
                    out.data_mut()[(p * oh + i) * ow + j] = s * q;
                }
            }
        }
        let shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            let gd = g.data();
            let d = gx.data_mut();
            for p in 0..n * c {
                let base = p * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let v = gd[(p * oh + i) * ow + j] * q;
                        for ti in 0..2 {
                            for tj in 0..2 {
                                if let (Some(r), Some(cc)) = (tap(i, ti, ph, h), tap(j, tj, pw, w)) {
                                    d[base + r * w + cc] += v;
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// Valid 1-D correlation with `taps` along the height (`axis = 2`) or
    /// width (`axis = 3`) of an NCHW tensor.
    pub fn correlate_axis(&self, x: &Var<T>, taps: &[T], axis: usize) -> Var<T> {
        assert!(axis == 2 || axis == 3, "correlate_axis: axis must be 2 or 3");
        let (n, c, h, w) = x.value.dims4();
        let k = taps.len();
        let (oh, ow) = if axis == 2 { (h + 1 - k, w) } else { (h, w + 1 - k) };
        assert!(h >= k || axis == 3, "correlate_axis: height below window");
        assert!(w >= k || axis == 2, "correlate_axis: width below window");
        let (sh, sw) = if axis == 2 { (w, 0) } else { (0, 1) };
        let step = sh + sw;
        let xd = x.value.data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        for p in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    let start = p * h * w + i * w + j;
                    let mut s = T::zero();
                    for (t, &kv) in taps.iter().enumerate() {
                        s += kv * xd[start + t * step];
                    }
                    out.data_mut()[(p * oh + i) * ow + j] = s;
                }
            }
        }
        let taps = taps.to_vec();
        let shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            let gd = g.data();
            let d = gx.data_mut();
            for p in 0..n * c {
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = gd[(p * oh + i) * ow + j];
                        let start = p * h * w + i * w + j;
                        for (t, &kv) in taps.iter().enumerate() {
                            d[start + t * step] += kv * gv;
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    // ----- likelihoods -------------------------------------------------------

    /// Discretized Gaussian mass of the unit bin around `v` under `N(mu, sigma²)`,
    /// lower-bounded by `floor`. No gradient flows through floored entries.
    pub fn gaussian_likelihood(&self, v: &Var<T>, mu: &Var<T>, sigma: &Var<T>, floor: T) -> Var<T> {
        assert_eq!(v.shape(), mu.shape(), "likelihood shape (mean)");
        assert_eq!(v.shape(), sigma.shape(), "likelihood shape (scale)");
        let half = T::lit(0.5);
        let n = v.value.numel();
        let mut p = Vec::with_capacity(n);
        let mut dv = Vec::with_capacity(n);
        let mut ds = Vec::with_capacity(n);
        let mut floored = Vec::with_capacity(n);
        for i in 0..n {
            let s = sigma.value.data()[i];
            let r = v.value.data()[i] - mu.value.data()[i];
            let raw = discretized_gaussian(r, s);
            let a = (r + half) / s;
            let b = (r - half) / s;
            let (pa, pb) = (normal_pdf(a), normal_pdf(b));
            floored.push(raw <= floor);
            p.push(raw.max(floor));
            dv.push((pa - pb) / s);
            ds.push(-(a * pa - b * pb) / s);
        }
        let out = Tensor::from_vec(v.shape(), p).unwrap();
        self.record(out, &[v, mu, sigma], move |g, needs| {
            // The floor acts as a lower bound: below it only upward gradients pass.
            let gd: Vec<T> = g
                .data()
                .iter()
                .zip(&floored)
                .map(|(&gg, &f)| if f && gg >= T::zero() { T::zero() } else { gg })
                .collect();
            let gv: Vec<T> = gd.iter().zip(&dv).map(|(&a, &b)| a * b).collect();
            let shape = g.shape();
            vec![
                needs[0].then(|| Tensor::from_vec(shape, gv.clone()).unwrap()),
                needs[1].then(|| Tensor::from_vec(shape, gv.iter().map(|&x| -x).collect()).unwrap()),
                needs[2].then(|| Tensor::from_vec(shape, gd.iter().zip(&ds).map(|(&a, &b)| a * b).collect()).unwrap()),
            ]
        })
    }

    /// Unit-bin mass under a per-channel mixture of logistics.
    ///
    /// `z: [n, c, h, w]`; `logits`, `loc`, `log_scale`: `[c, k]`.
    pub fn logistic_mixture_likelihood(
        &self,
        z: &Var<T>,
        logits: &Var<T>,
        loc: &Var<T>,
        log_scale: &Var<T>,
        floor: T,
    ) -> Var<T> {
        let (n, c, h, w) = z.value.dims4();
        let k = logits.shape()[1];
        let plane = h * w;
        let half = T::lit(0.5);
        let weights: Vec<T> = logits.value.data().chunks(k).flat_map(softmax_vec).collect();
        let scales: Vec<T> = log_scale.value.data().iter().map(|v| v.exp()).collect();
        let locs = loc.value.data();
        let total = z.value.numel();
        let mut p = Vec::with_capacity(total);
        // Per element and component: (Δσ, Δσ'/s, Δ(a σ')) for the backward pass.
        let mut cache = Vec::with_capacity(total * k * 3);
        let mut mask = Vec::with_capacity(total);
        let mut raw = Vec::with_capacity(total);
        for b in 0..n {
            for ch in 0..c {
                for e in 0..plane {
                    let zv = z.value.data()[(b * c + ch) * plane + e];
                    let mut acc = T::zero();
                    for j in 0..k {
                        let (wj, sj, lj) = (weights[ch * k + j], scales[ch * k + j], locs[ch * k + j]);
                        let ap = (zv + half - lj) / sj;
                        let am = (zv - half - lj) / sj;
                        let (sp, sm) = (sigmoid(ap), sigmoid(am));
                        let (dp, dm) = (sp * (T::one() - sp), sm * (T::one() - sm));
                        acc += wj * (sp - sm);
                        cache.push(sp - sm);
                        cache.push((dp - dm) / sj);
                        cache.push(ap * dp - am * dm);
                    }
                    mask.push(acc > floor);
                    raw.push(acc);
                    p.push(acc.max(floor));
                }
            }
        }
        let out = Tensor::from_vec(z.shape(), p).unwrap();
        let pshape = logits.shape().to_vec();
        self.record(out, &[z, logits, loc, log_scale], move |g, needs| {
            let mut gz = vec![T::zero(); total];
            let mut glogit = vec![T::zero(); c * k];
            let mut gloc = vec![T::zero(); c * k];
            let mut gls = vec![T::zero(); c * k];
            for b in 0..n {
                for ch in 0..c {
                    for e in 0..plane {
                        let idx = (b * c + ch) * plane + e;
                        let gg = g.data()[idx];
                        // Lower bound at the floor: below it only upward gradients pass.
                        if !mask[idx] && gg >= T::zero() {
                            continue;
                        }
                        let pval = raw[idx];
                        for j in 0..k {
                            let pj = ch * k + j;
                            let wj = weights[pj];
                            let base = (idx * k + j) * 3;
                            let (delta, dz, da) = (cache[base], cache[base + 1], cache[base + 2]);
                            gz[idx] += gg * wj * dz;
                            gloc[pj] -= gg * wj * dz;
                            gls[pj] -= gg * wj * da;
                            glogit[pj] += gg * wj * (delta - pval);
                        }
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::from_vec(&[n, c, h, w], gz).unwrap()),
                needs[1].then(|| Tensor::from_vec(&pshape, glogit).unwrap()),
                needs[2].then(|| Tensor::from_vec(&pshape, gloc).unwrap()),
                needs[3].then(|| Tensor::from_vec(&pshape, gls).unwrap()),
            ]
        })
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn softmax_vec<T: Scalar>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
