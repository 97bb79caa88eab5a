//! Shifted-window attention with scaled cosine similarity and a learned
//! relative position bias.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Activation, Graph, IndexMap, Var, SKIP};
use crate::nn::{Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound applied to the per-head temperature.
pub const TAU_MIN: f64 = 0.01;
/// Norm floor used when normalizing query/key rows.
pub const COSINE_EPS: f64 = 1e-6;
/// Additive logit for token pairs that straddle a shifted-window seam.
const MASK_LOGIT: f64 = -100.0;
const MLP_RATIO: usize = 2;

/// Window tiling of a `[b, c, h, w]` feature map, zero-padded to a multiple
/// of the window and cyclically shifted by `shift`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
    padded_h: usize,
    padded_w: usize,
}

impl WindowLayout {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize, window: usize, shift: usize) -> Self {
        assert!(window > 0 && shift < window);
        Self {
            batch,
            channels,
            height,
            width,
            window,
            shift,
            padded_h: height.div_ceil(window) * window,
            padded_w: width.div_ceil(window) * window,
        }
    }

    pub fn windows_per_image(&self) -> usize {
        (self.padded_h / self.window) * (self.padded_w / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    fn windows_x(&self) -> usize {
        self.padded_w / self.window
    }

    /// `[b, c, h, w]` → `[b·windows·tokens, c]` (padding reads zero).
    pub fn partition_map(&self) -> IndexMap {
        let (ws, c, nwx) = (self.window, self.channels, self.windows_x());
        let nw = self.windows_per_image();
        let n = self.tokens_per_window();
        let mut src = Vec::with_capacity(self.batch * nw * n * c);
        for b in 0..self.batch {
            for win in 0..nw {
                let (wy, wx) = (win / nwx, win % nwx);
                for t in 0..n {
                    let r = wy * ws + t / ws;
                    let col = wx * ws + t % ws;
                    let y = (r + self.shift) % self.padded_h;
                    let x = (col + self.shift) % self.padded_w;
                    for ch in 0..c {
                        src.push(if y < self.height && x < self.width {
                            (((b * c + ch) * self.height + y) * self.width + x) as u32
                        } else {
                            SKIP
                        });
                    }
                }
            }
        }
        IndexMap {
            out_shape: vec![self.batch * nw * n, c],
            src,
        }
    }

    /// Inverse of [`partition_map`](Self::partition_map) on the unpadded region.
    pub fn reverse_map(&self) -> IndexMap {
        let (ws, c, nwx) = (self.window, self.channels, self.windows_x());
        let nw = self.windows_per_image();
        let n = self.tokens_per_window();
        let mut src = Vec::with_capacity(self.batch * c * self.height * self.width);
        for b in 0..self.batch {
            for ch in 0..c {
                for y in 0..self.height {
                    for x in 0..self.width {
                        let r = (y + self.padded_h - self.shift) % self.padded_h;
                        let col = (x + self.padded_w - self.shift) % self.padded_w;
                        let win = (r / ws) * nwx + col / ws;
                        let t = (r % ws) * ws + col % ws;
                        src.push((((b * nw + win) * n + t) * c + ch) as u32);
                    }
                }
            }
        }
        IndexMap {
            out_shape: vec![self.batch, c, self.height, self.width],
            src,
        }
    }

    /// Additive mask `[windows, n, n]` separating regions that were not
    /// adjacent before the cyclic shift. All zeros when unshifted.
    pub fn shift_mask(&self) -> Vec<f64> {
        let (ws, nwx) = (self.window, self.windows_x());
        let nw = self.windows_per_image();
        let n = self.tokens_per_window();
        let mut out = vec![0.0; nw * n * n];
        if self.shift == 0 {
            return out;
        }
        let region = |p: usize, size: usize| -> usize {
            if p < size - ws {
                0
            } else if p < size - self.shift {
                1
            } else {
                2
            }
        };
        for win in 0..nw {
            let (wy, wx) = (win / nwx, win % nwx);
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let r = wy * ws + t / ws;
                    let col = wx * ws + t % ws;
                    region(r, self.padded_h) * 3 + region(col, self.padded_w)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    if labels[i] != labels[j] {
                        out[(win * n + i) * n + j] = MASK_LOGIT;
                    }
                }
            }
        }
        out
    }
}

/// Partition a `[b, c, h, w]` tensor into windows `[b·windows·tokens, c]`.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, window: usize, shift: usize) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    WindowLayout::new(b, c, h, w, window, shift).partition_map().apply(x)
}

/// Undo [`window_partition`].
pub fn window_reverse<T: Scalar>(
    windows: &Tensor<T>,
    shape: (usize, usize, usize, usize),
    window: usize,
    shift: usize,
) -> Tensor<T> {
    let (b, c, h, w) = shape;
    WindowLayout::new(b, c, h, w, window, shift).reverse_map().apply(windows)
}

/// Index of the relative offset between tokens `i` and `j` of a window.
fn relative_index(i: usize, j: usize, ws: usize) -> usize {
    let (yi, xi) = (i / ws, i % ws);
    let (yj, xj) = (j / ws, j % ws);
    let dy = yi + ws - 1 - yj;
    let dx = xi + ws - 1 - xj;
    dy * (2 * ws - 1) + dx
}

/// Gather map from the `[(2ws−1)², heads]` bias table to `[heads, n·n]`.
fn bias_map(ws: usize, heads: usize) -> IndexMap {
    let n = ws * ws;
    let mut src = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                src.push((relative_index(i, j, ws) * heads + h) as u32);
            }
        }
    }
    IndexMap {
        out_shape: vec![heads, n * n],
        src,
    }
}

/// `[groups·n, 3c]` → q/k/v `[groups·heads, n, d]` for part 0, 1 or 2.
fn split_heads_map(groups: usize, n: usize, c: usize, heads: usize, part: usize) -> IndexMap {
    let d = c / heads;
    let mut src = Vec::with_capacity(groups * n * c);
    for gw in 0..groups {
        for h in 0..heads {
            for t in 0..n {
                for e in 0..d {
                    src.push(((gw * n + t) * 3 * c + part * c + h * d + e) as u32);
                }
            }
        }
    }
    IndexMap {
        out_shape: vec![groups * heads, n, d],
        src,
    }
}

/// `[groups·heads, n, d]` → `[groups·n, c]`.
fn merge_heads_map(groups: usize, n: usize, c: usize, heads: usize) -> IndexMap {
    let d = c / heads;
    let mut src = Vec::with_capacity(groups * n * c);
    for gw in 0..groups {
        for t in 0..n {
            for h in 0..heads {
                for e in 0..d {
                    src.push((((gw * heads + h) * n + t) * d + e) as u32);
                }
            }
        }
    }
    IndexMap {
        out_shape: vec![groups * n, c],
        src,
    }
}

/// `[b, c, h, w]` ↔ `[b·h·w, c]`.
fn token_maps(b: usize, c: usize, hw: usize) -> (IndexMap, IndexMap) {
    let mut to = Vec::with_capacity(b * c * hw);
    for bi in 0..b {
        for s in 0..hw {
            for ch in 0..c {
                to.push(((bi * c + ch) * hw + s) as u32);
            }
        }
    }
    let mut from = Vec::with_capacity(b * c * hw);
    for bi in 0..b {
        for ch in 0..c {
            for s in 0..hw {
                from.push(((bi * hw + s) * c + ch) as u32);
            }
        }
    }
    (
        IndexMap {
            out_shape: vec![b * hw, c],
            src: to,
        },
        IndexMap {
            out_shape: vec![b, c, hw],
            src: from,
        },
    )
}

/// `Softmax(cos(Q, K)/τ + B + mask)·V` for every (window, head) group.
///
/// `q`, `k`, `v`: `[groups·heads, n, d]`; `inv_tau`: `[heads]`;
/// `bias`: `[heads, n·n]`; `mask`: any tensor whose size divides the logits
/// and repeats over the leading groups. Returns `(output, attention weights)`.
pub fn window_attention<T: Scalar>(
    g: &Graph<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    inv_tau: &Var<T>,
    bias: Option<&Var<T>>,
    mask: Option<&Var<T>>,
) -> (Var<T>, Var<T>) {
    let (gh, n, _) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let heads = inv_tau.value().numel();
    let groups = gh / heads;
    let eps = T::lit(COSINE_EPS);
    let qn = g.l2_normalize_rows(q, eps);
    let kn = g.l2_normalize_rows(k, eps);
    let cos = g.bmm(&qn, &kn, false, true);
    let logits = g.reshape(&cos, &[groups, heads, n * n]);
    let mut logits = g.mul_axis(&logits, inv_tau, 1);
    if let Some(b) = bias {
        logits = g.add_leading(&logits, b);
    }
    if let Some(m) = mask {
        logits = g.add_leading(&logits, m);
    }
    let rows = g.reshape(&logits, &[gh * n, n]);
    let attn = g.softmax_rows(&rows);
    let attn = g.reshape(&attn, &[gh, n, n]);
    (g.bmm(&attn, v, false, false), attn)
}

/// Convenience wrapper over plain tensors: `q`, `k`, `v` are `[n, d]`, a single head.
pub fn scaled_cosine_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    tau: T,
    bias: Option<&Tensor<T>>,
) -> (Tensor<T>, Tensor<T>) {
    let g = Graph::<T>::inference();
    let lift = |t: &Tensor<T>| {
        let s = t.shape();
        g.constant(t.clone().reshape(&[1, s[0], s[1]]).unwrap())
    };
    let inv = g.constant(Tensor::scalar(T::one() / tau.max(T::lit(TAU_MIN))));
    let b = bias.map(|b| {
        let n = b.shape()[0];
        g.constant(b.clone().reshape(&[1, n * n]).unwrap())
    });
    let (out, attn) = window_attention(&g, &lift(q), &lift(k), &lift(v), &inv, b.as_ref(), None);
    let n = q.shape()[0];
    (
        out.value().clone().reshape(&[n, v.shape()[1]]).unwrap(),
        attn.value().clone().reshape(&[n, n]).unwrap(),
    )
}

/// One transformer block: window attention and MLP, each with a post-norm residual.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub channels: usize,
    pub window: usize,
    pub heads: usize,
    pub shifted: bool,
    qkv: Linear,
    proj: Linear,
    norm1: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    norm2: LayerNorm,
    pub tau: ParamId,
    pub bias_table: ParamId,
}

impl SwinBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        window: usize,
        heads: usize,
        shifted: bool,
        rng: &mut R,
    ) -> Self {
        let hidden = channels * MLP_RATIO;
        Self {
            channels,
            window,
            heads,
            shifted,
            qkv: Linear::new(store, &format!("{name}.qkv"), channels, 3 * channels, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), channels, channels, true, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels),
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels),
            tau: store.add(format!("{name}.tau"), Tensor::full(&[heads], T::one())),
            bias_table: store.add(
                format!("{name}.rel_bias"),
                Tensor::zeros(&[(2 * window - 1) * (2 * window - 1), heads]),
            ),
        }
    }

    pub fn shift(&self) -> usize {
        if self.shifted {
            self.window / 2
        } else {
            0
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let (b, c, h, w) = x.value().dims4();
        let layout = WindowLayout::new(b, c, h, w, self.window, self.shift());
        let groups = b * layout.windows_per_image();
        let n = layout.tokens_per_window();

        let tokens = g.gather(x, &Rc::new(layout.partition_map()));
        let qkv = self.qkv.forward(g, p, &tokens);
        let split = |part| g.gather(&qkv, &Rc::new(split_heads_map(groups, n, c, self.heads, part)));
        let (q, k, v) = (split(0), split(1), split(2));

        let tau = g.clamp_min(p.var(self.tau), T::lit(TAU_MIN));
        let ones = g.constant(Tensor::full(&[self.heads], T::one()));
        let inv_tau = g.div(&ones, &tau);
        let bias = g.gather(p.var(self.bias_table), &Rc::new(bias_map(self.window, self.heads)));
        let mask = (self.shift() > 0).then(|| {
            let per_window = layout.shift_mask();
            let mut full = Vec::with_capacity(per_window.len() * self.heads);
            for win in per_window.chunks(n * n) {
                for _ in 0..self.heads {
                    full.extend(win.iter().map(|&m| T::lit(m)));
                }
            }
            g.constant(Tensor::from_vec(&[layout.windows_per_image(), self.heads, n * n], full).unwrap())
        });
        let (attended, _) = window_attention(g, &q, &k, &v, &inv_tau, Some(&bias), mask.as_ref());
        let merged = g.gather(&attended, &Rc::new(merge_heads_map(groups, n, c, self.heads)));
        let projected = self.proj.forward(g, p, &merged);
        let normed = self.norm1.forward(g, p, &projected);
        let back = g.gather(&normed, &Rc::new(layout.reverse_map()));
        let x = g.add(x, &back);

        let (to_tokens, from_tokens) = token_maps(b, c, h * w);
        let t = g.gather(&x, &Rc::new(to_tokens));
        let hdn = self.fc1.forward(g, p, &t);
        let hdn = g.activation(&hdn, Activation::Gelu);
        let out = self.fc2.forward(g, p, &hdn);
        let out = self.norm2.forward(g, p, &out);
        let out = g.gather(&out, &Rc::new(from_tokens));
        let out = g.reshape(&out, &[b, c, h, w]);
        g.add(&x, &out)
    }
}

/// Unshifted block followed by a shifted block.
#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub blocks: [SwinBlock; 2],
}

impl AttentionModule {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        window: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            blocks: [
                SwinBlock::new(store, &format!("{name}.block0"), channels, window, heads, false, rng),
                SwinBlock::new(store, &format!("{name}.block1"), channels, window, heads, true, rng),
            ],
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let x = self.blocks[0].forward(g, p, x);
        self.blocks[1].forward(g, p, &x)
    }
}
