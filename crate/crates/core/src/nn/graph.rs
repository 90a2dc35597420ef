//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every parameter leaf. When the graph is built for inference
//! (`Graph::inference`), operations skip saving the intermediates their
//! backward pass would need.

use super::gemm::gemm;
use super::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Source of a token row in [`Graph::assemble_tokens`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    /// Row `i` of the optical feature and time tensors.
    Optical(usize),
    /// Row `i` of the radar feature and time tensors.
    Radar(usize),
}

enum Op {
    Input,
    Param(usize),
    Add(Var, Var),
    Relu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    PyramidPool {
        x: Var,
        scale: usize,
    },
    ConcatChannels(Vec<Var>),
    Upsample2x(Var),
    RepeatRows {
        x: Var,
        times: usize,
    },
    RowsToMap {
        x: Var,
        batch: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        tokens: usize,
        weights: Vec<f32>,
    },
    Tokens {
        opt_feat: Var,
        opt_time: Var,
        sar: Option<(Var, Var)>,
        layout: Vec<Vec<TokenSource>>,
    },
    LaplaceNll {
        out: Var,
        dout: Vec<f32>,
    },
    DotConst {
        x: Var,
        c: Vec<f32>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Forward tape. See the module documentation.
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
}

/// Parameter gradients produced by [`Graph::backward`], indexed by parameter id.
pub struct ParamGrads {
    pub grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn training() -> Self {
        Self {
            nodes: Vec::new(),
            train: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            train: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.train,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Parameter leaf; `id` is the index reported back in [`ParamGrads`].
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    /// `x [M, K] · w [K, O] + b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(vx.ndim(), 2, "linear expects a matrix input");
        let (m, k) = (vx.dim(0), vx.dim(1));
        assert_eq!(vw.shape(), &[k, vb.len()], "linear weight shape mismatch");
        let o = vb.len();
        let mut out = vec![0.0; m * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(vb.data());
        }
        gemm(m, k, o, vx.data(), false, vw.data(), false, &mut out, true);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(vec![m, o], out), Op::Linear { x, w, b }, ng)
    }

    /// 2-D convolution with square kernel `w [O, C, k, k]` and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.ndim(), 4, "conv2d expects [N, C, H, W]");
        let (n, c, h, wd) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let (o, k) = (vw.dim(0), vw.dim(2));
        assert_eq!(vw.shape(), &[o, c, k, k], "conv2d weight shape mismatch");
        assert_eq!(self.value(b).len(), o);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(vx.data(), &geom);
        let nl = n * ho * wo;
        let ckk = c * k * k;
        let mut mat = vec![0.0; o * nl];
        gemm(o, ckk, nl, vw.data(), false, &cols, false, &mut mat, false);
        let l = ho * wo;
        let bias = self.value(b).data();
        let mut out = vec![0.0; n * o * l];
        for oc in 0..o {
            let src = &mat[oc * nl..(oc + 1) * nl];
            for img in 0..n {
                let dst = &mut out[(img * o + oc) * l..(img * o + oc + 1) * l];
                for (d, s) in dst.iter_mut().zip(&src[img * l..(img + 1) * l]) {
                    *d = s + bias[oc];
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let cols = if self.train && ng { cols } else { Vec::new() };
        self.push(
            Tensor::new(vec![n, o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            ng,
        )
    }

    /// Layer normalisation over the last axis of a matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f32 = 1e-5;
        let vx = self.value(x);
        let (m, d) = (vx.dim(0), vx.dim(1));
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), d);
        let mut out = vec![0.0; m * d];
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let (xhat, inv_std) = if self.train && ng {
            (xhat, inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        self.push(
            Tensor::new(vec![m, d], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Adaptive average pooling to a `scale × scale` grid followed by
    /// nearest-neighbour upsampling back to the input size.
    pub fn pyramid_pool(&mut self, x: Var, scale: usize) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        assert!(scale >= 1 && scale <= h && scale <= w, "pool scale exceeds map");
        let ybins = bins(h, scale);
        let xbins = bins(w, scale);
        let mut out = vec![0.0; vx.len()];
        let mut pooled = vec![0.0; scale * scale];
        for plane in 0..n * c {
            let src = &vx.data()[plane * h * w..(plane + 1) * h * w];
            for (i, &(y0, y1)) in ybins.iter().enumerate() {
                for (j, &(x0, x1)) in xbins.iter().enumerate() {
                    let mut s = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += src[yy * w + xx];
                        }
                    }
                    pooled[i * scale + j] = s / ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
            let dst = &mut out[plane * h * w..(plane + 1) * h * w];
            for yy in 0..h {
                let bi = yy * scale / h;
                for xx in 0..w {
                    dst[yy * w + xx] = pooled[bi * scale + xx * scale / w];
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::PyramidPool { x, scale },
            ng,
        )
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let first = self.value(xs[0]);
        let (n, h, w) = (first.dim(0), first.dim(2), first.dim(3));
        let ctot: usize = xs.iter().map(|&v| self.value(v).dim(1)).sum();
        let l = h * w;
        let mut out = vec![0.0; n * ctot * l];
        let mut off = 0;
        for &v in xs {
            let t = self.value(v);
            assert_eq!((t.dim(0), t.dim(2), t.dim(3)), (n, h, w), "concat shape mismatch");
            let ci = t.dim(1);
            for img in 0..n {
                let src = &t.data()[img * ci * l..(img + 1) * ci * l];
                out[(img * ctot + off) * l..(img * ctot + off + ci) * l].copy_from_slice(src);
            }
            off += ci;
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(
            Tensor::new(vec![n, ctot, h, w], out),
            Op::ConcatChannels(xs.to_vec()),
            ng,
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &vx.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dst[yy * w2 + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![n, c, h2, w2], out), Op::Upsample2x(x), ng)
    }

    /// `[B, D] -> [B·times, D]`, row `b·times + i` is row `b` of the input.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let vx = self.value(x);
        let (b, d) = (vx.dim(0), vx.dim(1));
        let mut out = Vec::with_capacity(b * times * d);
        for r in 0..b {
            let row = &vx.data()[r * d..(r + 1) * d];
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![b * times, d], out),
            Op::RepeatRows { x, times },
            ng,
        )
    }

    /// `[B·h·w, D] -> [B, D, h, w]`.
    pub fn rows_to_map(&mut self, x: Var, batch: usize, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let d = vx.dim(1);
        let p = h * w;
        assert_eq!(vx.dim(0), batch * p, "rows_to_map row count mismatch");
        let mut out = vec![0.0; batch * d * p];
        for b in 0..batch {
            for px in 0..p {
                let row = &vx.data()[(b * p + px) * d..(b * p + px + 1) * d];
                for (ch, &v) in row.iter().enumerate() {
                    out[(b * d + ch) * p + px] = v;
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![batch, d, h, w], out),
            Op::RowsToMap { x, batch },
            ng,
        )
    }

    /// Single-query multi-head attention per group.
    ///
    /// `q [G, D]` holds one query per group, `k`, `v [G·T, D]` hold `T` tokens
    /// per group. Returns the attended values `[G, D]`; the softmax weights
    /// `[G, heads, T]` are available through [`Graph::attention_weights`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (g, d) = (vq.dim(0), vq.dim(1));
        assert_eq!(d % heads, 0, "model width not divisible by head count");
        assert_eq!(vk.shape(), vv.shape());
        assert_eq!(vk.dim(1), d);
        assert!(g > 0 && vk.dim(0) % g == 0, "token rows not a multiple of groups");
        let t = vk.dim(0) / g;
        assert!(t >= 1, "attention needs at least one token");
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = vec![0.0; g * d];
        let mut weights = vec![0.0; g * heads * t];
        let mut logits = vec![0.0; t];
        for gi in 0..g {
            let qrow = &vq.data()[gi * d..(gi + 1) * d];
            for h in 0..heads {
                let qh = &qrow[h * dh..(h + 1) * dh];
                for (ti, l) in logits.iter_mut().enumerate() {
                    let kh = &vk.data()[(gi * t + ti) * d + h * dh..(gi * t + ti) * d + (h + 1) * dh];
                    *l = scale * qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f32>();
                }
                let w = &mut weights[(gi * heads + h) * t..(gi * heads + h + 1) * t];
                softmax_into(&logits, w);
                let orow = &mut out[gi * d + h * dh..gi * d + (h + 1) * dh];
                for (ti, &wt) in w.iter().enumerate() {
                    let vh = &vv.data()[(gi * t + ti) * d + h * dh..(gi * t + ti) * d + (h + 1) * dh];
                    for (o, &x) in orow.iter_mut().zip(vh) {
                        *o += wt * x;
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::new(vec![g, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                tokens: t,
                weights,
            },
            ng,
        )
    }

    /// Softmax weights `[G, heads, T]` of an attention node.
    pub fn attention_weights(&self, node: Var) -> Option<(&[f32], usize, usize)> {
        match &self.nodes[node.0].op {
            Op::Attention {
                weights,
                heads,
                tokens,
                ..
            } => Some((weights, *heads, *tokens)),
            _ => None,
        }
    }

    /// Builds per-pixel token rows `[B·P·T, C + Dt + 2]`.
    ///
    /// `opt_feat [No, C, h, w]` and `opt_time [No, Dt]` hold the optical
    /// acquisitions of the whole batch; `sar` likewise for radar. `layout[b]`
    /// lists the `T` acquisitions of batch element `b` in token order. Each
    /// token is `[feature at pixel ‖ time embedding ‖ modality one-hot]`.
    pub fn assemble_tokens(
        &mut self,
        opt_feat: Var,
        opt_time: Var,
        sar: Option<(Var, Var)>,
        layout: Vec<Vec<TokenSource>>,
    ) -> Var {
        let vf = self.value(opt_feat);
        let (c, h, w) = (vf.dim(1), vf.dim(2), vf.dim(3));
        let dt = self.value(opt_time).dim(1);
        let p = h * w;
        let t = layout.first().map_or(0, |l| l.len());
        assert!(layout.iter().all(|l| l.len() == t), "ragged token layout");
        let b = layout.len();
        let dtok = c + dt + 2;
        let mut out = vec![0.0; b * p * t * dtok];
        for (bi, order) in layout.iter().enumerate() {
            for (ti, src) in order.iter().enumerate() {
                let (feat, time, idx, slot) = match *src {
                    TokenSource::Optical(i) => (self.value(opt_feat), self.value(opt_time), i, 0),
                    TokenSource::Radar(i) => {
                        let (sf, st) = sar.expect("radar token without radar features");
                        (self.value(sf), self.value(st), i, 1)
                    }
                };
                assert_eq!((feat.dim(1), feat.dim(2), feat.dim(3)), (c, h, w));
                let fmap = feat.outer(idx);
                let trow = time.outer(idx);
                for px in 0..p {
                    let row = &mut out[((bi * p + px) * t + ti) * dtok..((bi * p + px) * t + ti + 1) * dtok];
                    for ch in 0..c {
                        row[ch] = fmap[ch * p + px];
                    }
                    row[c..c + dt].copy_from_slice(trow);
                    row[c + dt + slot] = 1.0;
                }
            }
        }
        let ng = self.ng(opt_feat)
            || self.ng(opt_time)
            || sar.is_some_and(|(a, bb)| self.ng(a) || self.ng(bb));
        self.push(
            Tensor::new(vec![b * p * t, dtok], out),
            Op::Tokens {
                opt_feat,
                opt_time,
                sar,
                layout,
            },
            ng,
        )
    }

    /// Mean Laplace negative log-likelihood over valid pixels.
    ///
    /// `out [B, 2C, H, W]` carries `C` location channels followed by `C`
    /// raw log-scale channels (clamped to `[LOG_B_MIN, LOG_B_MAX]`).
    /// `target [B, C, H, W]`, `mask [B, H, W]`.
    pub fn laplace_nll(&mut self, out: Var, target: &Tensor, mask: &[bool]) -> Var {
        let vo = self.value(out);
        let (b, c2, h, w) = (vo.dim(0), vo.dim(1), vo.dim(2), vo.dim(3));
        let c = c2 / 2;
        assert_eq!(target.shape(), &[b, c, h, w], "target shape mismatch");
        assert_eq!(mask.len(), b * h * w, "mask shape mismatch");
        let l = h * w;
        let valid = mask.iter().filter(|&&m| m).count();
        assert!(valid > 0, "laplace_nll needs at least one valid pixel");
        let count = (valid * c) as f32;
        let mut total = 0.0f64;
        let mut dout = if self.train { vec![0.0; vo.len()] } else { Vec::new() };
        for bi in 0..b {
            for ch in 0..c {
                for px in 0..l {
                    if !mask[bi * l + px] {
                        continue;
                    }
                    let mu_i = (bi * c2 + ch) * l + px;
                    let lb_i = (bi * c2 + c + ch) * l + px;
                    let y = target.data()[(bi * c + ch) * l + px];
                    let raw = vo.data()[lb_i];
                    let term = crate::laplace_head::nll_term(y, vo.data()[mu_i], clamp_log_b(raw));
                    total += term.loss as f64;
                    if self.train {
                        dout[mu_i] = term.d_mu / count;
                        dout[lb_i] = if raw > LOG_B_MIN && raw < LOG_B_MAX {
                            term.d_log_b / count
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
        let ng = self.ng(out);
        self.push(
            Tensor::new(vec![1], vec![(total / count as f64) as f32]),
            Op::LaplaceNll { out, dout },
            ng,
        )
    }

    /// Scalar `Σ x·c` for a constant `c`; handy as a probe objective.
    pub fn dot_const(&mut self, x: Var, c: &[f32]) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), c.len());
        let s: f64 = vx.data().iter().zip(c).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![1], vec![s as f32]),
            Op::DotConst { x, c: c.to_vec() },
            ng,
        )
    }

    /// Reverse pass from a scalar node; returns gradients for `n_params` parameter ids.
    pub fn backward(&self, root: Var, n_params: usize) -> ParamGrads {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut out = ParamGrads {
            grads: (0..n_params).map(|_| None).collect(),
        };
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.grads[*id] = Some(Tensor::new(node.value.shape().to_vec(), gy));
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(&mut grads, *b, &gy);
                    }
                    if self.ng(*a) {
                        acc_owned(&mut grads, *a, gy);
                    }
                }
                Op::Relu(x) => {
                    let g: Vec<f32> = gy
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &y)| if y > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc_owned(&mut grads, *x, g);
                }
                Op::Linear { x, w, b } => {
                    let vx = self.value(*x);
                    let vw = self.value(*w);
                    let (m, k) = (vx.dim(0), vx.dim(1));
                    let o = vw.dim(1);
                    if self.ng(*w) {
                        let mut gw = vec![0.0; k * o];
                        gemm(k, m, o, vx.data(), true, &gy, false, &mut gw, false);
                        acc_owned(&mut grads, *w, gw);
                    }
                    if self.ng(*b) {
                        let mut gb = vec![0.0; o];
                        for row in gy.chunks(o) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        acc_owned(&mut grads, *b, gb);
                    }
                    if self.ng(*x) {
                        let mut gx = vec![0.0; m * k];
                        gemm(m, o, k, &gy, false, vw.data(), true, &mut gx, false);
                        acc_owned(&mut grads, *x, gx);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let g = geom;
                    let l = g.ho * g.wo;
                    let nl = g.n * l;
                    let ckk = g.c * g.k * g.k;
                    let mut mat = vec![0.0; g.o * nl];
                    for img in 0..g.n {
                        for oc in 0..g.o {
                            mat[oc * nl + img * l..oc * nl + (img + 1) * l]
                                .copy_from_slice(&gy[(img * g.o + oc) * l..(img * g.o + oc + 1) * l]);
                        }
                    }
                    if self.ng(*w) {
                        let mut gw = vec![0.0; g.o * ckk];
                        gemm(g.o, nl, ckk, &mat, false, cols, true, &mut gw, false);
                        acc_owned(&mut grads, *w, gw);
                    }
                    if self.ng(*b) {
                        let gb: Vec<f32> = mat.chunks(nl).map(|r| r.iter().sum()).collect();
                        acc_owned(&mut grads, *b, gb);
                    }
                    if self.ng(*x) {
                        let mut gcols = vec![0.0; ckk * nl];
                        gemm(ckk, g.o, nl, self.value(*w).data(), true, &mat, false, &mut gcols, false);
                        let gx = col2im(&gcols, g);
                        acc_owned(&mut grads, *x, gx);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let d = node.value.dim(1);
                    let m = node.value.dim(0);
                    let gam = self.value(*gamma).data();
                    if self.ng(*gamma) || self.ng(*beta) {
                        let mut gg = vec![0.0; d];
                        let mut gb = vec![0.0; d];
                        for r in 0..m {
                            for j in 0..d {
                                gg[j] += gy[r * d + j] * xhat[r * d + j];
                                gb[j] += gy[r * d + j];
                            }
                        }
                        if self.ng(*gamma) {
                            acc_owned(&mut grads, *gamma, gg);
                        }
                        if self.ng(*beta) {
                            acc_owned(&mut grads, *beta, gb);
                        }
                    }
                    if self.ng(*x) {
                        let mut gx = vec![0.0; m * d];
                        let mut dxh = vec![0.0; d];
                        for r in 0..m {
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                dxh[j] = gy[r * d + j] * gam[j];
                                s1 += dxh[j];
                                s2 += dxh[j] * xhat[r * d + j];
                            }
                            let inv = inv_std[r];
                            for j in 0..d {
                                gx[r * d + j] =
                                    inv / d as f32 * (d as f32 * dxh[j] - s1 - xhat[r * d + j] * s2);
                            }
                        }
                        acc_owned(&mut grads, *x, gx);
                    }
                }
                Op::PyramidPool { x, scale } => {
                    let s = *scale;
                    let sh = node.value.shape();
                    let (nc, h, w) = (sh[0] * sh[1], sh[2], sh[3]);
                    let ybins = bins(h, s);
                    let xbins = bins(w, s);
                    let mut gx = vec![0.0; node.value.len()];
                    let mut gsum = vec![0.0; s * s];
                    for plane in 0..nc {
                        gsum.fill(0.0);
                        let gp = &gy[plane * h * w..(plane + 1) * h * w];
                        for yy in 0..h {
                            let bi = yy * s / h;
                            for xx in 0..w {
                                gsum[bi * s + xx * s / w] += gp[yy * w + xx];
                            }
                        }
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for (i, &(y0, y1)) in ybins.iter().enumerate() {
                            for (j, &(x0, x1)) in xbins.iter().enumerate() {
                                let share = gsum[i * s + j] / ((y1 - y0) * (x1 - x0)) as f32;
                                for yy in y0..y1 {
                                    for xx in x0..x1 {
                                        dst[yy * w + xx] += share;
                                    }
                                }
                            }
                        }
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::ConcatChannels(xs) => {
                    let sh = node.value.shape();
                    let (n, ctot, l) = (sh[0], sh[1], sh[2] * sh[3]);
                    let mut off = 0;
                    for &v in xs {
                        let ci = self.value(v).dim(1);
                        if self.ng(v) {
                            let mut gv = vec![0.0; n * ci * l];
                            for img in 0..n {
                                gv[img * ci * l..(img + 1) * ci * l].copy_from_slice(
                                    &gy[(img * ctot + off) * l..(img * ctot + off + ci) * l],
                                );
                            }
                            acc_owned(&mut grads, v, gv);
                        }
                        off += ci;
                    }
                }
                Op::Upsample2x(x) => {
                    let vx = self.value(*x);
                    let (nc, h, w) = (vx.dim(0) * vx.dim(1), vx.dim(2), vx.dim(3));
                    let w2 = 2 * w;
                    let mut gx = vec![0.0; vx.len()];
                    for plane in 0..nc {
                        let src = &gy[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for yy in 0..2 * h {
                            for xx in 0..w2 {
                                dst[(yy / 2) * w + xx / 2] += src[yy * w2 + xx];
                            }
                        }
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::RepeatRows { x, times } => {
                    let vx = self.value(*x);
                    let (b, d) = (vx.dim(0), vx.dim(1));
                    let mut gx = vec![0.0; b * d];
                    for r in 0..b {
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for i in 0..*times {
                            let src = &gy[(r * times + i) * d..(r * times + i + 1) * d];
                            for (a, v) in dst.iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::RowsToMap { x, batch } => {
                    let sh = node.value.shape();
                    let (d, p) = (sh[1], sh[2] * sh[3]);
                    let mut gx = vec![0.0; batch * p * d];
                    for b in 0..*batch {
                        for px in 0..p {
                            for ch in 0..d {
                                gx[(b * p + px) * d + ch] = gy[(b * d + ch) * p + px];
                            }
                        }
                    }
                    acc_owned(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    tokens,
                    weights,
                } => {
                    let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (g, d) = (vq.dim(0), vq.dim(1));
                    let (hn, t) = (*heads, *tokens);
                    let dh = d / hn;
                    let scale = 1.0 / (dh as f32).sqrt();
                    let mut gq = vec![0.0; g * d];
                    let mut gk = vec![0.0; g * t * d];
                    let mut gv = vec![0.0; g * t * d];
                    let mut dw = vec![0.0; t];
                    for gi in 0..g {
                        for h in 0..hn {
                            let w = &weights[(gi * hn + h) * t..(gi * hn + h + 1) * t];
                            let go = &gy[gi * d + h * dh..gi * d + (h + 1) * dh];
                            for ti in 0..t {
                                let base = (gi * t + ti) * d + h * dh;
                                let vh = &vv.data()[base..base + dh];
                                dw[ti] = go.iter().zip(vh).map(|(a, b)| a * b).sum();
                                for (dst, &x) in gv[base..base + dh].iter_mut().zip(go) {
                                    *dst += w[ti] * x;
                                }
                            }
                            let dot: f32 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                            let qh = &vq.data()[gi * d + h * dh..gi * d + (h + 1) * dh];
                            for ti in 0..t {
                                let dl = w[ti] * (dw[ti] - dot) * scale;
                                let base = (gi * t + ti) * d + h * dh;
                                let kh = &vk.data()[base..base + dh];
                                for j in 0..dh {
                                    gq[gi * d + h * dh + j] += dl * kh[j];
                                    gk[base + j] += dl * qh[j];
                                }
                            }
                        }
                    }
                    if self.ng(*q) {
                        acc_owned(&mut grads, *q, gq);
                    }
                    if self.ng(*k) {
                        acc_owned(&mut grads, *k, gk);
                    }
                    if self.ng(*v) {
                        acc_owned(&mut grads, *v, gv);
                    }
                }
                Op::Tokens {
                    opt_feat,
                    opt_time,
                    sar,
                    layout,
                } => {
                    let vf = self.value(*opt_feat);
                    let (c, h, w) = (vf.dim(1), vf.dim(2), vf.dim(3));
                    let p = h * w;
                    let dt = self.value(*opt_time).dim(1);
                    let dtok = c + dt + 2;
                    let t = layout[0].len();
                    let mut g_of = vec![0.0; vf.len()];
                    let mut g_ot = vec![0.0; self.value(*opt_time).len()];
                    let (mut g_sf, mut g_st) = match sar {
                        Some((sf, st)) => (
                            vec![0.0; self.value(*sf).len()],
                            vec![0.0; self.value(*st).len()],
                        ),
                        None => (Vec::new(), Vec::new()),
                    };
                    for (bi, order) in layout.iter().enumerate() {
                        for (ti, src) in order.iter().enumerate() {
                            let (gf, gt, idx) = match *src {
                                TokenSource::Optical(i) => (&mut g_of, &mut g_ot, i),
                                TokenSource::Radar(i) => (&mut g_sf, &mut g_st, i),
                            };
                            for px in 0..p {
                                let row = &gy[((bi * p + px) * t + ti) * dtok..((bi * p + px) * t + ti + 1) * dtok];
                                for ch in 0..c {
                                    gf[(idx * c + ch) * p + px] += row[ch];
                                }
                                for (dst, v) in gt[idx * dt..(idx + 1) * dt].iter_mut().zip(&row[c..c + dt]) {
                                    *dst += v;
                                }
                            }
                        }
                    }
                    if self.ng(*opt_feat) {
                        acc_owned(&mut grads, *opt_feat, g_of);
                    }
                    if self.ng(*opt_time) {
                        acc_owned(&mut grads, *opt_time, g_ot);
                    }
                    if let Some((sf, st)) = sar {
                        if self.ng(*sf) {
                            acc_owned(&mut grads, *sf, g_sf);
                        }
                        if self.ng(*st) {
                            acc_owned(&mut grads, *st, g_st);
                        }
                    }
                }
                Op::LaplaceNll { out, dout } => {
                    let s = gy[0];
                    acc_owned(&mut grads, *out, dout.iter().map(|v| v * s).collect());
                }
                Op::DotConst { x, c } => {
                    let s = gy[0];
                    acc_owned(&mut grads, *x, c.iter().map(|v| v * s).collect());
                }
            }
        }
        out
    }
}

pub const LOG_B_MIN: f32 = -7.0;
pub const LOG_B_MAX: f32 = 2.0;

pub fn clamp_log_b(raw: f32) -> f32 {
    raw.clamp(LOG_B_MIN, LOG_B_MAX)
}

fn acc(grads: &mut [Option<Vec<f32>>], v: Var, g: &[f32]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn acc_owned(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Half-open adaptive pooling bins for `len` cells split into `parts`.
pub(crate) fn bins(len: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts)
        .map(|i| (i * len / parts, ((i + 1) * len).div_ceil(parts)))
        .collect()
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let l = g.ho * g.wo;
    let nl = g.n * l;
    let mut cols = vec![0.0; g.c * g.k * g.k * nl];
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * nl..(row + 1) * nl];
                for img in 0..g.n {
                    let plane = &x[(img * g.c + ch) * g.h * g.w..(img * g.c + ch + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dst[img * l + oy * g.wo + ox] = plane[iy * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let l = g.ho * g.wo;
    let nl = g.n * l;
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for ch in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ch * g.k + ky) * g.k + kx;
                let src = &cols[row * nl..(row + 1) * nl];
                for img in 0..g.n {
                    let plane =
                        &mut x[(img * g.c + ch) * g.h * g.w..(img * g.c + ch + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            plane[iy * g.w + ix as usize] += src[img * l + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
