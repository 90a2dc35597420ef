//! Probabilistic decoder and Laplace likelihood utilities.
//!
//! The decoder turns the fused half-resolution latent into per-pixel,
//! per-band Laplace parameters: a location `μ` and a log-scale `log b`
//! clamped to `[LOG_B_MIN, LOG_B_MAX]`. The per-element negative
//! log-likelihood is `|y − μ| / b + ln(2b)`; the central interval holding
//! probability `p` has half-width `−b · ln(1 − p)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{clamp_log_b, Graph, ParamId, ParamStore, Tensor, Var};

pub use crate::nn::{LOG_B_MAX, LOG_B_MIN};

/// Number of optical bands predicted.
pub const BANDS: usize = 4;

/// Per-pixel Laplace parameters `[B, 4, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacePrediction {
    pub mu: Tensor,
    pub log_b: Tensor,
}

impl LaplacePrediction {
    /// Splits a raw decoder output `[B, 8, H, W]`, clamping the log-scales.
    pub fn from_raw(raw: &Tensor) -> Self {
        let (b, h, w) = (raw.dim(0), raw.dim(2), raw.dim(3));
        let l = h * w;
        let mut mu = Vec::with_capacity(b * BANDS * l);
        let mut log_b = Vec::with_capacity(b * BANDS * l);
        for bi in 0..b {
            let s = raw.outer(bi);
            mu.extend_from_slice(&s[..BANDS * l]);
            log_b.extend(s[BANDS * l..].iter().map(|&v| clamp_log_b(v)));
        }
        Self {
            mu: Tensor::new(vec![b, BANDS, h, w], mu),
            log_b: Tensor::new(vec![b, BANDS, h, w], log_b),
        }
    }

    pub fn batch(&self) -> usize {
        self.mu.dim(0)
    }

    /// Location clipped to the reflectance range, for reporting.
    pub fn mu_clipped(&self) -> Tensor {
        self.mu.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn scale(&self) -> Tensor {
        self.log_b.map(f32::exp)
    }

    /// Element `bi` of the batch as a one-element prediction.
    pub fn item(&self, bi: usize) -> LaplacePrediction {
        LaplacePrediction {
            mu: self.mu.select_outer(&[bi]),
            log_b: self.log_b.select_outer(&[bi]),
        }
    }
}

/// Loss and partial derivatives of one likelihood element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllTerm {
    pub loss: f32,
    pub d_mu: f32,
    pub d_log_b: f32,
}

/// `|y − μ| e^{−s} + s + ln 2` with `s = log b`, and its gradient.
pub fn nll_term(y: f32, mu: f32, log_b: f32) -> NllTerm {
    let r = y - mu;
    let inv_b = (-log_b).exp();
    let a = r.abs() * inv_b;
    NllTerm {
        loss: a + log_b + std::f32::consts::LN_2,
        d_mu: -r.signum() * inv_b * (r != 0.0) as u8 as f32,
        d_log_b: 1.0 - a,
    }
}

/// Double-precision twin of [`nll_term`], used where accuracy matters more than speed.
pub fn nll_term_f64(y: f64, mu: f64, log_b: f64) -> (f64, f64, f64) {
    let r = y - mu;
    let inv_b = (-log_b).exp();
    let a = r.abs() * inv_b;
    let d_mu = if r == 0.0 { 0.0 } else { -r.signum() * inv_b };
    (a + log_b + std::f64::consts::LN_2, d_mu, 1.0 - a)
}

/// Mean negative log-likelihood over valid pixels and all bands.
///
/// `y [B, 4, H, W]`; `valid_mask [B, H, W]`.
pub fn nll_laplace(y: &Tensor, pred: &LaplacePrediction, valid_mask: &[bool]) -> Result<f64> {
    if y.shape() != pred.mu.shape() || pred.mu.shape() != pred.log_b.shape() {
        return Err(Error::Shape(format!(
            "target {:?} vs prediction {:?}",
            y.shape(),
            pred.mu.shape()
        )));
    }
    let (b, c, l) = (y.dim(0), y.dim(1), y.dim(2) * y.dim(3));
    if valid_mask.len() != b * l {
        return Err(Error::Shape(format!("mask has {} entries, expected {}", valid_mask.len(), b * l)));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for bi in 0..b {
        for ch in 0..c {
            for px in 0..l {
                if !valid_mask[bi * l + px] {
                    continue;
                }
                let i = (bi * c + ch) * l + px;
                total += nll_term_f64(y.data()[i] as f64, pred.mu.data()[i] as f64, pred.log_b.data()[i] as f64).0;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoValidElements);
    }
    Ok(total / count as f64)
}

/// Half-width `−b · ln(1 − p)` of the central Laplace interval of mass `p`.
pub fn halfwidth(scale: f64, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidLevel(p));
    }
    Ok(-scale * (-p).ln_1p())
}

/// Per-element interval half-widths at nominal level `p`.
pub fn interval_halfwidth(pred: &LaplacePrediction, p: f64) -> Result<Tensor> {
    halfwidth(1.0, p)?;
    let k = -(-p).ln_1p();
    Ok(pred.log_b.map(|lb| (lb as f64).exp() as f32 * k as f32))
}

/// Decoder: conv block at half resolution, ×2 nearest upsampling, then two
/// convolutions down to `2 · BANDS` output channels.
#[derive(Clone, Debug)]
pub struct LaplaceHead {
    conv_in: (ParamId, ParamId),
    conv_mid: (ParamId, ParamId),
    conv_out: (ParamId, ParamId),
    d_in: usize,
}

impl LaplaceHead {
    pub fn new<R: Rng>(store: &mut ParamStore, d_in: usize, d_dec: usize, rng: &mut R) -> Self {
        let conv_in = (
            store.add_he("head.conv_in.w", &[d_dec, d_in, 3, 3], d_in * 9, rng),
            store.add_const("head.conv_in.b", &[d_dec], 0.0),
        );
        let conv_mid = (
            store.add_he("head.conv_mid.w", &[d_dec, d_dec, 3, 3], d_dec * 9, rng),
            store.add_const("head.conv_mid.b", &[d_dec], 0.0),
        );
        let out_w = store.add_normal("head.conv_out.w", &[2 * BANDS, d_dec, 1, 1], 0.1 / (d_dec as f32).sqrt(), rng);
        // Start near a mid reflectance with a moderate scale.
        let mut bias = vec![0.2; BANDS];
        bias.extend([-2.5; BANDS]);
        let out_b = store.add("head.conv_out.b", Tensor::new(vec![2 * BANDS], bias));
        Self {
            conv_in,
            conv_mid,
            conv_out: (out_w, out_b),
            d_in,
        }
    }

    pub fn params(&self) -> [ParamId; 6] {
        [
            self.conv_in.0,
            self.conv_in.1,
            self.conv_mid.0,
            self.conv_mid.1,
            self.conv_out.0,
            self.conv_out.1,
        ]
    }

    /// Maps the latent map `[B, D, h, w]` to raw output `[B, 8, 2h, 2w]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, latent_map: Var) -> Var {
        let (w, b) = (store.bind(g, self.conv_in.0), store.bind(g, self.conv_in.1));
        let x = g.conv2d(latent_map, w, b, 1, 1);
        let x = g.relu(x);
        let x = g.upsample2x(x);
        let (w, b) = (store.bind(g, self.conv_mid.0), store.bind(g, self.conv_mid.1));
        let x = g.conv2d(x, w, b, 1, 1);
        let x = g.relu(x);
        let (w, b) = (store.bind(g, self.conv_out.0), store.bind(g, self.conv_out.1));
        g.conv2d(x, w, b, 1, 0)
    }
}

/// Decodes a latent `[B, P, D]` with `P = (H/2)·(W/2)` into a prediction.
pub fn decode(latent: &Tensor, height: usize, width: usize, head: &LaplaceHead, store: &ParamStore) -> Result<LaplacePrediction> {
    let (h2, w2) = (height / 2, width / 2);
    if latent.ndim() != 3 || latent.dim(1) != h2 * w2 || latent.dim(2) != head.d_in || height % 2 != 0 || width % 2 != 0 {
        return Err(Error::Shape(format!(
            "latent {:?} incompatible with {height}x{width} output and width {}",
            latent.shape(),
            head.d_in
        )));
    }
    let b = latent.dim(0);
    let mut g = Graph::inference();
    let rows = g.input(latent.clone().reshape(vec![b * h2 * w2, head.d_in]));
    let map = g.rows_to_map(rows, b, h2, w2);
    let raw = head.forward(&mut g, store, map);
    Ok(LaplacePrediction::from_raw(g.value(raw)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nll_reference_values() {
        let t = nll_term(0.3, 0.3, 0.5f32.ln());
        assert!(t.loss.abs() < 1e-6);
        let t = nll_term(0.3, 0.3, 0.0);
        assert!((t.loss - 0.693147).abs() < 1e-6);
        let (l, _, _) = nll_term_f64(0.4, 0.3, 0.05f64.ln());
        assert!((l - (-0.302585)).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-4;
        let mut checked = 0;
        while checked < 200 {
            let y = rng.gen_range(0.0..1.0);
            let mu = rng.gen_range(0.0..1.0);
            let s = rng.gen_range(-5.0..1.0);
            if (y - mu as f64).abs() <= 1e-2 {
                continue;
            }
            let (_, d_mu, d_s) = nll_term_f64(y, mu, s);
            let f = |m: f64, s: f64| nll_term_f64(y, m, s).0;
            let fd_mu = (f(mu + h, s) - f(mu - h, s)) / (2.0 * h);
            let fd_s = (f(mu, s + h) - f(mu, s - h)) / (2.0 * h);
            for (a, n) in [(d_mu, fd_mu), (d_s, fd_s)] {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel < 1e-3, "y={y} mu={mu} s={s}: {a} vs {n}");
            }
            let t = nll_term(y as f32, mu as f32, s as f32);
            assert!((t.d_mu as f64 - d_mu).abs() <= 1e-3 * d_mu.abs());
            checked += 1;
        }
    }

    #[test]
    fn nll_mean_and_empty_mask() {
        let y = Tensor::full(&[1, 4, 2, 2], 0.5);
        let pred = LaplacePrediction {
            mu: Tensor::full(&[1, 4, 2, 2], 0.5),
            log_b: Tensor::zeros(&[1, 4, 2, 2]),
        };
        let l = nll_laplace(&y, &pred, &[true, false, true, true]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(matches!(nll_laplace(&y, &pred, &[false; 4]), Err(Error::NoValidElements)));
    }

    #[test]
    fn nll_minimised_at_scale_equal_to_residual() {
        for &r in &[0.02f64, 0.1, 0.37] {
            let (best, _) = (1..2000)
                .map(|i| {
                    let b = i as f64 * 5e-4;
                    (b, nll_term_f64(r, 0.0, b.ln()).0)
                })
                .fold((0.0, f64::INFINITY), |acc, (b, l)| if l < acc.1 { (b, l) } else { acc });
            assert!((best - r).abs() <= 5e-4, "r={r} best={best}");
        }
    }

    #[test]
    fn halfwidth_reference_values() {
        assert!((halfwidth(0.1, 0.5).unwrap() - 0.069315).abs() < 1e-6);
        assert!((halfwidth(1.0, 1.0 - (-1.0f64).exp()).unwrap() - 1.0).abs() < 1e-12);
        assert!(halfwidth(1.0, 1e-12).unwrap() < 1e-11);
        assert!(halfwidth(1.0, 0.0).is_err());
        assert!(halfwidth(1.0, 1.0).is_err());
    }

    #[test]
    fn halfwidth_strictly_increasing() {
        let mut prev = 0.0;
        for i in 1..100 {
            let w = halfwidth(0.3, i as f64 / 100.0).unwrap();
            assert!(w > prev);
            prev = w;
        }
    }

    #[test]
    fn interval_halfwidth_tensor() {
        let pred = LaplacePrediction {
            mu: Tensor::zeros(&[1, 4, 1, 1]),
            log_b: Tensor::full(&[1, 4, 1, 1], 0.1f32.ln()),
        };
        let w = interval_halfwidth(&pred, 0.5).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.069315).abs() < 1e-6));
        assert!(interval_halfwidth(&pred, 1.5).is_err());
    }

    #[test]
    fn from_raw_clamps_log_scale() {
        let mut raw = Tensor::zeros(&[1, 8, 1, 1]);
        raw.data_mut()[4] = -20.0;
        raw.data_mut()[5] = 9.0;
        let p = LaplacePrediction::from_raw(&raw);
        assert_eq!(p.log_b.data(), &[-7.0, 2.0, 0.0, 0.0]);
    }

    fn head(seed: u64, d_in: usize) -> (ParamStore, LaplaceHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = LaplaceHead::new(&mut store, d_in, 6, &mut rng);
        (store, h)
    }

    #[test]
    fn zero_parameters_decode_to_zero() {
        let (mut store, h) = head(0, 5);
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let p = decode(&Tensor::zeros(&[1, 16, 5]), 8, 8, &h, &store).unwrap();
        assert!(p.mu.data().iter().all(|&v| v == 0.0));
        assert!(p.log_b.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_shape_contract() {
        let (store, h) = head(0, 10);
        let p = decode(&Tensor::full(&[1, 256, 10], 0.1), 32, 32, &h, &store).unwrap();
        assert_eq!(p.mu.shape(), &[1, 4, 32, 32]);
        assert_eq!(p.log_b.shape(), &[1, 4, 32, 32]);
        assert!(decode(&Tensor::zeros(&[1, 255, 10]), 32, 32, &h, &store).is_err());
    }

    /// Scripted convolution pipeline in f64 as an independent forward oracle.
    #[test]
    fn decode_matches_scripted_forward() {
        let (store, h) = head(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (hh, ww, d) = (2usize, 2usize, 3usize);
        let latent: Vec<f32> = (0..hh * ww * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = decode(&Tensor::new(vec![1, hh * ww, d], latent.clone()), 4, 4, &h, &store).unwrap();

        let p = |i: usize| store.get(h.params()[i]).data().to_vec();
        let conv = |x: &[f64], c: usize, hgt: usize, wid: usize, w: &[f32], b: &[f32], o: usize, k: usize| {
            let pad = (k / 2) as isize;
            let mut out = vec![0.0f64; o * hgt * wid];
            for oc in 0..o {
                for y in 0..hgt {
                    for xx in 0..wid {
                        let mut s = b[oc] as f64;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad;
                                    let ix = xx as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= hgt as isize || ix >= wid as isize {
                                        continue;
                                    }
                                    s += w[((oc * c + ic) * k + ky) * k + kx] as f64
                                        * x[(ic * hgt + iy as usize) * wid + ix as usize];
                                }
                            }
                        }
                        out[(oc * hgt + y) * wid + xx] = s;
                    }
                }
            }
            out
        };
        let mut map = vec![0.0f64; d * hh * ww];
        for px in 0..hh * ww {
            for ch in 0..d {
                map[ch * hh * ww + px] = latent[px * d + ch] as f64;
            }
        }
        let x = conv(&map, d, hh, ww, &p(0), &p(1), 6, 3);
        let x: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        let mut up = vec![0.0f64; 6 * 16];
        for ch in 0..6 {
            for y in 0..4 {
                for xx in 0..4 {
                    up[(ch * 4 + y) * 4 + xx] = x[(ch * 2 + y / 2) * 2 + xx / 2];
                }
            }
        }
        let x = conv(&up, 6, 4, 4, &p(2), &p(3), 6, 3);
        let x: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
        let out = conv(&x, 6, 4, 4, &p(4), &p(5), 8, 1);
        for i in 0..64 {
            assert!((got.mu.data()[i] as f64 - out[i]).abs() < 1e-5);
            let lb = out[64 + i].clamp(-7.0, 2.0);
            assert!((got.log_b.data()[i] as f64 - lb).abs() < 1e-5);
        }
    }
}
