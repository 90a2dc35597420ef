//! Seeded simulator of co-registered optical and radar patch time series.
//!
//! A scene is a Voronoi partition into fields. Each field follows a
//! double-logistic vegetation curve `v(t)`; stable fields have a tiny
//! amplitude, crop fields a large one. Optical bands are linear in `v` plus
//! a static texture, clouds are blended in as smooth opacity bumps, and
//! radar backscatter is linear in `v` (dB) with Gaussian noise. The clean
//! optical ground truth can be rendered at any date.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container;
use crate::date::CalendarDate;
use crate::error::{Error, Result};
use crate::model::SequenceInput;
use crate::nn::Tensor;
use crate::training::{select_target, truncate_sequence, Selection, SelectionConfig, TargetMode};

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandCover {
    Stable = 0,
    DynamicCrop = 1,
}

impl LandCover {
    pub fn from_code(code: f32) -> Option<Self> {
        match code as i32 {
            0 => Some(LandCover::Stable),
            1 => Some(LandCover::DynamicCrop),
            _ => None,
        }
    }
}

/// Double-logistic curve `b0 + A·(σ(k1(t−t1)) − σ(k2(t−t2)))` over day of year.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phenology {
    pub b0: f64,
    pub amplitude: f64,
    pub t1: f64,
    pub t2: f64,
    pub k1: f64,
    pub k2: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Phenology {
    pub fn value(&self, t: f64) -> f64 {
        let v = self.b0 + self.amplitude * (logistic(self.k1 * (t - self.t1)) - logistic(self.k2 * (t - self.t2)));
        v.clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.b0)
            && self.amplitude >= 0.0
            && self.b0 + self.amplitude <= 1.0
            && self.t1 < self.t2
            && self.k1 > 0.0
            && self.k2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("bad phenology {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub class: LandCover,
    /// Voronoi site in pixel coordinates `(x, y)`.
    pub site: [f64; 2],
    pub phenology: Phenology,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudBlob {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudEvent {
    pub date: CalendarDate,
    pub blobs: Vec<CloudBlob>,
    pub opacity: f64,
    pub brightness: f64,
}

/// Generative parameters of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub fields: Vec<Field>,
    pub cloud_events: Vec<CloudEvent>,
    pub s2_calendar: Vec<CalendarDate>,
    pub s1_calendar: Vec<CalendarDate>,
    pub sar_noise_sigma: f64,
    pub texture_sigma: f64,
    /// Correlation length of the texture in pixels (Gaussian kernel width); 0 gives white noise.
    pub texture_scale: f64,
}

/// Distribution from which scenes are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneDistribution {
    pub patch_size: usize,
    pub year: i32,
    pub n_fields: [usize; 2],
    pub crop_fraction: f64,
    pub cloud_probability: f64,
    pub s2_revisit_days: i64,
    pub s2_dropout: f64,
    pub s1_revisit_days: i64,
    pub s1_offset_days: i64,
    pub sar_noise_sigma: f64,
    pub texture_sigma: f64,
    pub texture_scale: f64,
}

impl Default for SceneDistribution {
    fn default() -> Self {
        Self {
            patch_size: 32,
            year: 2020,
            n_fields: [3, 7],
            crop_fraction: 0.6,
            cloud_probability: 0.3,
            s2_revisit_days: 5,
            s2_dropout: 0.2,
            s1_revisit_days: 6,
            s1_offset_days: 2,
            sar_noise_sigma: 0.75,
            texture_sigma: 0.01,
            texture_scale: 0.0,
        }
    }
}

impl SceneDistribution {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.patch_size == 0 || self.patch_size % 4 != 0 {
            return bad("patch size must be a positive multiple of 4");
        }
        if self.n_fields[0] == 0 || self.n_fields[0] > self.n_fields[1] {
            return bad("field count range must be non-empty and start at 1 or more");
        }
        for p in [self.crop_fraction, self.cloud_probability, self.s2_dropout] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.s2_revisit_days < 1 || self.s1_revisit_days < 1 || self.s1_offset_days < 0 {
            return bad("revisit intervals must be positive");
        }
        if !(self.sar_noise_sigma >= 0.0 && self.texture_sigma >= 0.0 && self.texture_scale >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        CalendarDate::new(self.year, 1)?;
        Ok(())
    }
}

impl SceneSpec {
    /// Draws a scene whose calendars cover the distribution's year.
    pub fn sample(dist: &SceneDistribution, seed: u64) -> Result<Self> {
        dist.validate()?;
        let mut rng = stream(seed, 1);
        let size = dist.patch_size as f64;
        let n_fields = rng.gen_range(dist.n_fields[0]..=dist.n_fields[1]);
        let fields = (0..n_fields)
            .map(|_| {
                let site = [rng.gen_range(0.0..size), rng.gen_range(0.0..size)];
                let b0 = rng.gen_range(0.0..0.2);
                if rng.gen_bool(dist.crop_fraction) {
                    let t1 = rng.gen_range(60.0..160.0);
                    let t2 = rng.gen_range(t1 + 40.0..(t1 + 180.0f64).min(300.0));
                    Field {
                        class: LandCover::DynamicCrop,
                        site,
                        phenology: Phenology {
                            b0,
                            amplitude: rng.gen_range(0.3..0.8),
                            t1,
                            t2,
                            k1: rng.gen_range(0.04..0.15),
                            k2: rng.gen_range(0.04..0.15),
                        },
                    }
                } else {
                    let t1 = rng.gen_range(60.0..160.0);
                    Field {
                        class: LandCover::Stable,
                        site,
                        phenology: Phenology {
                            b0,
                            amplitude: rng.gen_range(0.0..0.05),
                            t1,
                            t2: t1 + rng.gen_range(60.0..140.0),
                            k1: 0.05,
                            k2: 0.05,
                        },
                    }
                }
            })
            .collect();
        let start = CalendarDate::new(dist.year, 1)?;
        let end = CalendarDate::new(dist.year + 1, 1)?;
        let offset = rng.gen_range(0..dist.s2_revisit_days);
        let mut s2_calendar = Vec::new();
        let mut d = start.add_days(offset);
        while d < end {
            if !rng.gen_bool(dist.s2_dropout) {
                s2_calendar.push(d);
            }
            d = d.add_days(dist.s2_revisit_days);
        }
        let mut s1_calendar = Vec::new();
        let mut d = start.add_days(offset + dist.s1_offset_days);
        while d < end {
            s1_calendar.push(d);
            d = d.add_days(dist.s1_revisit_days);
        }
        let mut cloud_events = Vec::new();
        for &date in &s2_calendar {
            if rng.gen_bool(dist.cloud_probability) {
                let n = rng.gen_range(1..=3);
                let blobs = (0..n)
                    .map(|_| CloudBlob {
                        center: [rng.gen_range(-0.2 * size..1.2 * size), rng.gen_range(-0.2 * size..1.2 * size)],
                        radius: rng.gen_range(0.25 * size..0.7 * size),
                    })
                    .collect();
                cloud_events.push(CloudEvent {
                    date,
                    blobs,
                    opacity: rng.gen_range(0.6..=1.0),
                    brightness: rng.gen_range(0.7..=0.95),
                });
            }
        }
        let spec = Self {
            seed,
            height: dist.patch_size,
            width: dist.patch_size,
            fields,
            cloud_events,
            s2_calendar,
            s1_calendar,
            sar_noise_sigma: dist.sar_noise_sigma,
            texture_sigma: dist.texture_sigma,
            texture_scale: dist.texture_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("scene needs pixels and at least one field".into()));
        }
        for f in &self.fields {
            f.phenology.validate()?;
        }
        for cal in [&self.s2_calendar, &self.s1_calendar] {
            if cal.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidSpec("calendars must be strictly increasing".into()));
            }
        }
        for e in &self.cloud_events {
            if !(0.0..=1.0).contains(&e.opacity) || !(0.0..=1.0).contains(&e.brightness) {
                return Err(Error::InvalidSpec("cloud opacity and brightness must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    /// Field index of each pixel (nearest site, ties to the lower index).
    pub fn field_map(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let best = self
                    .fields
                    .iter()
                    .enumerate()
                    .map(|(i, f)| (i, (f.site[0] - px).powi(2) + (f.site[1] - py).powi(2)))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                out.push(best.0);
            }
        }
        out
    }

    /// Land-cover class per pixel.
    pub fn landcover(&self) -> Vec<LandCover> {
        self.field_map().into_iter().map(|i| self.fields[i].class).collect()
    }

    /// Short content hash of the serialised spec.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serialises");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    fn texture(&self) -> Vec<f64> {
        let n = 4 * self.height * self.width;
        if self.texture_sigma == 0.0 {
            return vec![0.0; n];
        }
        let mut rng = stream(self.seed, 2);
        let white: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let (h, w) = (self.height, self.width);
        let smooth = if self.texture_scale > 0.0 {
            let k = gaussian_kernel(self.texture_scale, h.min(w));
            // Separable blur with wrap-around, then rescale to unit variance.
            let gain = k.iter().map(|v| v * v).sum::<f64>();
            let r = (k.len() / 2) as isize;
            let mut out = vec![0.0; n];
            for band in 0..4 {
                let src = &white[band * h * w..(band + 1) * h * w];
                let mut rows = vec![0.0; h * w];
                for y in 0..h {
                    for x in 0..w {
                        rows[y * w + x] = k
                            .iter()
                            .enumerate()
                            .map(|(i, kv)| kv * src[y * w + (x as isize + i as isize - r).rem_euclid(w as isize) as usize])
                            .sum();
                    }
                }
                for y in 0..h {
                    for x in 0..w {
                        out[band * h * w + y * w + x] = k
                            .iter()
                            .enumerate()
                            .map(|(i, kv)| kv * rows[(y as isize + i as isize - r).rem_euclid(h as isize) as usize * w + x])
                            .sum::<f64>()
                            / gain;
                    }
                }
            }
            out
        } else {
            white
        };
        smooth.into_iter().map(|v| v * self.texture_sigma).collect()
    }
}

/// Normalised 1-D Gaussian of width `scale`, truncated at 3 widths and at
/// most `len` taps.
fn gaussian_kernel(scale: f64, len: usize) -> Vec<f64> {
    let r = ((3.0 * scale).ceil() as usize).min((len.max(1) - 1) / 2);
    let k: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-0.5 * d * d / (scale * scale)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Vegetation signal of `field` at date `t` (day of year as the time axis).
pub fn vegetation_signal(spec: &SceneSpec, field: usize, t: CalendarDate) -> Result<f64> {
    let f = spec.fields.get(field).ok_or(Error::FieldOutOfRange {
        index: field,
        n_fields: spec.fields.len(),
    })?;
    Ok(f.phenology.value(t.day_of_year() as f64))
}

/// Reflectances `[R, G, B, NIR]` for vegetation `v`, before texture.
pub fn band_model(v: f64) -> [f64; 4] {
    [0.30 - 0.22 * v, 0.08 + 0.04 * v, 0.06 + 0.01 * v, 0.15 + 0.45 * v]
}

/// `(NIR − Red) / (NIR + Red + 1e-8)`.
pub fn ndvi(nir: f64, red: f64) -> f64 {
    (nir - red) / (nir + red + 1e-8)
}

/// Per-pixel vegetation signal at `t`.
pub fn vegetation_map(spec: &SceneSpec, t: CalendarDate) -> Vec<f64> {
    let doy = t.day_of_year() as f64;
    let per_field: Vec<f64> = spec.fields.iter().map(|f| f.phenology.value(doy)).collect();
    spec.field_map().into_iter().map(|i| per_field[i]).collect()
}

/// Cloud-free optical patch `[4, H, W]` at any date.
pub fn render_optical(spec: &SceneSpec, t: CalendarDate) -> Tensor {
    let l = spec.height * spec.width;
    let v = vegetation_map(spec, t);
    let tex = spec.texture();
    let mut out = vec![0.0f32; 4 * l];
    for (px, &vp) in v.iter().enumerate() {
        let b = band_model(vp);
        for c in 0..4 {
            out[c * l + px] = (b[c] + tex[c * l + px]).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new(vec![4, spec.height, spec.width], out)
}

/// Cloud opacity per pixel at `t`, or `None` on a clear date.
pub fn cloud_alpha(spec: &SceneSpec, t: CalendarDate) -> Option<(Vec<f64>, f64)> {
    let ev = spec.cloud_events.iter().find(|e| e.date == t)?;
    let mut alpha = vec![0.0; spec.height * spec.width];
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut a = 0.0;
            for b in &ev.blobs {
                let r2 = ((px - b.center[0]).powi(2) + (py - b.center[1]).powi(2)) / (b.radius * b.radius);
                if r2 < 1.0 {
                    a += ev.opacity * (1.0 - r2).powi(2);
                }
            }
            alpha[y * spec.width + x] = a.clamp(0.0, 1.0);
        }
    }
    Some((alpha, ev.brightness))
}

/// Threshold on opacity above which a pixel counts as cloudy.
pub const CLOUD_THRESHOLD: f64 = 0.3;

/// Blends clouds into a clean patch; returns the observation and cloud mask.
pub fn apply_clouds(clean: &Tensor, spec: &SceneSpec, t: CalendarDate) -> (Tensor, Vec<bool>) {
    let l = spec.height * spec.width;
    let Some((alpha, brightness)) = cloud_alpha(spec, t) else {
        return (clean.clone(), vec![false; l]);
    };
    let mut out = clean.clone();
    for c in 0..4 {
        for px in 0..l {
            let v = &mut out.data_mut()[c * l + px];
            *v = ((1.0 - alpha[px]) * *v as f64 + alpha[px] * brightness).clamp(0.0, 1.0) as f32;
        }
    }
    (out, alpha.iter().map(|&a| a > CLOUD_THRESHOLD).collect())
}

/// Backscatter in dB `[VV, VH]` before standardisation.
pub fn render_sar_raw(spec: &SceneSpec, t: CalendarDate) -> Tensor {
    let l = spec.height * spec.width;
    let v = vegetation_map(spec, t);
    let mut rng = stream(spec.seed ^ 0x5A5A_0000, t.ordinal_days() as u64);
    let noise = Normal::new(0.0, spec.sar_noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut out = vec![0.0f32; 2 * l];
    for (px, &vp) in v.iter().enumerate() {
        let (mut vv, mut vh) = (-14.0 + 4.0 * vp, -22.0 + 8.0 * vp);
        if spec.sar_noise_sigma > 0.0 {
            vv += noise.sample(&mut rng);
            vh += noise.sample(&mut rng);
        }
        out[px] = vv as f32;
        out[l + px] = vh as f32;
    }
    Tensor::new(vec![2, spec.height, spec.width], out)
}

/// Per-polarisation standardisation statistics, `[VV, VH]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SarStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for SarStats {
    fn default() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }
}

impl SarStats {
    /// Applies to a stack `[..., 2, H, W]` in place.
    pub fn standardize(&self, t: &mut Tensor) {
        self.transform(t, |v, m, s| (v - m) / s);
    }

    pub fn destandardize(&self, t: &mut Tensor) {
        self.transform(t, |v, m, s| v * s + m);
    }

    fn transform(&self, t: &mut Tensor, f: impl Fn(f64, f64, f64) -> f64) {
        let nd = t.ndim();
        let l = t.dim(nd - 1) * t.dim(nd - 2);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let c = (i / l) % 2;
            *v = f(*v as f64, self.mean[c], self.std[c]) as f32;
        }
    }
}

/// Running first and second moments per polarisation.
#[derive(Clone, Debug, Default)]
pub struct SarAccumulator {
    sum: [f64; 2],
    sum_sq: [f64; 2],
    count: [u64; 2],
}

impl SarAccumulator {
    pub fn add(&mut self, t: &Tensor) {
        let nd = t.ndim();
        let l = t.dim(nd - 1) * t.dim(nd - 2);
        for (i, &v) in t.data().iter().enumerate() {
            let c = (i / l) % 2;
            self.sum[c] += v as f64;
            self.sum_sq[c] += (v as f64).powi(2);
            self.count[c] += 1;
        }
    }

    pub fn finish(&self) -> SarStats {
        let mut s = SarStats::default();
        for c in 0..2 {
            if self.count[c] > 0 {
                let n = self.count[c] as f64;
                let m = self.sum[c] / n;
                let var = (self.sum_sq[c] / n - m * m).max(0.0);
                s.mean[c] = m;
                s.std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
            }
        }
        s
    }
}

/// Standardised radar patch at a calendar date.
pub fn render_sar(spec: &SceneSpec, t: CalendarDate, stats: &SarStats) -> Tensor {
    let mut raw = render_sar_raw(spec, t);
    stats.standardize(&mut raw);
    raw
}

/// One training or evaluation unit.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub input: SequenceInput,
    pub target_date: CalendarDate,
    /// Clean ground truth `[4, H, W]`.
    pub target: Tensor,
    /// Cloud mask per optical input, `[T_opt, H, W]` flattened.
    pub cloud_mask: Vec<bool>,
    pub landcover: Vec<LandCover>,
}

impl MultimodalSample {
    pub fn height(&self) -> usize {
        self.target.dim(1)
    }

    pub fn width(&self) -> usize {
        self.target.dim(2)
    }

    /// Cloud mask of optical input `i`.
    pub fn cloud_mask_of(&self, i: usize) -> &[bool] {
        let l = self.height() * self.width();
        &self.cloud_mask[i * l..(i + 1) * l]
    }

    /// Fraction of cloudy pixels per optical input.
    pub fn cloud_fractions(&self) -> Vec<f64> {
        (0..self.input.n_optical())
            .map(|i| {
                let m = self.cloud_mask_of(i);
                m.iter().filter(|&&c| c).count() as f64 / m.len() as f64
            })
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.input.validate()?;
        let n = self.input.len();
        if !(2..=8).contains(&n) {
            return Err(Error::Shape(format!("{n} acquisitions outside [2, 8]")));
        }
        if self.input.optical_dates.contains(&self.target_date) {
            return Err(Error::Shape("target date among optical inputs".into()));
        }
        if self.input.optical.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape("optical value outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Renders the acquisitions chosen by a selection.
pub fn materialize(spec: &SceneSpec, sel: &Selection, stats: Option<&SarStats>) -> MultimodalSample {
    let (h, w) = (spec.height, spec.width);
    let mut optical = Vec::new();
    let mut cloud_mask = Vec::new();
    for &d in &sel.optical {
        let (obs, mask) = apply_clouds(&render_optical(spec, d), spec, d);
        optical.extend_from_slice(obs.data());
        cloud_mask.extend(mask);
    }
    let mut radar = Vec::new();
    for &d in &sel.radar {
        let mut r = render_sar_raw(spec, d);
        if let Some(s) = stats {
            s.standardize(&mut r);
        }
        radar.extend_from_slice(r.data());
    }
    MultimodalSample {
        input: SequenceInput {
            optical: Tensor::new(vec![sel.optical.len(), 4, h, w], optical),
            optical_dates: sel.optical.clone(),
            radar: Tensor::new(vec![sel.radar.len(), 2, h, w], radar),
            radar_dates: sel.radar.clone(),
        },
        target_date: sel.target,
        target: render_optical(spec, sel.target),
        cloud_mask,
        landcover: spec.landcover(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Dataset generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_samples: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Length of the candidate window each sample is drawn from.
    pub window_days: i64,
    #[serde(flatten)]
    pub scene: SceneDistribution,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 2400,
            val_fraction: 1.0 / 12.0,
            test_fraction: 1.0 / 12.0,
            window_days: 100,
            scene: SceneDistribution::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        let f = self.val_fraction + self.test_fraction;
        if !(self.val_fraction >= 0.0 && self.test_fraction >= 0.0 && f <= 1.0) {
            return Err(Error::InvalidConfig("split fractions must be non-negative and sum to at most 1".into()));
        }
        if !(20..=365).contains(&self.window_days) {
            return Err(Error::InvalidConfig("window_days must lie in [20, 365]".into()));
        }
        Ok(())
    }

    /// Split of sample `index`: validation first, then test, then training.
    pub fn split_of(&self, index: usize) -> Split {
        let n_val = (self.n_samples as f64 * self.val_fraction).round() as usize;
        let n_test = (self.n_samples as f64 * self.test_fraction).round() as usize;
        if index < n_val {
            Split::Val
        } else if index < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        }
    }
}

/// Per-sample metadata stored as `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    pub scene_seed: u64,
    pub spec_hash: String,
    pub window_start: CalendarDate,
    pub window_end: CalendarDate,
    pub mode: TargetMode,
    pub min_gap_days: i64,
    pub target_date: CalendarDate,
    pub optical_dates: Vec<CalendarDate>,
    pub radar_dates: Vec<CalendarDate>,
}

/// Acquisitions of a scene that fall in `[start, end]`.
pub fn window_calendars(spec: &SceneSpec, start: CalendarDate, end: CalendarDate) -> (Vec<CalendarDate>, Vec<CalendarDate>) {
    let inside = |c: &[CalendarDate]| c.iter().copied().filter(|d| *d >= start && *d <= end).collect();
    (inside(&spec.s2_calendar), inside(&spec.s1_calendar))
}

/// A scene plus the candidate window of one dataset sample.
#[derive(Clone, Debug)]
pub struct SceneDraw {
    pub seed: u64,
    pub spec: SceneSpec,
    pub window_start: CalendarDate,
    pub window_end: CalendarDate,
}

impl SceneDraw {
    pub fn calendars(&self) -> (Vec<CalendarDate>, Vec<CalendarDate>) {
        window_calendars(&self.spec, self.window_start, self.window_end)
    }
}

/// Scene and window of sample `index`; the RNG continues to drive selection.
pub fn draw_scene(cfg: &DataConfig, master_seed: u64, index: usize) -> Result<(SceneDraw, ChaCha8Rng)> {
    let seed = mix_seed(master_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_seed = rng.next_u64();
    let spec = SceneSpec::sample(&cfg.scene, scene_seed)?;
    let year_start = CalendarDate::new(cfg.scene.year, 1)?;
    let year_len = CalendarDate::new(cfg.scene.year + 1, 1)?.days_since(year_start);
    let offset = rng.gen_range(0..=(year_len - cfg.window_days).max(0));
    let window_start = year_start.add_days(offset);
    let window_end = window_start.add_days(cfg.window_days - 1);
    Ok((
        SceneDraw {
            seed,
            spec,
            window_start,
            window_end,
        },
        rng,
    ))
}

/// Generates sample `index`. Radar is left in dB when `stats` is `None`.
pub fn generate_sample(
    cfg: &DataConfig,
    selection: &SelectionConfig,
    master_seed: u64,
    index: usize,
    stats: Option<&SarStats>,
) -> Result<(MultimodalSample, SampleMeta)> {
    let (draw, mut rng) = draw_scene(cfg, master_seed, index)?;
    let (opt, sar) = draw.calendars();
    let mut attempt = 0;
    let sel = loop {
        match select_target(&opt, &sar, &mut rng, selection) {
            Ok(s) => break truncate_sequence(s, &mut rng, selection),
            Err(Error::SkipSample(_)) if attempt < 64 => attempt += 1,
            Err(e) => return Err(e),
        }
    };
    let sample = materialize(&draw.spec, &sel, stats);
    let meta = SampleMeta {
        index,
        split: cfg.split_of(index),
        seed: draw.seed,
        scene_seed: draw.spec.seed,
        spec_hash: draw.spec.hash(),
        window_start: draw.window_start,
        window_end: draw.window_end,
        mode: sel.mode,
        min_gap_days: sel.min_gap_days,
        target_date: sel.target,
        optical_dates: sel.optical.clone(),
        radar_dates: sel.radar.clone(),
    };
    Ok((sample, meta))
}

pub const MANIFEST: &str = "manifest.json";

/// Dataset-level manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub n_samples: usize,
    pub config: DataConfig,
    pub selection: SelectionConfig,
    pub sar_stats: SarStats,
    pub splits: BTreeMap<Split, Vec<String>>,
}

fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `n_samples` samples under `out_dir/{train,val,test}/NNNNNN/`.
///
/// Radar statistics come from a first pass over every emitted radar patch.
pub fn make_dataset(cfg: &DataConfig, selection: &SelectionConfig, master_seed: u64, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    selection.validate()?;
    let mut acc = SarAccumulator::default();
    for i in 0..cfg.n_samples {
        acc.add(&generate_sample(cfg, selection, master_seed, i, None)?.0.input.radar);
    }
    let stats = acc.finish();
    let mut splits: BTreeMap<Split, Vec<String>> = Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut seen = BTreeMap::new();
    for i in 0..cfg.n_samples {
        let (sample, meta) = generate_sample(cfg, selection, master_seed, i, Some(&stats))?;
        if let Some(other) = seen.insert(meta.scene_seed, meta.split) {
            if other != meta.split {
                return Err(Error::InvalidSpec("scene seed shared across splits".into()));
            }
        }
        let dir = out_dir.join(meta.split.name()).join(sample_id(i));
        write_sample(&dir, &sample, &meta)?;
        splits.get_mut(&meta.split).unwrap().push(sample_id(i));
    }
    let manifest = Manifest {
        format_version: 1,
        master_seed,
        n_samples: cfg.n_samples,
        config: cfg.clone(),
        selection: selection.clone(),
        sar_stats: stats,
        splits,
    };
    write_json(&out_dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn write_sample(dir: &Path, s: &MultimodalSample, meta: &SampleMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (s.height(), s.width());
    let mask = Tensor::new(
        vec![s.input.n_optical(), h, w],
        s.cloud_mask.iter().map(|&c| c as u8 as f32).collect(),
    );
    let lc = Tensor::new(vec![h, w], s.landcover.iter().map(|&c| c as u8 as f32).collect());
    container::write(&dir.join("optical.mdar"), &s.input.optical)?;
    container::write(&dir.join("radar.mdar"), &s.input.radar)?;
    container::write(&dir.join("target.mdar"), &s.target.clone().reshape(vec![4, h, w]))?;
    container::write(&dir.join("cloudmask.mdar"), &mask)?;
    container::write(&dir.join("landcover.mdar"), &lc)?;
    write_json(&dir.join("meta.json"), meta)
}

pub fn read_sample(dir: &Path) -> Result<(MultimodalSample, SampleMeta)> {
    let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
    let optical = container::read(&dir.join("optical.mdar"))?;
    let radar = container::read(&dir.join("radar.mdar"))?;
    let target = container::read(&dir.join("target.mdar"))?;
    let mask = container::read(&dir.join("cloudmask.mdar"))?;
    let lc_path = dir.join("landcover.mdar");
    let lc = container::read(&lc_path)?;
    let landcover = lc
        .data()
        .iter()
        .map(|&c| {
            LandCover::from_code(c).ok_or_else(|| Error::Container {
                path: lc_path.clone(),
                reason: format!("unknown land-cover code {c}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sample = MultimodalSample {
        input: SequenceInput {
            optical,
            optical_dates: meta.optical_dates.clone(),
            radar,
            radar_dates: meta.radar_dates.clone(),
        },
        target_date: meta.target_date,
        target,
        cloud_mask: mask.data().iter().map(|&v| v > 0.5).collect(),
        landcover,
    };
    sample.input.validate()?;
    Ok((sample, meta))
}

/// Handle to a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = read_json(&root.join(MANIFEST))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn sample_dirs(&self, split: Split) -> Vec<PathBuf> {
        self.manifest.splits.get(&split).map_or_else(Vec::new, |ids| {
            ids.iter().map(|id| self.root.join(split.name()).join(id)).collect()
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<(MultimodalSample, SampleMeta)>> {
        self.sample_dirs(split).iter().map(|d| read_sample(d)).collect()
    }

    /// Regenerates the scene behind a stored sample and checks its hash.
    pub fn scene_of(&self, meta: &SampleMeta) -> Result<SceneSpec> {
        let spec = SceneSpec::sample(&self.manifest.config.scene, meta.scene_seed)?;
        if spec.hash() != meta.spec_hash {
            return Err(Error::InvalidSpec(format!("scene {} does not regenerate", meta.index)));
        }
        Ok(spec)
    }
}
