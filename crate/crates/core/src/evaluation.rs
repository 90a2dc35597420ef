//! Error metrics, the linear-interpolation baseline, interval calibration,
//! dense reconstruction over a date grid and attention export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use crate::container;
use crate::date::CalendarDate;
use crate::error::{Error, Result};
use crate::laplace_head::{halfwidth, LaplacePrediction};
use crate::model::{Generator, SequenceInput, MAX_SEQ_LEN};
use crate::nn::Tensor;
use crate::spatial_encoder::Modality;
use crate::synthscene::{band_model, materialize, ndvi, render_optical, vegetation_map, LandCover, MultimodalSample, SampleMeta, SarStats, SceneSpec};
use crate::temporal_fusion::{token_modalities, AttentionRecord};
use crate::training::{Selection, TargetMode};

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn psnr(mse: f64) -> f64 {
    if mse > 0.0 {
        -10.0 * mse.log10()
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    All,
    Stable,
    DynamicCrop,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::All, Stratum::Stable, Stratum::DynamicCrop];

    fn contains(self, lc: LandCover) -> bool {
        match self {
            Stratum::All => true,
            Stratum::Stable => lc == LandCover::Stable,
            Stratum::DynamicCrop => lc == LandCover::DynamicCrop,
        }
    }
}

/// Errors of one band (or all bands pooled) plus the fit `pred ≈ a + b·truth`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandMetrics {
    pub mae: f64,
    pub rmse: f64,
    #[serde(serialize_with = "ser_psnr")]
    pub psnr: f64,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StratumMetrics {
    pub pixels: u64,
    pub overall: BandMetrics,
    pub bands: Vec<BandMetrics>,
}

/// Metrics per stratum; a stratum without pixels is `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub strata: BTreeMap<Stratum, Option<StratumMetrics>>,
}

impl MetricReport {
    pub fn get(&self, s: Stratum) -> Option<&StratumMetrics> {
        self.strata.get(&s).and_then(Option::as_ref)
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    n: u64,
    abs: f64,
    sq: f64,
    x: f64,
    y: f64,
    xx: f64,
    yy: f64,
    xy: f64,
}

impl Moments {
    fn add(&mut self, pred: f64, truth: f64) {
        let d = pred - truth;
        self.n += 1;
        self.abs += d.abs();
        self.sq += d * d;
        self.x += truth;
        self.y += pred;
        self.xx += truth * truth;
        self.yy += pred * pred;
        self.xy += truth * pred;
    }

    fn merge(&mut self, o: &Moments) {
        self.n += o.n;
        self.abs += o.abs;
        self.sq += o.sq;
        self.x += o.x;
        self.y += o.y;
        self.xx += o.xx;
        self.yy += o.yy;
        self.xy += o.xy;
    }

    fn finish(&self) -> BandMetrics {
        let n = self.n as f64;
        let mae = self.abs / n;
        let mse = self.sq / n;
        let rmse = mse.sqrt();
        let (mx, my) = (self.x / n, self.y / n);
        let vx = self.xx / n - mx * mx;
        let vy = self.yy / n - my * my;
        let cxy = self.xy / n - mx * my;
        let fit = vx > 1e-15;
        let slope = fit.then(|| cxy / vx);
        BandMetrics {
            // Rounding can push the mean absolute error a hair above the root mean square.
            mae: mae.min(rmse),
            rmse,
            psnr: psnr(mse),
            slope,
            intercept: slope.map(|b| my - b * mx),
            r2: (fit && vy > 1e-15).then(|| cxy * cxy / (vx * vy)),
        }
    }
}

/// Streaming accumulator of stratified metrics.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    bands: BTreeMap<Stratum, [Moments; 4]>,
    pixels: BTreeMap<Stratum, u64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one patch: `pred` and `truth` are `[4, H, W]` (a leading unit
    /// batch axis is accepted); `valid` and `landcover` are per pixel.
    pub fn add(&mut self, pred: &Tensor, truth: &Tensor, valid: &[bool], landcover: &[LandCover]) -> Result<()> {
        if pred.len() != truth.len() || pred.len() != 4 * valid.len() || valid.len() != landcover.len() {
            return Err(Error::Shape(format!(
                "prediction {:?}, truth {:?}, {} mask entries, {} labels",
                pred.shape(),
                truth.shape(),
                valid.len(),
                landcover.len()
            )));
        }
        let l = valid.len();
        for s in Stratum::ALL {
            let m = self.bands.entry(s).or_default();
            let mut px = 0;
            for i in 0..l {
                if !valid[i] || !s.contains(landcover[i]) {
                    continue;
                }
                px += 1;
                for (c, mc) in m.iter_mut().enumerate() {
                    mc.add(pred.data()[c * l + i] as f64, truth.data()[c * l + i] as f64);
                }
            }
            *self.pixels.entry(s).or_default() += px;
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let mut strata = BTreeMap::new();
        for s in Stratum::ALL {
            let px = self.pixels.get(&s).copied().unwrap_or(0);
            let entry = (px > 0).then(|| {
                let m = &self.bands[&s];
                let mut pooled = Moments::default();
                for b in m {
                    pooled.merge(b);
                }
                let out = StratumMetrics {
                    pixels: px,
                    overall: pooled.finish(),
                    bands: m.iter().map(Moments::finish).collect(),
                };
                debug_assert!(out.overall.mae <= out.overall.rmse);
                out
            });
            strata.insert(s, entry);
        }
        MetricReport { strata }
    }
}

/// Stratified MAE, RMSE and PSNR (peak 1) over valid pixels of one patch.
pub fn metrics(pred_mu: &Tensor, truth: &Tensor, valid: &[bool], landcover: &[LandCover]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    acc.add(pred_mu, truth, valid, landcover)?;
    Ok(acc.finish())
}

/// Per-pixel linear interpolation between the nearest cloud-free
/// observations around `target`, holding the nearest value when only one
/// side exists. Returns the patch `[4, H, W]` and a per-pixel validity mask.
pub fn linear_baseline(
    optical: &Tensor,
    dates: &[CalendarDate],
    cloud_masks: &[bool],
    target: CalendarDate,
) -> Result<(Tensor, Vec<bool>)> {
    if optical.ndim() != 4 || optical.dim(1) != 4 {
        return Err(Error::Shape(format!("expected [T, 4, H, W], got {:?}", optical.shape())));
    }
    let (t, h, w) = (optical.dim(0), optical.dim(2), optical.dim(3));
    let l = h * w;
    if dates.len() != t {
        return Err(Error::DateCount {
            dates: dates.len(),
            acquisitions: t,
        });
    }
    if cloud_masks.len() != t * l {
        return Err(Error::Shape("cloud mask does not match the optical stack".into()));
    }
    let mut out = vec![0.0f32; 4 * l];
    let mut valid = vec![false; l];
    for px in 0..l {
        let mut before: Option<usize> = None;
        let mut after: Option<usize> = None;
        for i in 0..t {
            if cloud_masks[i * l + px] {
                continue;
            }
            let d = dates[i];
            if d <= target && before.map_or(true, |b| d > dates[b]) {
                before = Some(i);
            }
            if d >= target && after.map_or(true, |a| d < dates[a]) {
                after = Some(i);
            }
        }
        let at = |i: usize, c: usize| optical.data()[((i * 4) + c) * l + px] as f64;
        let value = |c: usize| match (before, after) {
            (Some(b), Some(a)) if dates[a] != dates[b] => {
                let span = dates[a].days_since(dates[b]) as f64;
                let f = target.days_since(dates[b]) as f64 / span;
                Some(at(b, c) + f * (at(a, c) - at(b, c)))
            }
            (Some(i), _) | (None, Some(i)) => Some(at(i, c)),
            (None, None) => None,
        };
        for c in 0..4 {
            if let Some(v) = value(c) {
                out[c * l + px] = v as f32;
                valid[px] = true;
            }
        }
    }
    Ok((Tensor::new(vec![4, h, w], out), valid))
}

/// Empirical coverage of central Laplace intervals.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    /// Coverage pooled over bands, one entry per level.
    pub coverage: Vec<f64>,
    /// Coverage per level and band.
    pub per_band: Vec<[f64; 4]>,
    /// Valid elements per band.
    pub count: u64,
}

impl CalibrationCurve {
    pub fn max_abs_error(&self) -> f64 {
        self.levels
            .iter()
            .zip(&self.coverage)
            .map(|(p, c)| (p - c).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct CalibrationAccumulator {
    levels: Vec<f64>,
    factors: Vec<f64>,
    inside: Vec<[u64; 4]>,
    count: u64,
}

impl CalibrationAccumulator {
    pub fn new(levels: &[f64]) -> Result<Self> {
        let factors = levels.iter().map(|&p| halfwidth(1.0, p)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            levels: levels.to_vec(),
            factors,
            inside: vec![[0; 4]; levels.len()],
            count: 0,
        })
    }

    /// Adds one prediction (batch of one) against `truth [4, H, W]`.
    pub fn add(&mut self, pred: &LaplacePrediction, truth: &Tensor, valid: &[bool]) -> Result<()> {
        let l = valid.len();
        if pred.mu.len() != 4 * l || truth.len() != 4 * l {
            return Err(Error::Shape("calibration inputs differ in size".into()));
        }
        for px in (0..l).filter(|&px| valid[px]) {
            self.count += 1;
            for c in 0..4 {
                let i = c * l + px;
                let r = (truth.data()[i] as f64 - pred.mu.data()[i] as f64).abs();
                let b = (pred.log_b.data()[i] as f64).exp();
                for (k, f) in self.factors.iter().enumerate() {
                    if r <= b * f {
                        self.inside[k][c] += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<CalibrationCurve> {
        if self.count == 0 {
            return Err(Error::NoValidElements);
        }
        let n = self.count as f64;
        let per_band: Vec<[f64; 4]> = self.inside.iter().map(|c| c.map(|v| v as f64 / n)).collect();
        Ok(CalibrationCurve {
            levels: self.levels.clone(),
            coverage: per_band.iter().map(|b| b.iter().sum::<f64>() / 4.0).collect(),
            per_band,
            count: self.count,
        })
    }
}

/// Coverage of predicted intervals at each nominal level.
pub fn calibration(
    preds: &[LaplacePrediction],
    truths: &[Tensor],
    valid_masks: &[Vec<bool>],
    levels: &[f64],
) -> Result<CalibrationCurve> {
    if preds.len() != truths.len() || preds.len() != valid_masks.len() {
        return Err(Error::Shape("calibration lists differ in length".into()));
    }
    let mut acc = CalibrationAccumulator::new(levels)?;
    for ((p, t), v) in preds.iter().zip(truths).zip(valid_masks) {
        acc.add(p, t, v)?;
    }
    acc.finish()
}

/// Inputs used for one densified date.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensifyWindow {
    pub optical: Vec<CalendarDate>,
    pub radar: Vec<CalendarDate>,
}

/// The up to eight optical acquisitions nearest to `target` (an acquisition
/// on the target date itself is excluded), plus radar inside their span;
/// the union is capped at eight, nearest first, keeping at least one optical.
pub fn densify_window(spec: &SceneSpec, target: CalendarDate) -> Result<DensifyWindow> {
    let dist = |d: &CalendarDate| (d.days_since(target).abs(), *d);
    let mut opt: Vec<CalendarDate> = spec.s2_calendar.iter().copied().filter(|d| *d != target).collect();
    opt.sort_by_key(dist);
    opt.truncate(MAX_SEQ_LEN);
    let (Some(lo), Some(hi)) = (opt.iter().min().copied(), opt.iter().max().copied()) else {
        return Err(Error::EmptySequence);
    };
    let sar = spec.s1_calendar.iter().copied().filter(|d| *d >= lo && *d <= hi);
    let mut all: Vec<(CalendarDate, Modality)> = opt
        .iter()
        .map(|&d| (d, Modality::Optical))
        .chain(sar.map(|d| (d, Modality::Radar)))
        .collect();
    all.sort_by_key(|(d, m)| (dist(d), *m == Modality::Radar));
    all.truncate(MAX_SEQ_LEN);
    if !all.iter().any(|(_, m)| *m == Modality::Optical) {
        all.pop();
        all.push((opt[0], Modality::Optical));
    }
    let mut w = DensifyWindow {
        optical: all.iter().filter(|(_, m)| *m == Modality::Optical).map(|(d, _)| *d).collect(),
        radar: all.iter().filter(|(_, m)| *m == Modality::Radar).map(|(d, _)| *d).collect(),
    };
    w.optical.sort();
    w.radar.sort();
    // The cap may have dropped the outermost optical dates.
    let (lo, hi) = (w.optical[0], w.optical[w.optical.len() - 1]);
    w.radar.retain(|d| *d >= lo && *d <= hi);
    Ok(w)
}

/// Renders the observations of a window: the model input and per-input cloud masks.
pub fn window_input(spec: &SceneSpec, window: &DensifyWindow, target: CalendarDate, stats: &SarStats) -> (SequenceInput, Vec<bool>) {
    let sel = Selection {
        target,
        mode: TargetMode::Interpolation,
        min_gap_days: 0,
        optical: window.optical.clone(),
        radar: window.radar.clone(),
    };
    let s = materialize(spec, &sel, Some(stats));
    (s.input, s.cloud_mask)
}

/// Scene-mean NDVI trajectory with interval bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NdviSeries {
    pub dates: Vec<CalendarDate>,
    pub predicted: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Result of a dense reconstruction; maps are `[N, H, W]`.
#[derive(Clone, Debug)]
pub struct Densified {
    pub dates: Vec<CalendarDate>,
    pub windows: Vec<DensifyWindow>,
    pub predictions: Vec<LaplacePrediction>,
    pub series: NdviSeries,
    pub ndvi_pred: Tensor,
    pub ndvi_lower: Tensor,
    pub ndvi_upper: Tensor,
    pub ndvi_truth: Tensor,
    /// NDVI of the texture-free band model, i.e. the phenology alone.
    pub ndvi_phenology: Tensor,
    /// Baseline NDVI from the same optical inputs, with its validity.
    pub ndvi_baseline: Tensor,
    pub baseline_valid: Vec<bool>,
    /// Nominal level of the NDVI bands.
    pub level: f64,
}

/// Scalar checks of a dense reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensifySummary {
    pub predictions: usize,
    pub level: f64,
    /// NDVI RMSE of the model and of the baseline against the rendered truth,
    /// on pixel-dates where the baseline is defined.
    pub ndvi_rmse: f64,
    pub baseline_ndvi_rmse: f64,
    /// The same against the texture-free phenology.
    pub phenology_rmse: f64,
    pub baseline_phenology_rmse: f64,
    /// Fraction of pixel-dates whose true NDVI lies inside the band.
    pub pixel_coverage: f64,
    /// Fraction of dates whose scene-mean true NDVI lies inside the scene-mean band.
    pub date_coverage: f64,
}

impl Densified {
    pub fn summary(&self) -> DensifySummary {
        let t = self.ndvi_truth.data();
        let ph = self.ndvi_phenology.data();
        let (p, b) = (self.ndvi_pred.data(), self.ndvi_baseline.data());
        let mut sq = [0.0f64; 4];
        let mut n = 0usize;
        for (i, &ok) in self.baseline_valid.iter().enumerate() {
            if ok {
                for (acc, d) in sq.iter_mut().zip([p[i] - t[i], b[i] - t[i], p[i] - ph[i], b[i] - ph[i]]) {
                    *acc += (d as f64).powi(2);
                }
                n += 1;
            }
        }
        let inside = (0..t.len())
            .filter(|&i| self.ndvi_lower.data()[i] <= t[i] && t[i] <= self.ndvi_upper.data()[i])
            .count();
        let s = &self.series;
        let dates_inside = (0..s.dates.len()).filter(|&i| s.lower[i] <= s.truth[i] && s.truth[i] <= s.upper[i]).count();
        let n = n.max(1) as f64;
        DensifySummary {
            predictions: self.dates.len(),
            level: self.level,
            ndvi_rmse: (sq[0] / n).sqrt(),
            baseline_ndvi_rmse: (sq[1] / n).sqrt(),
            phenology_rmse: (sq[2] / n).sqrt(),
            baseline_phenology_rmse: (sq[3] / n).sqrt(),
            pixel_coverage: inside as f64 / t.len().max(1) as f64,
            date_coverage: dates_inside as f64 / s.dates.len().max(1) as f64,
        }
    }
}

/// NDVI from clipped locations and its bounds from the corners of the
/// per-band intervals `μ ± w` (clipped to the reflectance range).
pub fn ndvi_with_bounds(mu_nir: f64, w_nir: f64, mu_red: f64, w_red: f64) -> (f64, f64, f64) {
    let c = |v: f64| v.clamp(0.0, 1.0);
    let center = ndvi(c(mu_nir), c(mu_red));
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for n in [mu_nir - w_nir, mu_nir + w_nir] {
        for r in [mu_red - w_red, mu_red + w_red] {
            let v = ndvi(c(n), c(r));
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (center, lo.min(center), hi.max(center))
}

/// Grid of `start + k·step` strictly inside a period of `period_days`.
pub fn date_grid(start: CalendarDate, period_days: i64, step_days: i64) -> Result<Vec<CalendarDate>> {
    if step_days < 1 {
        return Err(Error::InvalidStep);
    }
    Ok((0..period_days).step_by(step_days as usize).map(|k| start.add_days(k)).collect())
}

/// Predicts every grid date independently from its own input window.
pub fn densify(
    gen: &Generator,
    spec: &SceneSpec,
    stats: &SarStats,
    start: CalendarDate,
    period_days: i64,
    step_days: i64,
    level: f64,
) -> Result<Densified> {
    let dates = date_grid(start, period_days, step_days)?;
    let k = halfwidth(1.0, level)?;
    let (h, w) = (spec.height, spec.width);
    let l = h * w;
    let n = dates.len();
    let mut maps: [Vec<f32>; 6] = std::array::from_fn(|_| vec![0.0; n * l]);
    let mut baseline_valid = vec![false; n * l];
    let mut series = NdviSeries {
        dates: dates.clone(),
        predicted: Vec::new(),
        lower: Vec::new(),
        upper: Vec::new(),
        truth: Vec::new(),
    };
    let mut windows = Vec::new();
    let mut predictions = Vec::new();
    for (i, &d) in dates.iter().enumerate() {
        let window = densify_window(spec, d)?;
        let (input, clouds) = window_input(spec, &window, d, stats);
        let p = gen.predict(&input, d)?;
        let truth = render_optical(spec, d);
        let veg = vegetation_map(spec, d);
        let (base, bvalid) = linear_baseline(&input.optical, &input.optical_dates, &clouds, d)?;
        let mut sums = [0.0f64; 4];
        for px in 0..l {
            let (mn, mr) = (p.mu.data()[3 * l + px] as f64, p.mu.data()[px] as f64);
            let wn = (p.log_b.data()[3 * l + px] as f64).exp() * k;
            let wr = (p.log_b.data()[px] as f64).exp() * k;
            let (c, lo, hi) = ndvi_with_bounds(mn, wn, mr, wr);
            let t = ndvi(truth.data()[3 * l + px] as f64, truth.data()[px] as f64);
            let b = ndvi(base.data()[3 * l + px] as f64, base.data()[px] as f64);
            let clean = band_model(veg[px]);
            let ph = ndvi(clean[3], clean[0]);
            for (m, v) in maps.iter_mut().zip([c, lo, hi, t, b, ph]) {
                m[i * l + px] = v as f32;
            }
            baseline_valid[i * l + px] = bvalid[px];
            for (s, v) in sums.iter_mut().zip([c, lo, hi, t]) {
                *s += v;
            }
        }
        series.predicted.push(sums[0] / l as f64);
        series.lower.push(sums[1] / l as f64);
        series.upper.push(sums[2] / l as f64);
        series.truth.push(sums[3] / l as f64);
        windows.push(window);
        predictions.push(p);
    }
    let [pred, lower, upper, truth, base, phen] = maps.map(|m| Tensor::new(vec![n, h, w], m));
    Ok(Densified {
        dates,
        windows,
        predictions,
        series,
        ndvi_pred: pred,
        ndvi_lower: lower,
        ndvi_upper: upper,
        ndvi_truth: truth,
        ndvi_phenology: phen,
        ndvi_baseline: base,
        baseline_valid,
        level,
    })
}

/// Date and modality of one token slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionMeta {
    pub date: CalendarDate,
    pub modality: Modality,
}

/// Token metadata of a model input in token order (optical, then radar).
pub fn acquisition_meta(input: &SequenceInput, optical_only: bool) -> Vec<AcquisitionMeta> {
    let n_sar = if optical_only { 0 } else { input.n_radar() };
    let dates = input.optical_dates.iter().chain(input.radar_dates.iter().take(n_sar));
    token_modalities(input.n_optical(), n_sar)
        .into_iter()
        .zip(dates)
        .map(|(modality, &date)| AcquisitionMeta { date, modality })
        .collect()
}

/// Mean weight of each token over pixels: `[layer][head][token]` for batch element `b`.
pub fn attention_summary(record: &AttentionRecord, b: usize) -> Vec<Vec<Vec<f64>>> {
    (0..record.layers)
        .map(|l| {
            (0..record.heads)
                .map(|h| {
                    let mut s = vec![0.0; record.tokens];
                    for p in 0..record.pixels {
                        for (acc, &v) in s.iter_mut().zip(record.row(l, h, b, p)) {
                            *acc += v as f64;
                        }
                    }
                    s.iter().map(|v| v / record.pixels as f64).collect()
                })
                .collect()
        })
        .collect()
}

/// Per-token summary averaged over layers and heads.
pub fn mean_attention(summary: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let n = summary.iter().map(Vec::len).sum::<usize>() as f64;
    let t = summary.first().and_then(|l| l.first()).map_or(0, Vec::len);
    (0..t)
        .map(|i| summary.iter().flatten().map(|h| h[i]).sum::<f64>() / n)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionMapEntry {
    pub layer: usize,
    pub head: usize,
    pub file: String,
    /// Map shape `[T, H/2, W/2]`; slice `t` belongs to `acquisitions[t]`.
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionReport {
    pub acquisitions: Vec<AcquisitionMeta>,
    pub summary: Vec<Vec<Vec<f64>>>,
    pub mean_per_acquisition: Vec<f64>,
    pub maps: Vec<AttentionMapEntry>,
}

/// Writes per-layer, per-head attention maps and a JSON index to `out_dir`.
pub fn export_attention(
    record: &AttentionRecord,
    acquisitions: &[AcquisitionMeta],
    grid: (usize, usize),
    out_dir: &Path,
) -> Result<AttentionReport> {
    if acquisitions.len() != record.tokens || grid.0 * grid.1 != record.pixels {
        return Err(Error::Shape("attention record does not match its metadata".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary = attention_summary(record, 0);
    let mut maps = Vec::new();
    for l in 0..record.layers {
        for h in 0..record.heads {
            let mut data = vec![0.0f32; record.tokens * record.pixels];
            for p in 0..record.pixels {
                for (t, &v) in record.row(l, h, 0, p).iter().enumerate() {
                    data[t * record.pixels + p] = v;
                }
            }
            let file = format!("attn_l{l}_h{h}.mdar");
            let shape = vec![record.tokens, grid.0, grid.1];
            container::write(&out_dir.join(&file), &Tensor::new(shape.clone(), data))?;
            maps.push(AttentionMapEntry {
                layer: l,
                head: h,
                file,
                shape,
            });
        }
    }
    let report = AttentionReport {
        acquisitions: acquisitions.to_vec(),
        mean_per_acquisition: mean_attention(&summary),
        summary,
        maps,
    };
    let path = out_dir.join("attention_index.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Days from the target to the nearest cloud-free optical input, if any.
pub fn nearest_clean_gap(sample: &MultimodalSample) -> Option<i64> {
    sample
        .cloud_fractions()
        .iter()
        .zip(&sample.input.optical_dates)
        .filter(|(f, _)| **f == 0.0)
        .map(|(_, d)| d.days_since(sample.target_date).abs())
        .min()
}

/// Errors restricted to samples far from any clean optical input.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FarGapReport {
    pub min_gap_days: i64,
    pub samples: usize,
    pub model: Option<StratumMetrics>,
    pub baseline: Option<StratumMetrics>,
}

/// Model and baseline errors over a split, on pixels where the baseline is defined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitEvaluation {
    pub samples: usize,
    /// Metrics of the model with locations clipped to the reflectance range.
    pub model: MetricReport,
    /// The same without clipping; present only when clipping changed a value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_unclipped: Option<MetricReport>,
    pub baseline: MetricReport,
    pub far_gap: FarGapReport,
}

/// Evaluates predicted locations `[4, H, W]` (or `[1, 4, H, W]`) from
/// `predict` against the targets of `samples`. Locations are clipped to
/// `[0, 1]` before scoring.
pub fn evaluate_split<F>(samples: &[(MultimodalSample, SampleMeta)], far_gap_days: i64, mut predict: F) -> Result<SplitEvaluation>
where
    F: FnMut(usize, &MultimodalSample) -> Result<Tensor>,
{
    let mut model = MetricAccumulator::new();
    let mut raw = MetricAccumulator::new();
    let mut clipped_any = false;
    let mut baseline = MetricAccumulator::new();
    let mut far_model = MetricAccumulator::new();
    let mut far_base = MetricAccumulator::new();
    let mut far = 0;
    for (i, (s, _)) in samples.iter().enumerate() {
        let unclipped = predict(i, s)?;
        let mu = unclipped.map(|v| v.clamp(0.0, 1.0));
        clipped_any |= mu.data() != unclipped.data();
        let (b, valid) = linear_baseline(&s.input.optical, &s.input.optical_dates, &s.cloud_mask, s.target_date)?;
        raw.add(&unclipped, &s.target, &valid, &s.landcover)?;
        model.add(&mu, &s.target, &valid, &s.landcover)?;
        baseline.add(&b, &s.target, &valid, &s.landcover)?;
        if nearest_clean_gap(s).map_or(true, |g| g >= far_gap_days) {
            far += 1;
            far_model.add(&mu, &s.target, &valid, &s.landcover)?;
            far_base.add(&b, &s.target, &valid, &s.landcover)?;
        }
    }
    let all = |r: MetricReport| r.get(Stratum::All).cloned();
    Ok(SplitEvaluation {
        samples: samples.len(),
        model: model.finish(),
        model_unclipped: clipped_any.then(|| raw.finish()),
        baseline: baseline.finish(),
        far_gap: FarGapReport {
            min_gap_days: far_gap_days,
            samples: far,
            model: all(far_model.finish()),
            baseline: all(far_base.finish()),
        },
    })
}

/// [`evaluate_split`] driven by a model.
pub fn evaluate_model(gen: &Generator, samples: &[(MultimodalSample, SampleMeta)], far_gap_days: i64) -> Result<SplitEvaluation> {
    evaluate_split(samples, far_gap_days, |_, s| Ok(gen.predict(&s.input, s.target_date)?.mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Ablation, ModelConfig};
    use crate::synthscene::SceneDistribution;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp};

    fn day(doy: u32) -> CalendarDate {
        CalendarDate::new(2020, doy).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let t = Tensor::full(&[4, 2, 2], 0.3);
        let r = metrics(&t, &t, &[true; 4], &[LandCover::Stable; 4]).unwrap();
        let all = r.get(Stratum::All).unwrap();
        assert_eq!((all.overall.mae, all.overall.rmse), (0.0, 0.0));
        assert!(all.overall.psnr.is_infinite());
        assert!(r.get(Stratum::DynamicCrop).is_none());
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["strata"]["all"]["overall"]["psnr"], "inf");
        assert!(json["strata"]["dynamic_crop"].is_null());
    }

    #[test]
    fn constant_error() {
        let t = Tensor::full(&[4, 3, 3], 0.3);
        let p = t.map(|v| v + 0.01);
        let r = metrics(&p, &t, &[true; 9], &[LandCover::DynamicCrop; 9]).unwrap();
        let m = &r.get(Stratum::DynamicCrop).unwrap().overall;
        assert!((m.mae - 0.01).abs() < 1e-6 && (m.rmse - 0.01).abs() < 1e-6);
        assert!((m.psnr - 40.0).abs() < 1e-3);
    }

    #[test]
    fn metrics_match_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = Tensor::new(vec![4, 8, 8], (0..256).map(|_| rng.gen_range(0.0..1.0)).collect());
        // Shift every band by one column.
        let mut pred = truth.clone();
        for c in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    pred.data_mut()[(c * 8 + y) * 8 + x] = truth.data()[(c * 8 + y) * 8 + (x + 1) % 8];
                }
            }
        }
        let lc: Vec<LandCover> = (0..64).map(|i| if i % 3 == 0 { LandCover::Stable } else { LandCover::DynamicCrop }).collect();
        let valid: Vec<bool> = (0..64).map(|i| i % 5 != 0).collect();
        let r = metrics(&pred, &truth, &valid, &lc).unwrap();
        for s in Stratum::ALL {
            let (mut a, mut q, mut n) = (0.0f64, 0.0f64, 0);
            for px in 0..64 {
                if !valid[px] || !s.contains(lc[px]) {
                    continue;
                }
                for c in 0..4 {
                    let d = (pred.data()[c * 64 + px] - truth.data()[c * 64 + px]) as f64;
                    a += d.abs();
                    q += d * d;
                    n += 1;
                }
            }
            let m = &r.get(s).unwrap().overall;
            assert!((m.mae - a / n as f64).abs() < 1e-9);
            assert!((m.rmse - (q / n as f64).sqrt()).abs() < 1e-9);
            assert!(m.mae <= m.rmse);
        }
    }

    #[test]
    fn regression_of_affine_prediction() {
        let truth = Tensor::new(vec![4, 1, 4], (0..16).map(|i| i as f32 / 20.0).collect());
        let pred = truth.map(|v| 0.05 + 0.9 * v);
        let r = metrics(&pred, &truth, &[true; 4], &[LandCover::Stable; 4]).unwrap();
        let b = &r.get(Stratum::All).unwrap().bands[2];
        assert!((b.slope.unwrap() - 0.9).abs() < 1e-5);
        assert!((b.intercept.unwrap() - 0.05).abs() < 1e-5);
        assert!((b.r2.unwrap() - 1.0).abs() < 1e-5);
    }

    fn stack(values: &[[f32; 2]], dates: &[u32]) -> (Tensor, Vec<CalendarDate>) {
        // Two pixels, four bands holding the same value.
        let mut data = Vec::new();
        for v in values {
            for _ in 0..4 {
                data.extend_from_slice(v);
            }
        }
        (Tensor::new(vec![values.len(), 4, 1, 2], data), dates.iter().map(|&d| day(d)).collect())
    }

    #[test]
    fn baseline_midpoint_and_persistence() {
        let (x, d) = stack(&[[0.2, 0.2], [0.4, 0.4]], &[10, 20]);
        let (b, v) = linear_baseline(&x, &d, &[false; 4], day(15)).unwrap();
        assert!((b.data()[0] - 0.3).abs() < 1e-6);
        assert_eq!(v, vec![true, true]);
        let (b, _) = linear_baseline(&x, &d, &[false; 4], day(40)).unwrap();
        assert!((b.data()[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn baseline_skips_cloudy_dates_and_flags_covered_pixels() {
        let (x, d) = stack(&[[0.1, 0.5], [0.9, 0.5], [0.3, 0.5]], &[10, 20, 30]);
        let masks = [false, true, true, true, false, true];
        let (b, v) = linear_baseline(&x, &d, &masks, day(25)).unwrap();
        assert!((b.data()[0] - (0.1 + 0.75 * 0.2)).abs() < 1e-6);
        assert_eq!(v, vec![true, false]);
    }

    #[test]
    fn baseline_matches_brute_force_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = 5;
            let dates: Vec<CalendarDate> = {
                let mut v: Vec<u32> = (0..t).map(|_| rng.gen_range(1..300)).collect();
                v.sort();
                v.dedup();
                v.into_iter().map(day).collect()
            };
            let t = dates.len();
            let x = Tensor::new(vec![t, 4, 2, 2], (0..t * 16).map(|_| rng.gen_range(0.0..1.0)).collect());
            let masks: Vec<bool> = (0..t * 4).map(|_| rng.gen_bool(0.4)).collect();
            let target = day(rng.gen_range(1..300));
            let (b, v) = linear_baseline(&x, &dates, &masks, target).unwrap();
            for px in 0..4 {
                let clean: Vec<usize> = (0..t).filter(|&i| !masks[i * 4 + px]).collect();
                let before = clean.iter().rev().find(|&&i| dates[i] <= target);
                let after = clean.iter().find(|&&i| dates[i] >= target);
                assert_eq!(v[px], !clean.is_empty());
                let val = |i: usize| x.data()[(i * 4) * 4 + px] as f64;
                let expect = match (before, after) {
                    (Some(&b), Some(&a)) if a != b => {
                        val(b) + (val(a) - val(b)) * target.days_since(dates[b]) as f64 / dates[a].days_since(dates[b]) as f64
                    }
                    (Some(&i), _) | (None, Some(&i)) => val(i),
                    _ => continue,
                };
                assert!((b.data()[px] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn baseline_exact_on_affine_signal() {
        let d = [day(10), day(30)];
        let x = Tensor::new(vec![2, 4, 1, 1], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
        let (b, _) = linear_baseline(&x, &d, &[false; 2], day(25)).unwrap();
        for c in 0..4 {
            let expect = x.data()[c] + 0.75 * (x.data()[4 + c] - x.data()[c]);
            assert!((b.data()[c] - expect).abs() < 1e-6);
        }
    }

    fn pred(mu: f32, log_b: f32, l: usize) -> LaplacePrediction {
        LaplacePrediction {
            mu: Tensor::full(&[1, 4, 1, l], mu),
            log_b: Tensor::full(&[1, 4, 1, l], log_b),
        }
    }

    #[test]
    fn wide_intervals_cover_everything() {
        let levels: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let c = calibration(&[pred(0.0, 2.0, 3)], &[Tensor::full(&[4, 1, 3], 0.5)], &[vec![true; 3]], &levels).unwrap();
        assert!(c.coverage.iter().all(|&v| v == 1.0));
        assert!(calibration(&[pred(0.0, 2.0, 3)], &[Tensor::full(&[4, 1, 3], 0.5)], &[vec![false; 3]], &levels).is_err());
        assert!(CalibrationAccumulator::new(&[1.0]).is_err());
    }

    #[test]
    fn half_of_residuals_inside() {
        let w = halfwidth(0.1, 0.5).unwrap() as f32;
        let p = pred(0.0, 0.1f32.ln(), 2);
        let truth = Tensor::new(vec![4, 1, 2], [w * 0.5, w * 2.0].repeat(4));
        let c = calibration(&[p], &[truth], &[vec![true; 2]], &[0.5]).unwrap();
        assert!((c.coverage[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_laplace_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 25_000;
        let levels: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
        let mu: Vec<f32> = (0..4 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let lb: Vec<f32> = (0..4 * n).map(|_| rng.gen_range(-4.0..-1.0)).collect();
        let exp = Exp::new(1.0).unwrap();
        let y: Vec<f32> = mu
            .iter()
            .zip(&lb)
            .map(|(&m, &l)| {
                let s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (m as f64 + s * l.exp() as f64 * exp.sample(&mut rng)) as f32
            })
            .collect();
        let p = LaplacePrediction {
            mu: Tensor::new(vec![1, 4, 1, n], mu),
            log_b: Tensor::new(vec![1, 4, 1, n], lb),
        };
        let c = calibration(&[p], &[Tensor::new(vec![4, 1, n], y)], &[vec![true; n]], &levels).unwrap();
        assert!(c.max_abs_error() <= 0.01, "{:?}", c.coverage);
        assert!(c.coverage.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ndvi_reference_and_bounds() {
        assert!((ndvi(0.4, 0.1) - 0.6).abs() < 1e-7);
        let (c, lo, hi) = ndvi_with_bounds(0.4, 0.05, 0.1, 0.02);
        assert!(lo <= c && c <= hi);
        assert!((lo - ndvi(0.35, 0.12)).abs() < 1e-12);
        assert!((hi - ndvi(0.45, 0.08)).abs() < 1e-12);
    }

    #[test]
    fn grid_counts() {
        let start = CalendarDate::new(2021, 1).unwrap();
        assert_eq!(date_grid(start, 365, 365).unwrap().len(), 1);
        let g = date_grid(start, 365, 5).unwrap();
        assert_eq!(g.len(), 73);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(date_grid(start, 365, 0), Err(Error::InvalidStep)));
    }

    fn small_model() -> Generator {
        let cfg = ModelConfig {
            d_feat: 6,
            d_time: 4,
            time_hidden: 4,
            d_dec: 6,
            n_layers: 2,
            n_heads: 2,
            spp_scales: vec![1, 2],
        };
        Generator::new(&cfg, Ablation::default(), 2020, 3).unwrap()
    }

    fn scene() -> SceneSpec {
        let dist = SceneDistribution {
            patch_size: 8,
            ..Default::default()
        };
        SceneSpec::sample(&dist, 21).unwrap()
    }

    #[test]
    fn densify_window_policy() {
        let s = scene();
        for doy in [1u32, 100, 200, 366] {
            let d = day(doy);
            let w = densify_window(&s, d).unwrap();
            assert!(!w.optical.is_empty() && w.optical.len() + w.radar.len() <= 8);
            assert!(!w.optical.contains(&d));
            let lo = *w.optical.first().unwrap();
            let hi = *w.optical.last().unwrap();
            assert!(w.radar.iter().all(|r| *r >= lo && *r <= hi));
        }
    }

    #[test]
    fn densify_dates_are_independent() {
        let s = scene();
        let g = small_model();
        let stats = SarStats::default();
        let start = day(1);
        let full = densify(&g, &s, &stats, start, 60, 10, 0.9).unwrap();
        assert_eq!(full.dates.len(), 6);
        let single = densify(&g, &s, &stats, full.dates[3], 1, 1, 0.9).unwrap();
        assert_eq!(single.predictions[0], full.predictions[3]);
        for i in 0..full.dates.len() {
            assert!(full.series.lower[i] <= full.series.predicted[i] && full.series.predicted[i] <= full.series.upper[i]);
        }
    }

    #[test]
    fn attention_summaries() {
        let g = small_model();
        let s = scene();
        let w = DensifyWindow {
            optical: vec![s.s2_calendar[3]],
            radar: vec![],
        };
        let (input, _) = window_input(&s, &w, day(60), &SarStats::default());
        let (_, rec) = g.predict_with_attention(&input, day(60)).unwrap();
        let sum = attention_summary(&rec, 0);
        assert!(sum.iter().flatten().all(|h| h == &vec![1.0]));

        let mut uniform = rec.clone();
        uniform.tokens = 4;
        uniform.weights = vec![0.25; rec.layers * rec.heads * rec.pixels * 4];
        let sum = attention_summary(&uniform, 0);
        assert!(sum.iter().flatten().flatten().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn export_writes_maps_and_index() {
        let g = small_model();
        let s = scene();
        let d = day(120);
        let w = densify_window(&s, d).unwrap();
        let (input, _) = window_input(&s, &w, d, &SarStats::default());
        let (_, rec) = g.predict_with_attention(&input, d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let meta = acquisition_meta(&input, false);
        let rep = export_attention(&rec, &meta, (4, 4), dir.path()).unwrap();
        assert_eq!(rep.maps.len(), rec.layers * rec.heads);
        let m = container::read(&dir.path().join(&rep.maps[0].file)).unwrap();
        assert_eq!(m.shape(), &[meta.len(), 4, 4]);
        let total: f64 = rep.mean_per_acquisition.iter().sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!(dir.path().join("attention_index.json").exists());
    }

    #[test]
    fn split_scores_clipped_locations() {
        let cfg = crate::synthscene::DataConfig {
            scene: SceneDistribution {
                patch_size: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let sel = crate::training::SelectionConfig::default();
        let samples: Vec<_> = (0..3)
            .map(|i| crate::synthscene::generate_sample(&cfg, &sel, 4, i, None).unwrap())
            .collect();
        let exact = evaluate_split(&samples, 25, |_, s| Ok(s.target.clone())).unwrap();
        assert_eq!(exact.model.get(Stratum::All).unwrap().overall.mae, 0.0);
        assert!(exact.model_unclipped.is_none());

        let over = evaluate_split(&samples, 25, |_, s| Ok(s.target.map(|v| v + 2.0))).unwrap();
        let clipped = over.model.get(Stratum::All).unwrap().overall.mae;
        let raw = over.model_unclipped.unwrap().get(Stratum::All).unwrap().overall.mae;
        assert!((raw - 2.0).abs() < 1e-4, "{raw}");
        assert!(clipped < 1.0);
        assert_eq!(over.baseline, exact.baseline);
    }
}
