//! Self-supervised training: target masking, gap enforcement, random
//! truncation, likelihood optimisation and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::date::CalendarDate;
use crate::error::{Error, Result};
use crate::laplace_head::{nll_laplace, LaplacePrediction};
use crate::model::{Ablation, Generator, ModelConfig, SequenceInput, MAX_SEQ_LEN};
use crate::nn::{Adam, Graph, Tensor};
use crate::synthscene::{
    materialize, mix_seed, read_json, window_calendars, Dataset, MultimodalSample, SampleMeta, SarStats, SceneSpec, Split,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    Interpolation,
    Extrapolation,
}

/// Target masking and truncation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub p_extrapolation: f64,
    /// Inclusive range the minimum optical gap is drawn from.
    pub min_gap_days: [i64; 2],
    /// Inclusive range of kept sequence lengths.
    pub truncation: [usize; 2],
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            p_extrapolation: 0.5,
            min_gap_days: [5, 30],
            truncation: [2, MAX_SEQ_LEN],
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.p_extrapolation) {
            return bad("p_extrapolation must lie in [0, 1]");
        }
        if self.min_gap_days[0] < 0 || self.min_gap_days[0] > self.min_gap_days[1] {
            return bad("min_gap_days must be a non-negative range");
        }
        if self.truncation[0] == 0 || self.truncation[0] > self.truncation[1] || self.truncation[1] > MAX_SEQ_LEN {
            return bad("truncation must be a range within [1, 8]");
        }
        Ok(())
    }
}

/// Dates chosen for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub target: CalendarDate,
    pub mode: TargetMode,
    pub min_gap_days: i64,
    pub optical: Vec<CalendarDate>,
    pub radar: Vec<CalendarDate>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.optical.len() + self.radar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the leakage, gap and causality rules.
    pub fn check(&self) -> Result<()> {
        let fail = |m: String| Err(Error::SkipSample(m));
        if self.optical.contains(&self.target) {
            return fail("target among optical inputs".into());
        }
        if self.optical.iter().any(|d| d.days_since(self.target).abs() < self.min_gap_days) {
            return fail("optical input closer than the minimum gap".into());
        }
        if self.mode == TargetMode::Extrapolation && self.optical.iter().chain(&self.radar).any(|d| *d >= self.target) {
            return fail("extrapolation input not before the target".into());
        }
        Ok(())
    }
}

/// Picks a target among the optical dates and the inputs allowed around it.
///
/// With probability `p_extrapolation` the last optical date is the target and
/// only earlier acquisitions remain; otherwise an interior date is chosen.
/// Optical inputs closer than a sampled minimum gap are dropped.
pub fn select_target<R: Rng>(
    optical: &[CalendarDate],
    radar: &[CalendarDate],
    rng: &mut R,
    cfg: &SelectionConfig,
) -> Result<Selection> {
    let n = optical.len();
    if n < 3 {
        return Err(Error::SkipSample(format!("{n} optical acquisitions, need 3")));
    }
    let mode = if rng.gen_bool(cfg.p_extrapolation) {
        TargetMode::Extrapolation
    } else {
        TargetMode::Interpolation
    };
    let ti = match mode {
        TargetMode::Extrapolation => n - 1,
        TargetMode::Interpolation => rng.gen_range(1..n - 1),
    };
    let gap = rng.gen_range(cfg.min_gap_days[0]..=cfg.min_gap_days[1]);
    let target = optical[ti];
    let causal = |d: &CalendarDate| mode == TargetMode::Interpolation || *d < target;
    let kept: Vec<CalendarDate> = optical
        .iter()
        .enumerate()
        .filter(|&(i, d)| i != ti && d.days_since(target).abs() >= gap && causal(d))
        .map(|(_, d)| *d)
        .collect();
    let before = kept.iter().any(|d| *d < target);
    let after = kept.iter().any(|d| *d > target);
    let enough = match mode {
        TargetMode::Extrapolation => before,
        TargetMode::Interpolation => before && after,
    };
    if !enough {
        return Err(Error::SkipSample(format!("no optical input left around {target} with gap {gap}")));
    }
    Ok(Selection {
        target,
        mode,
        min_gap_days: gap,
        optical: kept,
        radar: radar.iter().copied().filter(causal).collect(),
    })
}

/// Keeps a random subset whose size is uniform over the configured range.
///
/// At least one optical input is kept, one on each side of the target when
/// interpolating and the length allows it.
pub fn truncate_sequence<R: Rng>(sel: Selection, rng: &mut R, cfg: &SelectionConfig) -> Selection {
    let n = sel.len();
    if n == 0 {
        return sel;
    }
    let hi = cfg.truncation[1].min(n).min(MAX_SEQ_LEN);
    let lo = cfg.truncation[0].min(hi);
    let k = rng.gen_range(lo..=hi);
    let before: Vec<usize> = (0..sel.optical.len()).filter(|&i| sel.optical[i] < sel.target).collect();
    let after: Vec<usize> = (0..sel.optical.len()).filter(|&i| sel.optical[i] > sel.target).collect();
    let mut mandatory = Vec::new();
    match sel.mode {
        TargetMode::Interpolation if !before.is_empty() && !after.is_empty() => {
            mandatory.push(*before.choose(rng).unwrap());
            mandatory.push(*after.choose(rng).unwrap());
        }
        _ if !sel.optical.is_empty() => mandatory.push(rng.gen_range(0..sel.optical.len())),
        _ => {}
    }
    mandatory.truncate(k);
    // Pool indices: optical as-is, radar offset by the optical count.
    let rest: Vec<usize> = (0..n).filter(|i| !mandatory.contains(i)).collect();
    let extra = index::sample(rng, rest.len(), k - mandatory.len());
    let mut chosen: Vec<usize> = mandatory.into_iter().chain(extra.iter().map(|j| rest[j])).collect();
    chosen.sort_unstable();
    let n_opt = sel.optical.len();
    Selection {
        optical: chosen.iter().filter(|&&i| i < n_opt).map(|&i| sel.optical[i]).collect(),
        radar: chosen.iter().filter(|&&i| i >= n_opt).map(|&i| sel.radar[i - n_opt]).collect(),
        ..sel
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_seq_len: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Upper bound on validation samples scored per epoch; 0 scores all.
    pub val_samples: usize,
    #[serde(flatten)]
    pub selection: SelectionConfig,
    #[serde(flatten)]
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 5,
            seed: 0,
            max_seq_len: MAX_SEQ_LEN,
            grad_clip: 1.0,
            val_samples: 0,
            selection: SelectionConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        if self.max_seq_len != MAX_SEQ_LEN {
            return Err(Error::InvalidConfig(format!("max_seq_len is fixed at {MAX_SEQ_LEN}")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidConfig("learning rate and batch size must be positive".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::InvalidConfig("grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-epoch summary. Epoch 0 describes the initial parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_nll: Option<f64>,
    pub val_mae: Option<f64>,
    pub batches: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub reference_year: i32,
    pub sar_stats: SarStats,
    pub train: TrainConfig,
    pub epoch: usize,
    pub history: Vec<EpochStats>,
    pub adam_step: u64,
    pub params: Vec<ParamEntry>,
}

/// Parameters, optimiser moments and run metadata.
///
/// File layout: `CKPT`, version byte 1, a little-endian `u32` header length,
/// the JSON header, then every parameter tensor followed by the first and
/// second Adam moments, all as little-endian `f32` in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor>,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

const CKPT_MAGIC: &[u8; 4] = b"CKPT";

impl Checkpoint {
    pub fn capture(gen: &Generator, adam: &Adam, sar_stats: SarStats, train: &TrainConfig, history: &[EpochStats]) -> Self {
        let store = gen.params();
        Self {
            header: CheckpointHeader {
                format_version: 1,
                model: gen.config().clone(),
                ablation: gen.ablation(),
                reference_year: gen.reference_year(),
                sar_stats,
                train: train.clone(),
                epoch: history.last().map_or(0, |h| h.epoch),
                history: history.to_vec(),
                adam_step: adam.step,
                params: store
                    .names()
                    .iter()
                    .zip(store.tensors())
                    .map(|(n, t)| ParamEntry {
                        name: n.clone(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
            },
            params: store.tensors().to_vec(),
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    /// Rebuilds the model described by the checkpoint.
    pub fn generator(&self) -> Result<Generator> {
        let h = &self.header;
        let mut g = Generator::new(&h.model, h.ablation, h.reference_year, 0)?;
        let names: Vec<String> = h.params.iter().map(|p| p.name.clone()).collect();
        g.load_params(&names, self.params.clone())?;
        Ok(g)
    }

    pub fn optimizer(&self) -> Adam {
        Adam {
            lr: self.header.train.learning_rate as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: self.header.adam_step,
            m: self.adam_m.clone(),
            v: self.adam_v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.push(1);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.iter().chain(&self.adam_m).chain(&self.adam_v) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Container {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if bytes.len() < 9 || &bytes[..4] != CKPT_MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        if bytes[4] != 1 {
            return Err(bad("unsupported checkpoint version"));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let body = bytes.get(9..9 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut floats = bytes[9 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        if (bytes.len() - 9 - hlen) % 4 != 0 {
            return Err(bad("payload not a whole number of floats"));
        }
        let mut take = || -> Result<Vec<Tensor>> {
            header
                .params
                .iter()
                .map(|p| {
                    let n: usize = p.shape.iter().product();
                    let data: Vec<f32> = floats.by_ref().take(n).collect();
                    if data.len() != n {
                        return Err(bad("truncated payload"));
                    }
                    Ok(Tensor::new(p.shape.clone(), data))
                })
                .collect()
        };
        let params = take()?;
        let adam_m = take()?;
        let adam_v = take()?;
        if floats.next().is_some() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            header,
            params,
            adam_m,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Prediction from a checkpoint at one target date.
pub fn predict(checkpoint: &Checkpoint, input: &SequenceInput, target: CalendarDate) -> Result<LaplacePrediction> {
    checkpoint.generator()?.predict(input, target)
}

/// Mean likelihood and absolute error of a model on stored samples.
pub fn score(gen: &Generator, samples: &[(MultimodalSample, SampleMeta)]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::NoValidElements);
    }
    let (mut nll, mut mae) = (0.0, 0.0);
    for (s, _) in samples {
        let p = gen.predict(&s.input, s.target_date)?;
        let (h, w) = (s.height(), s.width());
        let y = s.target.clone().reshape(vec![1, 4, h, w]);
        nll += nll_laplace(&y, &p, &vec![true; h * w])?;
        mae += p
            .mu_clipped()
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / y.len() as f64;
    }
    let n = samples.len() as f64;
    Ok((nll / n, mae / n))
}

struct TrainScene {
    spec: SceneSpec,
    optical: Vec<CalendarDate>,
    radar: Vec<CalendarDate>,
}

fn load_train_scenes(dataset: &Dataset) -> Result<Vec<TrainScene>> {
    dataset
        .sample_dirs(Split::Train)
        .iter()
        .map(|dir| {
            let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
            let spec = dataset.scene_of(&meta)?;
            let (optical, radar) = window_calendars(&spec, meta.window_start, meta.window_end);
            Ok(TrainScene { spec, optical, radar })
        })
        .collect()
}

/// Draws one epoch of selections and groups them into equal-length batches.
fn epoch_batches(
    scenes: &[TrainScene],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<(usize, Selection)>>, usize)> {
    let mut groups: BTreeMap<usize, Vec<(usize, Selection)>> = BTreeMap::new();
    let mut skipped = 0;
    for (i, sc) in scenes.iter().enumerate() {
        let radar: &[CalendarDate] = if cfg.ablation.optical_only { &[] } else { &sc.radar };
        match select_target(&sc.optical, radar, rng, &cfg.selection) {
            Ok(sel) => {
                let sel = truncate_sequence(sel, rng, &cfg.selection);
                sel.check()?;
                groups.entry(sel.len()).or_default().push((i, sel));
            }
            Err(Error::SkipSample(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let mut batches = Vec::new();
    for (_, mut items) in groups {
        items.shuffle(rng);
        let mut it = items.into_iter().peekable();
        while it.peek().is_some() {
            batches.push(it.by_ref().take(cfg.batch_size).collect());
        }
    }
    batches.shuffle(rng);
    Ok((batches, skipped))
}

/// Trains a model on a dataset. `on_epoch` sees every epoch summary,
/// including the initial one; when `run_dir` is given the latest checkpoint
/// is written there after each epoch.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let stats = dataset.manifest.sar_stats;
    let year = dataset.manifest.config.scene.year;
    let mut gen = Generator::new(model_cfg, cfg.ablation, year, cfg.seed)?;
    let mut adam = Adam::new(gen.params(), cfg.learning_rate as f32);
    let scenes = load_train_scenes(dataset)?;
    let mut val = dataset.load_split(Split::Val)?;
    if cfg.val_samples > 0 {
        val.truncate(cfg.val_samples);
    }
    let validate = |gen: &Generator| -> Result<(Option<f64>, Option<f64>)> {
        if val.is_empty() {
            return Ok((None, None));
        }
        let (nll, mae) = score(gen, &val)?;
        Ok((Some(nll), Some(mae)))
    };
    let (val_nll, val_mae) = validate(&gen)?;
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss: None,
        val_nll,
        val_mae,
        batches: 0,
        skipped: 0,
    }];
    on_epoch(&history[0]);
    let save = |gen: &Generator, adam: &Adam, history: &[EpochStats]| -> Result<Checkpoint> {
        let ck = Checkpoint::capture(gen, adam, stats, cfg, history);
        if let Some(dir) = run_dir {
            ck.save(&dir.join("checkpoint.ckpt"))?;
        }
        Ok(ck)
    };
    let mut ck = save(&gen, &adam, &history)?;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x1000 + epoch as u64));
        let (batches, skipped) = epoch_batches(&scenes, cfg, &mut rng)?;
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let samples: Vec<MultimodalSample> =
                batch.iter().map(|(i, sel)| materialize(&scenes[*i].spec, sel, Some(&stats))).collect();
            let loss = train_step(&mut gen, &mut adam, &samples, cfg.grad_clip as f32)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss });
            }
            total += loss as f64;
        }
        let (val_nll, val_mae) = validate(&gen)?;
        let st = EpochStats {
            epoch,
            train_loss: (!batches.is_empty()).then(|| total / batches.len() as f64),
            val_nll,
            val_mae,
            batches: batches.len(),
            skipped,
        };
        on_epoch(&st);
        history.push(st);
        ck = save(&gen, &adam, &history)?;
    }
    Ok(ck)
}

/// One optimiser step on a batch of equal-length samples; returns the loss.
pub fn train_step(gen: &mut Generator, adam: &mut Adam, samples: &[MultimodalSample], clip: f32) -> Result<f32> {
    let first = samples.first().ok_or(Error::EmptySequence)?;
    let (h, w) = (first.height(), first.width());
    let mut target = Vec::with_capacity(samples.len() * 4 * h * w);
    for s in samples {
        target.extend_from_slice(s.target.data());
    }
    let target = Tensor::new(vec![samples.len(), 4, h, w], target);
    let mut g = Graph::training();
    let batch: Vec<(&SequenceInput, CalendarDate)> = samples.iter().map(|s| (&s.input, s.target_date)).collect();
    let pass = gen.forward(&mut g, &batch)?;
    let loss = g.laplace_nll(pass.output, &target, &vec![true; samples.len() * h * w]);
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss, gen.params().len());
    adam.update(gen.params_mut(), &grads, clip);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthscene::{make_dataset, DataConfig};

    fn calendar(step: i64, n: usize) -> Vec<CalendarDate> {
        let base = CalendarDate::new(2020, 60).unwrap();
        (0..n).map(|i| base.add_days(step * i as i64)).collect()
    }

    #[test]
    fn extrapolation_always_takes_last_date() {
        let opt = calendar(5, 12);
        let sar: Vec<_> = calendar(6, 12).iter().map(|d| d.add_days(2)).collect();
        let cfg = SelectionConfig {
            p_extrapolation: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let s = select_target(&opt, &sar, &mut rng, &cfg).unwrap();
            assert_eq!(s.target, *opt.last().unwrap());
            assert_eq!(s.mode, TargetMode::Extrapolation);
            assert!(s.optical.iter().chain(&s.radar).all(|d| *d < s.target));
            s.check().unwrap();
        }
    }

    #[test]
    fn zero_gap_keeps_adjacent_dates() {
        let opt = calendar(5, 9);
        let cfg = SelectionConfig {
            p_extrapolation: 0.0,
            min_gap_days: [0, 0],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = select_target(&opt, &[], &mut rng, &cfg).unwrap();
        assert_eq!(s.optical.len(), 8);
        assert!(s.optical.iter().any(|d| d.days_since(s.target).abs() == 5));
    }

    #[test]
    fn twenty_day_gap_on_five_day_calendar() {
        let opt = calendar(5, 30);
        let cfg = SelectionConfig {
            p_extrapolation: 0.0,
            min_gap_days: [20, 20],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..40 {
            let Ok(s) = select_target(&opt, &[], &mut rng, &cfg) else { continue };
            for side in [-1i64, 1] {
                let slots = opt
                    .iter()
                    .filter(|d| {
                        let dd = d.days_since(s.target) * side;
                        dd > 0 && dd < 20
                    })
                    .count();
                let kept = s
                    .optical
                    .iter()
                    .filter(|d| {
                        let dd = d.days_since(s.target) * side;
                        dd > 0 && dd < 20
                    })
                    .count();
                assert_eq!(kept, 0);
                let edge = (s.target.days_since(opt[0]) / 5) as usize;
                let room = if side < 0 { edge } else { opt.len() - 1 - edge };
                assert_eq!(slots, room.min(3));
            }
            let nearest = s.optical.iter().map(|d| d.days_since(s.target).abs()).min().unwrap();
            assert!(nearest >= 20);
        }
    }

    #[test]
    fn too_short_sequences_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SelectionConfig::default();
        assert!(matches!(select_target(&calendar(5, 2), &[], &mut rng, &cfg), Err(Error::SkipSample(_))));
        let wide = SelectionConfig {
            min_gap_days: [100, 100],
            ..Default::default()
        };
        assert!(matches!(select_target(&calendar(5, 5), &[], &mut rng, &wide), Err(Error::SkipSample(_))));
    }

    fn pool() -> Selection {
        Selection {
            target: CalendarDate::new(2020, 150).unwrap(),
            mode: TargetMode::Interpolation,
            min_gap_days: 0,
            optical: calendar(10, 4).into_iter().chain(calendar(10, 4).into_iter().map(|d| d.add_days(120))).collect(),
            radar: calendar(6, 8),
        }
    }

    #[test]
    fn fixed_range_keeps_exactly_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in 1..=8 {
            let cfg = SelectionConfig {
                truncation: [k, k],
                ..Default::default()
            };
            let s = truncate_sequence(pool(), &mut rng, &cfg);
            assert_eq!(s.len(), k);
            assert!(!s.optical.is_empty());
            if k >= 2 {
                assert!(s.optical.iter().any(|d| *d < s.target) && s.optical.iter().any(|d| *d > s.target));
            }
        }
    }

    #[test]
    fn truncation_is_reproducible() {
        let cfg = SelectionConfig::default();
        let a = truncate_sequence(pool(), &mut ChaCha8Rng::seed_from_u64(6), &cfg);
        let b = truncate_sequence(pool(), &mut ChaCha8Rng::seed_from_u64(6), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_sizes_are_uniform() {
        let cfg = SelectionConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 9];
        for _ in 0..1000 {
            counts[truncate_sequence(pool(), &mut rng, &cfg).len()] += 1;
        }
        let expected = 1000.0 / 7.0;
        let chi2: f64 = counts[2..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-squared with 6 degrees of freedom.
        assert!(chi2 < 22.46, "chi2 = {chi2}, counts {counts:?}");
        assert_eq!(counts[0] + counts[1], 0);
    }

    fn tiny_setup(dir: &Path) -> (Dataset, ModelConfig, TrainConfig) {
        let mut data = DataConfig {
            n_samples: 24,
            val_fraction: 0.25,
            test_fraction: 0.0,
            ..Default::default()
        };
        data.scene.patch_size = 8;
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..Default::default()
        };
        make_dataset(&data, &tc.selection, 3, dir).unwrap();
        let mc = ModelConfig {
            d_feat: 6,
            d_time: 4,
            time_hidden: 4,
            d_dec: 6,
            n_layers: 1,
            n_heads: 2,
            spp_scales: vec![1, 2],
        };
        (Dataset::open(dir).unwrap(), mc, tc)
    }

    #[test]
    fn zero_epochs_returns_initialisation_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, mc, mut tc) = tiny_setup(dir.path());
        tc.epochs = 0;
        let ck = train(&ds, &mc, &tc, Some(dir.path()), &mut |_| {}).unwrap();
        let init = Generator::new(&mc, tc.ablation, 2020, tc.seed).unwrap();
        assert_eq!(ck.params, init.params().tensors());
        let loaded = Checkpoint::load(&dir.path().join("checkpoint.ckpt")).unwrap();
        assert_eq!(loaded.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, mc, tc) = tiny_setup(dir.path());
        let a = train(&ds, &mc, &tc, None, &mut |_| {}).unwrap();
        let b = train(&ds, &mc, &tc, None, &mut |_| {}).unwrap();
        assert_eq!(a.header.history, b.header.history);
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(a.header.history[1].train_loss.unwrap().is_finite());
        let path = dir.path().join("a.ckpt");
        a.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, a);
        let (s, _) = &ds.load_split(Split::Val).unwrap()[0];
        let p1 = predict(&a, &s.input, s.target_date).unwrap();
        let p2 = predict(&back, &s.input, s.target_date).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1.mu), bits(&p2.mu));
        assert_eq!(bits(&p1.log_b), bits(&p2.log_b));
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, mc, mut tc) = tiny_setup(dir.path());
        tc.epochs = 0;
        let ck = train(&ds, &mc, &tc, None, &mut |_| {}).unwrap();
        let bytes = ck.to_bytes();
        let p = Path::new("c");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[1..], p).is_err());
    }
}
