//! The full generator: per-modality encoders, date projections, fusion stack
//! and probabilistic head, evaluated for one target date per batch element.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::date::CalendarDate;
use crate::error::{Error, Result};
use crate::laplace_head::{LaplaceHead, LaplacePrediction};
use crate::nn::{Graph, ParamStore, Tensor, TokenSource, Var};
use crate::spatial_encoder::{Modality, SpatialEncoder};
use crate::temporal_fusion::{AttentionRecord, TemporalFusion};
use crate::timecode::{codes_tensor, encode_relative, encode_target, RawCode, TimeProjection};

/// Maximum number of acquisitions fed to the model.
pub const MAX_SEQ_LEN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub d_time: usize,
    pub time_hidden: usize,
    pub d_dec: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub spp_scales: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_feat: 64,
            d_time: 30,
            time_hidden: 32,
            d_dec: 32,
            n_layers: 3,
            n_heads: 4,
            spp_scales: vec![1, 2, 4],
        }
    }
}

impl ModelConfig {
    /// Token width: features, date embedding and the two-way modality tag.
    pub fn d_tok(&self) -> usize {
        self.d_feat + self.d_time + 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_feat == 0 || self.d_time == 0 || self.time_hidden == 0 || self.d_dec == 0 || self.n_layers == 0 {
            return bad("model widths and depth must be positive".into());
        }
        if self.n_heads == 0 || self.d_tok() % self.n_heads != 0 {
            return bad(format!("token width {} not divisible by {} heads", self.d_tok(), self.n_heads));
        }
        if self.spp_scales.iter().any(|&s| s == 0) {
            return bad("pyramid scales must be positive".into());
        }
        Ok(())
    }
}

/// Variants used by the ablation studies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop every radar token.
    pub optical_only: bool,
    /// Encode input dates on the absolute annual cycle instead of relative to the target.
    pub absolute_time: bool,
}

impl Ablation {
    pub fn name(&self) -> &'static str {
        match (self.optical_only, self.absolute_time) {
            (false, false) => "full",
            (true, false) => "optical_only",
            (false, true) => "absolute_time",
            (true, true) => "optical_only_absolute_time",
        }
    }
}

/// Acquisitions available for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceInput {
    /// `[T_opt, 4, H, W]` reflectances.
    pub optical: Tensor,
    pub optical_dates: Vec<CalendarDate>,
    /// `[T_sar, 2, H, W]` standardised backscatter; `T_sar` may be 0.
    pub radar: Tensor,
    pub radar_dates: Vec<CalendarDate>,
}

impl SequenceInput {
    pub fn height(&self) -> usize {
        self.optical.dim(2)
    }

    pub fn width(&self) -> usize {
        self.optical.dim(3)
    }

    pub fn n_optical(&self) -> usize {
        self.optical_dates.len()
    }

    pub fn n_radar(&self) -> usize {
        self.radar_dates.len()
    }

    pub fn len(&self) -> usize {
        self.n_optical() + self.n_radar()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptySequence);
        }
        if self.optical.ndim() != 4 || self.radar.ndim() != 4 {
            return Err(Error::Shape("acquisition stacks must be [T, C, H, W]".into()));
        }
        if self.optical.dim(0) != self.optical_dates.len() {
            return Err(Error::DateCount {
                dates: self.optical_dates.len(),
                acquisitions: self.optical.dim(0),
            });
        }
        if self.radar.dim(0) != self.radar_dates.len() {
            return Err(Error::DateCount {
                dates: self.radar_dates.len(),
                acquisitions: self.radar.dim(0),
            });
        }
        for (t, m) in [(&self.optical, Modality::Optical), (&self.radar, Modality::Radar)] {
            if t.dim(1) != m.channels() {
                return Err(Error::ChannelMismatch {
                    modality: m.name(),
                    expected: m.channels(),
                    got: t.dim(1),
                });
            }
        }
        if self.radar.shape()[2..] != self.optical.shape()[2..] {
            return Err(Error::Shape("optical and radar patches differ in size".into()));
        }
        if self.n_optical() == 0 {
            return Err(Error::NoOptical);
        }
        Ok(())
    }

    /// Drops the radar stack.
    pub fn without_radar(&self) -> Self {
        Self {
            optical: self.optical.clone(),
            optical_dates: self.optical_dates.clone(),
            radar: Tensor::zeros(&[0, 2, self.height(), self.width()]),
            radar_dates: Vec::new(),
        }
    }
}

/// Raw decoder output and attention nodes of a batched forward pass.
pub struct ForwardPass {
    /// `[B, 8, H, W]`: four locations then four raw log-scales.
    pub output: Var,
    pub attention: Vec<Var>,
    pub batch: usize,
    pub pixels: usize,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: ModelConfig,
    ablation: Ablation,
    reference_year: i32,
    store: ParamStore,
    optical_encoder: SpatialEncoder,
    radar_encoder: SpatialEncoder,
    input_time: TimeProjection,
    target_time: TimeProjection,
    fusion: TemporalFusion,
    head: LaplaceHead,
}

impl Generator {
    /// Builds a freshly initialised model. Parameter creation order is fixed,
    /// so the same seed yields the same parameters.
    pub fn new(config: &ModelConfig, ablation: Ablation, reference_year: i32, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let optical_encoder = SpatialEncoder::new(&mut store, Modality::Optical, c.d_feat, &c.spp_scales, &mut rng);
        let radar_encoder = SpatialEncoder::new(&mut store, Modality::Radar, c.d_feat, &c.spp_scales, &mut rng);
        let input_time = TimeProjection::new(&mut store, "time.input", c.time_hidden, c.d_time, &mut rng);
        let target_time = TimeProjection::new(&mut store, "time.target", c.d_tok(), c.d_tok(), &mut rng);
        let fusion = TemporalFusion::new(&mut store, c.d_tok(), c.n_layers, c.n_heads, &mut rng)?;
        let head = LaplaceHead::new(&mut store, c.d_tok(), c.d_dec, &mut rng);
        Ok(Self {
            config: config.clone(),
            ablation,
            reference_year,
            store,
            optical_encoder,
            radar_encoder,
            input_time,
            target_time,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn reference_year(&self) -> i32 {
        self.reference_year
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces every parameter tensor; names and shapes must match.
    pub fn load_params(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<()> {
        if names != self.store.names() || tensors.len() != self.store.len() {
            return Err(Error::Shape("parameter names do not match the model layout".into()));
        }
        for (dst, src) in self.store.tensors_mut().iter_mut().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Shape(format!("parameter shape {:?} vs {:?}", dst.shape(), src.shape())));
            }
            *dst = src;
        }
        Ok(())
    }

    fn input_code(&self, d: CalendarDate, target: CalendarDate) -> RawCode {
        if self.ablation.absolute_time {
            encode_target(d, self.reference_year)
        } else {
            encode_relative(d, target)
        }
    }

    /// Records the forward pass of a batch on `g`. Every element must carry
    /// the same number of effective tokens.
    pub fn forward(&self, g: &mut Graph, batch: &[(&SequenceInput, CalendarDate)]) -> Result<ForwardPass> {
        let Some(&(first, _)) = batch.first() else {
            return Err(Error::EmptySequence);
        };
        let (h, w) = (first.height(), first.width());
        let use_radar = !self.ablation.optical_only;
        let t_of = |s: &SequenceInput| s.n_optical() + if use_radar { s.n_radar() } else { 0 };
        let tokens = t_of(first);
        let (mut opt, mut sar) = (Vec::new(), Vec::new());
        let (mut opt_codes, mut sar_codes, mut layout) = (Vec::new(), Vec::new(), Vec::new());
        let (mut n_opt, mut n_sar) = (0, 0);
        for &(input, target) in batch {
            input.validate()?;
            if (input.height(), input.width()) != (h, w) {
                return Err(Error::Shape("batch elements differ in patch size".into()));
            }
            if t_of(input) != tokens {
                return Err(Error::Shape("batch elements differ in sequence length".into()));
            }
            if tokens > MAX_SEQ_LEN {
                return Err(Error::SequenceTooLong(tokens));
            }
            let mut order = Vec::with_capacity(tokens);
            opt.extend_from_slice(input.optical.data());
            for &d in &input.optical_dates {
                order.push(TokenSource::Optical(n_opt));
                opt_codes.push(self.input_code(d, target));
                n_opt += 1;
            }
            if use_radar {
                sar.extend_from_slice(input.radar.data());
                for &d in &input.radar_dates {
                    order.push(TokenSource::Radar(n_sar));
                    sar_codes.push(self.input_code(d, target));
                    n_sar += 1;
                }
            }
            layout.push(order);
        }
        let x = g.input(Tensor::new(vec![n_opt, 4, h, w], opt));
        let opt_feat = self.optical_encoder.forward(g, &self.store, x)?;
        let c = g.input(codes_tensor(&opt_codes));
        let opt_time = self.input_time.forward(g, &self.store, c);
        let sar_pair = if n_sar > 0 {
            let x = g.input(Tensor::new(vec![n_sar, 2, h, w], sar));
            let f = self.radar_encoder.forward(g, &self.store, x)?;
            let c = g.input(codes_tensor(&sar_codes));
            Some((f, self.input_time.forward(g, &self.store, c)))
        } else {
            None
        };
        let tok = g.assemble_tokens(opt_feat, opt_time, sar_pair, layout);
        let b = batch.len();
        let (h2, w2) = (h / 2, w / 2);
        let target_codes: Vec<RawCode> = batch.iter().map(|&(_, d)| encode_target(d, self.reference_year)).collect();
        let tc = g.input(codes_tensor(&target_codes));
        let q0 = self.target_time.forward(g, &self.store, tc);
        let q = g.repeat_rows(q0, h2 * w2);
        let (latent, attention) = self.fusion.forward(g, &self.store, tok, q);
        let map = g.rows_to_map(latent, b, h2, w2);
        let output = self.head.forward(g, &self.store, map);
        Ok(ForwardPass {
            output,
            attention,
            batch: b,
            pixels: h2 * w2,
        })
    }

    /// Deterministic prediction at one target date.
    pub fn predict(&self, input: &SequenceInput, target: CalendarDate) -> Result<LaplacePrediction> {
        let mut g = Graph::inference();
        let pass = self.forward(&mut g, &[(input, target)])?;
        Ok(LaplacePrediction::from_raw(g.value(pass.output)))
    }

    /// Prediction plus the attention weights of every layer and head.
    pub fn predict_with_attention(
        &self,
        input: &SequenceInput,
        target: CalendarDate,
    ) -> Result<(LaplacePrediction, AttentionRecord)> {
        let mut g = Graph::inference();
        let pass = self.forward(&mut g, &[(input, target)])?;
        let rec = AttentionRecord::from_graph(&g, &pass.attention, pass.batch, pass.pixels);
        Ok((LaplacePrediction::from_raw(g.value(pass.output)), rec))
    }

    /// One independent forward pass per target date; the inputs are shared.
    pub fn predict_dates(&self, input: &SequenceInput, targets: &[CalendarDate]) -> Result<Vec<LaplacePrediction>> {
        targets.iter().map(|&d| self.predict(input, d)).collect()
    }
}
