//! Per-pixel spatio-temporal tokens and the target-queried cross-attention stack.
//!
//! Every acquisition contributes one token per pixel of the half-resolution
//! feature grid: `[feature ‖ projected date code ‖ modality one-hot]`. A stack
//! of pre-norm cross-attention layers then refines a per-pixel query that
//! starts as the projected target-date code; the output of layer `l` is the
//! query of layer `l + 1`. Tokens never attend to each other.

use rand::Rng;

use crate::date::CalendarDate;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, TokenSource, Var};
use crate::spatial_encoder::{FeatureMap, Modality};
use crate::timecode::{codes_tensor, encode_relative, TimeProjection};

/// Token rows `[B·P·T, d_tok]`, ordered by batch, pixel, then token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    pub tokens: Tensor,
    pub batch: usize,
    pub pixels: usize,
    pub per_pixel: usize,
}

impl TokenTensor {
    pub fn d_tok(&self) -> usize {
        self.tokens.dim(1)
    }

    /// Token `t` of pixel `p` in batch element `b`.
    pub fn token(&self, b: usize, p: usize, t: usize) -> &[f32] {
        self.tokens.outer((b * self.pixels + p) * self.per_pixel + t)
    }
}

/// Softmax weights of every layer and head, `[layers, heads, B, P, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub weights: Vec<f32>,
    pub layers: usize,
    pub heads: usize,
    pub batch: usize,
    pub pixels: usize,
    pub tokens: usize,
}

impl AttentionRecord {
    /// Weights over tokens for one `(layer, head, batch, pixel)`.
    pub fn row(&self, layer: usize, head: usize, b: usize, p: usize) -> &[f32] {
        let i = (((layer * self.heads + head) * self.batch + b) * self.pixels + p) * self.tokens;
        &self.weights[i..i + self.tokens]
    }

    /// Gathers the per-layer attention nodes of a forward pass.
    pub fn from_graph(g: &Graph, nodes: &[Var], batch: usize, pixels: usize) -> Self {
        let (_, heads, tokens) = g.attention_weights(nodes[0]).expect("attention node");
        let mut weights = Vec::with_capacity(nodes.len() * heads * batch * pixels * tokens);
        for &node in nodes {
            let (w, _, _) = g.attention_weights(node).expect("attention node");
            for h in 0..heads {
                for gi in 0..batch * pixels {
                    weights.extend_from_slice(&w[(gi * heads + h) * tokens..(gi * heads + h + 1) * tokens]);
                }
            }
        }
        Self {
            weights,
            layers: nodes.len(),
            heads,
            batch,
            pixels,
            tokens,
        }
    }
}

type Affine = (ParamId, ParamId);

#[derive(Clone, Debug)]
struct FusionLayer {
    ln_q: Affine,
    ln_kv: Affine,
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    ln_ff: Affine,
    ff1: Affine,
    ff2: Affine,
}

#[derive(Clone, Debug)]
pub struct TemporalFusion {
    layers: Vec<FusionLayer>,
    final_ln: Affine,
    n_heads: usize,
    d_tok: usize,
}

impl TemporalFusion {
    pub fn new<R: Rng>(store: &mut ParamStore, d_tok: usize, n_layers: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || d_tok % n_heads != 0 {
            return Err(Error::Shape(format!(
                "token width {d_tok} not divisible by {n_heads} heads"
            )));
        }
        let norm = |store: &mut ParamStore, name: String| {
            (
                store.add_const(&format!("{name}.g"), &[d_tok], 1.0),
                store.add_const(&format!("{name}.b"), &[d_tok], 0.0),
            )
        };
        let dense = |store: &mut ParamStore, rng: &mut R, name: String, i: usize, o: usize, std: f32| {
            (
                store.add_normal(&format!("{name}.w"), &[i, o], std, rng),
                store.add_const(&format!("{name}.b"), &[o], 0.0),
            )
        };
        let xavier = (1.0 / d_tok as f32).sqrt();
        let layers = (0..n_layers)
            .map(|l| {
                let p = format!("fusion.{l}");
                FusionLayer {
                    ln_q: norm(store, format!("{p}.ln_q")),
                    ln_kv: norm(store, format!("{p}.ln_kv")),
                    q: dense(store, rng, format!("{p}.q"), d_tok, d_tok, xavier),
                    k: dense(store, rng, format!("{p}.k"), d_tok, d_tok, xavier),
                    v: dense(store, rng, format!("{p}.v"), d_tok, d_tok, xavier),
                    o: dense(store, rng, format!("{p}.o"), d_tok, d_tok, 0.5 * xavier),
                    ln_ff: norm(store, format!("{p}.ln_ff")),
                    ff1: dense(store, rng, format!("{p}.ff1"), d_tok, 2 * d_tok, (2.0 / d_tok as f32).sqrt()),
                    ff2: dense(store, rng, format!("{p}.ff2"), 2 * d_tok, d_tok, 0.5 * (1.0 / d_tok as f32).sqrt()),
                }
            })
            .collect();
        let final_ln = norm(store, "fusion.ln_out".into());
        Ok(Self {
            layers,
            final_ln,
            n_heads,
            d_tok,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_tok(&self) -> usize {
        self.d_tok
    }

    /// Runs the stack. `tokens [G·T, D]`, `query [G, D]`; returns the latent
    /// `[G, D]` and the attention node of each layer.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, query: Var) -> (Var, Vec<Var>) {
        let bind2 = |g: &mut Graph, (a, b): Affine| (store.bind(g, a), store.bind(g, b));
        let mut q = query;
        let mut attn_nodes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (lg, lb) = bind2(g, layer.ln_q);
            let qn = g.layer_norm(q, lg, lb);
            let (lg, lb) = bind2(g, layer.ln_kv);
            let kvn = g.layer_norm(tokens, lg, lb);
            let (w, b) = bind2(g, layer.q);
            let qp = g.linear(qn, w, b);
            let (w, b) = bind2(g, layer.k);
            let kp = g.linear(kvn, w, b);
            let (w, b) = bind2(g, layer.v);
            let vp = g.linear(kvn, w, b);
            let att = g.attention(qp, kp, vp, self.n_heads);
            attn_nodes.push(att);
            let (w, b) = bind2(g, layer.o);
            let o = g.linear(att, w, b);
            q = g.add(q, o);
            let (lg, lb) = bind2(g, layer.ln_ff);
            let f = g.layer_norm(q, lg, lb);
            let (w, b) = bind2(g, layer.ff1);
            let f = g.linear(f, w, b);
            let f = g.relu(f);
            let (w, b) = bind2(g, layer.ff2);
            let f = g.linear(f, w, b);
            q = g.add(q, f);
        }
        let (lg, lb) = bind2(g, self.final_ln);
        (g.layer_norm(q, lg, lb), attn_nodes)
    }
}

/// Builds tokens for a batch whose elements share the optical and radar
/// counts. `opt_dates[b]` / `sar_dates[b]` list each element's dates; the
/// feature maps hold the acquisitions flattened in the same order.
pub fn build_tokens(
    opt_feat: &FeatureMap,
    sar_feat: Option<&FeatureMap>,
    opt_dates: &[Vec<CalendarDate>],
    sar_dates: &[Vec<CalendarDate>],
    d_target: &[CalendarDate],
    time_proj: &TimeProjection,
    store: &ParamStore,
) -> Result<TokenTensor> {
    let batch = d_target.len();
    let n_opt: usize = opt_dates.iter().map(Vec::len).sum();
    let n_sar: usize = sar_dates.iter().map(Vec::len).sum();
    if opt_dates.len() != batch || sar_dates.len() != batch {
        return Err(Error::Shape("date lists do not match batch size".into()));
    }
    if opt_feat.values.dim(0) != n_opt {
        return Err(Error::DateCount {
            dates: n_opt,
            acquisitions: opt_feat.values.dim(0),
        });
    }
    let sar_count = sar_feat.map_or(0, |f| f.values.dim(0));
    if sar_count != n_sar {
        return Err(Error::DateCount {
            dates: n_sar,
            acquisitions: sar_count,
        });
    }
    if let Some(sf) = sar_feat {
        if sf.values.shape()[1..] != opt_feat.values.shape()[1..] {
            return Err(Error::Shape("optical and radar feature maps differ in size".into()));
        }
    }
    let (mut opt_codes, mut sar_codes, mut layout) = (Vec::new(), Vec::new(), Vec::new());
    for b in 0..batch {
        let mut order = Vec::new();
        for &d in &opt_dates[b] {
            order.push(TokenSource::Optical(opt_codes.len()));
            opt_codes.push(encode_relative(d, d_target[b]));
        }
        for &d in &sar_dates[b] {
            order.push(TokenSource::Radar(sar_codes.len()));
            sar_codes.push(encode_relative(d, d_target[b]));
        }
        layout.push(order);
    }
    let per_pixel = layout.first().map_or(0, Vec::len);
    if layout.iter().any(|l| l.len() != per_pixel) {
        return Err(Error::Shape("batch elements differ in token count".into()));
    }
    let mut g = Graph::inference();
    let of = g.input(opt_feat.values.clone());
    let oc = g.input(codes_tensor(&opt_codes));
    let ot = time_proj.forward(&mut g, store, oc);
    let sar = match sar_feat {
        Some(sf) if n_sar > 0 => {
            let f = g.input(sf.values.clone());
            let c = g.input(codes_tensor(&sar_codes));
            Some((f, time_proj.forward(&mut g, store, c)))
        }
        _ => None,
    };
    let tok = g.assemble_tokens(of, ot, sar, layout);
    let (h, w) = (opt_feat.values.dim(2), opt_feat.values.dim(3));
    Ok(TokenTensor {
        tokens: g.value(tok).clone(),
        batch,
        pixels: h * w,
        per_pixel,
    })
}

/// Runs the cross-attention stack with one target token per batch element,
/// broadcast over pixels. Returns the latent `[B, P, d_tok]`.
pub fn cross_attend(
    tokens: &TokenTensor,
    target_token: &Tensor,
    fusion: &TemporalFusion,
    store: &ParamStore,
    record: bool,
) -> Result<(Tensor, Option<AttentionRecord>)> {
    if tokens.per_pixel == 0 {
        return Err(Error::EmptySequence);
    }
    if tokens.d_tok() != fusion.d_tok || target_token.shape() != [tokens.batch, fusion.d_tok] {
        return Err(Error::Shape(format!(
            "token width {} / query {:?} do not match fusion width {}",
            tokens.d_tok(),
            target_token.shape(),
            fusion.d_tok
        )));
    }
    let mut g = Graph::inference();
    let t = g.input(tokens.tokens.clone());
    let q0 = g.input(target_token.clone());
    let q = g.repeat_rows(q0, tokens.pixels);
    let (latent, nodes) = fusion.forward(&mut g, store, t, q);
    let rec = record.then(|| AttentionRecord::from_graph(&g, &nodes, tokens.batch, tokens.pixels));
    let out = g
        .value(latent)
        .clone()
        .reshape(vec![tokens.batch, tokens.pixels, fusion.d_tok]);
    Ok((out, rec))
}

/// Modality of each token slot given an element's optical/radar counts.
pub fn token_modalities(n_optical: usize, n_radar: usize) -> Vec<Modality> {
    std::iter::repeat(Modality::Optical)
        .take(n_optical)
        .chain(std::iter::repeat(Modality::Radar).take(n_radar))
        .collect()
}
