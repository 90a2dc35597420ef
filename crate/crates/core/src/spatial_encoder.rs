//! Per-acquisition convolutional feature extraction with spatial pyramid pooling.
//!
//! Acquisitions are flattened to `(B·T) × C × H × W` and encoded one image at
//! a time: a stride-2 stem halves the resolution, two residual blocks refine
//! it, pyramid pooling at several grid sizes adds context, and a 1×1
//! convolution fuses everything to `d_feat` channels. Optical and radar
//! inputs get separate parameter sets of identical architecture.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Optical,
    Radar,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Optical => 4,
            Modality::Radar => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Optical => "optical",
            Modality::Radar => "radar",
        }
    }
}

/// Encoded features `[N, d_feat, H/2, W/2]` of `N` flattened acquisitions.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub modality: Modality,
}

#[derive(Clone, Debug)]
pub struct SpatialEncoder {
    modality: Modality,
    d_feat: usize,
    scales: Vec<usize>,
    stem: (ParamId, ParamId),
    blocks: [(ParamId, ParamId); 2],
    fuse: (ParamId, ParamId),
}

impl SpatialEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        modality: Modality,
        d_feat: usize,
        scales: &[usize],
        rng: &mut R,
    ) -> Self {
        let p = format!("enc.{}", modality.name());
        let c = modality.channels();
        let stem = (
            store.add_he(&format!("{p}.stem.w"), &[d_feat, c, 3, 3], c * 9, rng),
            store.add_const(&format!("{p}.stem.b"), &[d_feat], 0.0),
        );
        // Residual branches start small so each block is close to identity.
        let block = |i: usize, store: &mut ParamStore, rng: &mut R| {
            (
                store.add_normal(
                    &format!("{p}.res{i}.w"),
                    &[d_feat, d_feat, 3, 3],
                    0.5 * (2.0 / (d_feat * 9) as f32).sqrt(),
                    rng,
                ),
                store.add_const(&format!("{p}.res{i}.b"), &[d_feat], 0.0),
            )
        };
        let blocks = [block(0, store, rng), block(1, store, rng)];
        let cat = d_feat * (1 + scales.len());
        let fuse = (
            store.add_he(&format!("{p}.fuse.w"), &[d_feat, cat, 1, 1], cat, rng),
            store.add_const(&format!("{p}.fuse.b"), &[d_feat], 0.0),
        );
        Self {
            modality,
            d_feat,
            scales: scales.to_vec(),
            stem,
            blocks,
            fuse,
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.stem.0, self.stem.1];
        for (w, b) in self.blocks {
            v.extend([w, b]);
        }
        v.extend([self.fuse.0, self.fuse.1]);
        v
    }

    /// Checks an `[N, C, H, W]` input against this encoder's contract.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 {
            return Err(Error::Shape(format!("expected [N, C, H, W], got {shape:?}")));
        }
        if shape[1] != self.modality.channels() {
            return Err(Error::ChannelMismatch {
                modality: self.modality.name(),
                expected: self.modality.channels(),
                got: shape[1],
            });
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {}x{} must be divisible by 4",
                shape[2], shape[3]
            )));
        }
        let half = shape[2].min(shape[3]) / 2;
        if self.scales.iter().any(|&s| s == 0 || s > half) {
            return Err(Error::Shape(format!(
                "pyramid scales {:?} exceed feature size {half}",
                self.scales
            )));
        }
        Ok(())
    }

    /// Encodes flattened acquisitions `x [N, C, H, W]` on the tape.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let (w, b) = (store.bind(g, self.stem.0), store.bind(g, self.stem.1));
        let h = g.conv2d(x, w, b, 2, 1);
        let mut h = g.relu(h);
        for (wid, bid) in self.blocks {
            let (w, b) = (store.bind(g, wid), store.bind(g, bid));
            let r = g.conv2d(h, w, b, 1, 1);
            let r = g.relu(r);
            h = g.add(h, r);
        }
        let pooled = spp_graph(g, h, &self.scales);
        let (w, b) = (store.bind(g, self.fuse.0), store.bind(g, self.fuse.1));
        Ok(g.conv2d(pooled, w, b, 1, 0))
    }
}

fn spp_graph(g: &mut Graph, f: Var, scales: &[usize]) -> Var {
    let mut parts = vec![f];
    for &s in scales {
        parts.push(g.pyramid_pool(f, s));
    }
    g.concat_channels(&parts)
}

/// Spatial pyramid pooling: for each scale, average-pool to an `s × s` grid,
/// upsample back by nearest neighbour, and concatenate with the input.
/// Output has `c · (1 + scales.len())` channels.
pub fn spp(f: &Tensor, scales: &[usize]) -> Result<Tensor> {
    if f.ndim() != 4 {
        return Err(Error::Shape(format!("expected [N, C, h, w], got {:?}", f.shape())));
    }
    if let Some(&s) = scales.iter().find(|&&s| s == 0 || s > f.dim(2) || s > f.dim(3)) {
        return Err(Error::Shape(format!(
            "pyramid scale {s} exceeds {}x{}",
            f.dim(2),
            f.dim(3)
        )));
    }
    let mut g = Graph::inference();
    let x = g.input(f.clone());
    let y = spp_graph(&mut g, x, scales);
    Ok(g.value(y).clone())
}

/// Encodes a `[B, T, C, H, W]` stack, flattening batch and time.
pub fn encode_acquisitions(x: &Tensor, encoder: &SpatialEncoder, store: &ParamStore) -> Result<FeatureMap> {
    if x.ndim() != 5 {
        return Err(Error::Shape(format!("expected [B, T, C, H, W], got {:?}", x.shape())));
    }
    let s = x.shape();
    let flat = x.clone().reshape(vec![s[0] * s[1], s[2], s[3], s[4]]);
    let mut g = Graph::inference();
    let input = g.input(flat);
    let y = encoder.forward(&mut g, store, input)?;
    Ok(FeatureMap {
        values: g.value(y).clone(),
        modality: encoder.modality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(modality: Modality, seed: u64) -> (ParamStore, SpatialEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = SpatialEncoder::new(&mut store, modality, 8, &[1, 2, 4], &mut rng);
        (store, enc)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let (store, enc) = encoder(Modality::Optical, 1);
        let out = encode_acquisitions(&Tensor::zeros(&[1, 2, 4, 8, 8]), &enc, &store).unwrap();
        assert_eq!(out.values.shape(), &[2, 8, 4, 4]);
        assert!(out.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_contract() {
        let (store, enc) = encoder(Modality::Optical, 1);
        let out = encode_acquisitions(&random(&[2, 3, 4, 32, 32], 3), &enc, &store).unwrap();
        assert_eq!(out.values.shape(), &[6, 8, 16, 16]);
        assert!(out.values.is_finite());
    }

    #[test]
    fn rejects_bad_channels_and_dims() {
        let (store, enc) = encoder(Modality::Radar, 1);
        let e = encode_acquisitions(&random(&[1, 1, 4, 8, 8], 0), &enc, &store).unwrap_err();
        assert!(matches!(e, Error::ChannelMismatch { expected: 2, got: 4, .. }));
        let e = encode_acquisitions(&random(&[1, 1, 2, 10, 8], 0), &enc, &store).unwrap_err();
        assert!(matches!(e, Error::Shape(_)));
    }

    #[test]
    fn duplicate_and_permuted_acquisitions() {
        let (store, enc) = encoder(Modality::Optical, 2);
        let a = random(&[4, 8, 8], 10);
        let b = random(&[4, 8, 8], 11);
        let seq = Tensor::stack(&[&a, &b, &a]).reshape(vec![1, 3, 4, 8, 8]);
        let out = encode_acquisitions(&seq, &enc, &store).unwrap().values;
        assert_eq!(out.outer(0), out.outer(2));
        let perm = Tensor::stack(&[&b, &a, &a]).reshape(vec![1, 3, 4, 8, 8]);
        let out_p = encode_acquisitions(&perm, &enc, &store).unwrap().values;
        assert_eq!(out_p.outer(0), out.outer(1));
        assert_eq!(out_p.outer(1), out.outer(0));
    }

    #[test]
    fn modalities_do_not_share_weights() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let opt = SpatialEncoder::new(&mut store, Modality::Optical, 8, &[1, 2], &mut rng);
        let sar = SpatialEncoder::new(&mut store, Modality::Radar, 8, &[1, 2], &mut rng);
        assert!(opt.params().iter().all(|p| !sar.params().contains(p)));
        // Same-shaped input through the radar stem vs. an optical stem cut to two channels.
        let x = random(&[1, 1, 2, 8, 8], 7);
        let r = encode_acquisitions(&x, &sar, &store).unwrap().values;
        let x4 = Tensor::new(vec![1, 1, 4, 8, 8], [x.data(), x.data()].concat());
        let o = encode_acquisitions(&x4, &opt, &store).unwrap().values;
        assert_ne!(r, o);
    }

    #[test]
    fn spp_of_constant_is_constant() {
        let f = Tensor::full(&[1, 2, 4, 4], 0.7);
        let out = spp(&f, &[1, 2, 4]).unwrap();
        assert_eq!(out.shape(), &[1, 8, 4, 4]);
        assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn spp_scale_one_is_global_mean() {
        let f = random(&[1, 1, 4, 4], 9);
        let mean = f.data().iter().sum::<f32>() / 16.0;
        let out = spp(&f, &[1]).unwrap();
        assert!(out.data()[16..].iter().all(|&v| (v - mean).abs() < 1e-6));
        assert_eq!(&out.data()[..16], f.data());
    }

    #[test]
    fn spp_scale_two_hand_table() {
        #[rustfmt::skip]
        let vals = vec![
            1.0, 2.0, 3.0, 4.0,
            5.0, 6.0, 7.0, 8.0,
            9.0, 10.0, 11.0, 12.0,
            13.0, 14.0, 15.0, 16.0,
        ];
        let f = Tensor::new(vec![1, 1, 4, 4], vals);
        let out = spp(&f, &[2]).unwrap();
        // Block means: TL (1+2+5+6)/4 = 3.5, TR 5.5, BL 11.5, BR 13.5.
        #[rustfmt::skip]
        let expect = [
            3.5, 3.5, 5.5, 5.5,
            3.5, 3.5, 5.5, 5.5,
            11.5, 11.5, 13.5, 13.5,
            11.5, 11.5, 13.5, 13.5,
        ];
        assert_eq!(&out.data()[16..], &expect);
    }

    #[test]
    fn spp_rejects_oversized_scale() {
        assert!(spp(&Tensor::zeros(&[1, 1, 2, 2]), &[4]).is_err());
    }
}
