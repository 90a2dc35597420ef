//! Date encodings for the target query and for input acquisitions.
//!
//! The target date is encoded on the annual cycle relative to a reference
//! year; each input date is encoded by its signed offset to the target in
//! years, so the sinusoid has an annual period and the sign tells past from
//! future. Both raw triples are lifted to token width by small MLPs.

use std::f64::consts::TAU;

use rand::Rng;

use crate::date::CalendarDate;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

pub const DAYS_PER_YEAR: f64 = 365.25;

/// Raw three-component date code: `[linear, sin, cos]`.
pub type RawCode = [f64; 3];

/// A raw code together with its learned projection.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalEncoding {
    pub raw: RawCode,
    pub projected: Vec<f32>,
}

/// Normalised day of year in `[0, 1)`.
pub fn normalized_doy(d: CalendarDate) -> f64 {
    (d.day_of_year() as f64 - 1.0) / DAYS_PER_YEAR
}

/// `[year_offset, sin 2π·doy, cos 2π·doy]`.
pub fn encode_cycle(year_offset: f64, doy: f64) -> RawCode {
    [year_offset, (TAU * doy).sin(), (TAU * doy).cos()]
}

/// Absolute encoding of the target date against reference year `y0`.
pub fn encode_target(d: CalendarDate, y0: i32) -> RawCode {
    encode_cycle((d.year() - y0) as f64, normalized_doy(d))
}

/// `[Δ, sin 2πΔ, cos 2πΔ]` for a signed offset `Δ` in years.
pub fn encode_offset(delta_years: f64) -> RawCode {
    [delta_years, (TAU * delta_years).sin(), (TAU * delta_years).cos()]
}

/// Offset in years of `d_i` relative to `d_target` (negative = past).
pub fn relative_offset(d_i: CalendarDate, d_target: CalendarDate) -> f64 {
    d_i.days_since(d_target) as f64 / DAYS_PER_YEAR
}

/// Target-relative encoding of an input acquisition date.
pub fn encode_relative(d_i: CalendarDate, d_target: CalendarDate) -> RawCode {
    encode_offset(relative_offset(d_i, d_target))
}

/// Packs raw codes into an `[N, 3]` tensor.
pub fn codes_tensor(codes: &[RawCode]) -> Tensor {
    let data = codes.iter().flat_map(|c| c.iter().map(|&v| v as f32)).collect();
    Tensor::new(vec![codes.len(), 3], data)
}

/// Two-layer perceptron `3 → hidden → out` with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct TimeProjection {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    out_dim: usize,
}

impl TimeProjection {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add_he(&format!("{name}.w1"), &[3, hidden], 3, rng),
            b1: store.add_const(&format!("{name}.b1"), &[hidden], 0.0),
            w2: store.add_he(&format!("{name}.w2"), &[hidden, out_dim], hidden, rng),
            b2: store.add_const(&format!("{name}.b2"), &[out_dim], 0.0),
            out_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Projects rows of `codes [N, 3]` to `[N, out_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, codes: Var) -> Var {
        let (w1, b1, w2, b2) = (
            store.bind(g, self.w1),
            store.bind(g, self.b1),
            store.bind(g, self.w2),
            store.bind(g, self.b2),
        );
        let h = g.linear(codes, w1, b1);
        let h = g.relu(h);
        g.linear(h, w2, b2)
    }

    /// Projects a single raw code.
    pub fn project(&self, store: &ParamStore, raw: RawCode) -> Result<TemporalEncoding> {
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::Shape("non-finite date code".into()));
        }
        let mut g = Graph::inference();
        let x = g.input(codes_tensor(&[raw]));
        let y = self.forward(&mut g, store, x);
        Ok(TemporalEncoding {
            raw,
            projected: g.value(y).data().to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: RawCode, b: RawCode, tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn jan_first_of_reference_year() {
        let d = CalendarDate::new(2020, 1).unwrap();
        assert_eq!(encode_target(d, 2020), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn half_year_next_year() {
        assert!(close(encode_cycle(1.0, 0.5), [1.0, 0.0, -1.0], 1e-6));
        // Day 184 sits 0.4 days past the exact half-period.
        let d = CalendarDate::new(2021, 184).unwrap();
        assert!(close(encode_target(d, 2020), [1.0, 0.0, -1.0], 1e-2));
    }

    #[test]
    fn day_92_reference_value() {
        let d = CalendarDate::new(2020, 92).unwrap();
        let a = 2.0 * std::f64::consts::PI * 91.0 / 365.25;
        assert!(close(encode_target(d, 2020), [0.0, a.sin(), a.cos()], 1e-12));
    }

    #[test]
    fn relative_same_day_is_exact() {
        let d = CalendarDate::new(2021, 77).unwrap();
        assert_eq!(encode_relative(d, d), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn relative_quarter_period() {
        assert!(close(encode_offset(-91.3125 / DAYS_PER_YEAR), [-0.25, -1.0, 0.0], 1e-6));
    }

    #[test]
    fn relative_thirty_days_after() {
        let t = CalendarDate::new(2020, 100).unwrap();
        let a = 30.0 / 365.25;
        let expect = [a, (2.0 * std::f64::consts::PI * a).sin(), (2.0 * std::f64::consts::PI * a).cos()];
        assert!(close(encode_relative(t.add_days(30), t), expect, 1e-12));
    }

    proptest! {
        #[test]
        fn unit_circle_and_antisymmetry(a in 0i64..4000, b in 0i64..4000) {
            let base = CalendarDate::new(2019, 1).unwrap();
            let (da, db) = (base.add_days(a), base.add_days(b));
            let ab = encode_relative(da, db);
            let ba = encode_relative(db, da);
            prop_assert!((ab[1] * ab[1] + ab[2] * ab[2] - 1.0).abs() < 1e-12);
            prop_assert_eq!(ab[0], -ba[0]);
            let t = encode_target(da, 2019);
            prop_assert!((t[1] * t[1] + t[2] * t[2] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn annual_periodicity(delta in -800.0f64..800.0) {
            let a = encode_offset(delta / DAYS_PER_YEAR);
            let b = encode_offset((delta + DAYS_PER_YEAR) / DAYS_PER_YEAR);
            prop_assert!((a[1] - b[1]).abs() < 1e-9 && (a[2] - b[2]).abs() < 1e-9);
            prop_assert!((b[0] - a[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_parameters_project_to_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = TimeProjection::new(&mut store, "t", 8, 6, &mut rng);
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let e = proj.project(&store, [0.3, 0.2, 0.9]).unwrap();
        assert_eq!(e.projected, vec![0.0; 6]);
    }

    #[test]
    fn identity_first_layer_with_zero_second_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = TimeProjection::new(&mut store, "t", 3, 4, &mut rng);
        let [w1, b1, w2, b2] = proj.weights();
        let w = store.get_mut(w1).data_mut();
        w.fill(0.0);
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        store.get_mut(b1).data_mut().fill(0.0);
        store.get_mut(w2).data_mut().fill(0.0);
        store.get_mut(b2).data_mut().fill(0.0);
        let e = proj.project(&store, [0.5, -0.2, 1.0]).unwrap();
        assert_eq!(e.projected, vec![0.0; 4]);
    }

    #[test]
    fn seeded_projection_matches_scripted_forward() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let proj = TimeProjection::new(&mut store, "t", 5, 4, &mut rng);
        for (i, id) in proj.weights().iter().enumerate() {
            if i % 2 == 1 {
                for (j, v) in store.get_mut(*id).data_mut().iter_mut().enumerate() {
                    *v = 0.1 * j as f32 - 0.2;
                }
            }
        }
        let [w1, b1, w2, b2] = proj.weights().map(|id| store.get(id).data().to_vec());
        let raw = [0.0f64, 0.0, 1.0];
        let mut hidden = [0.0f64; 5];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut s = b1[j] as f64;
            for i in 0..3 {
                s += raw[i] * w1[i * 5 + j] as f64;
            }
            *h = s.max(0.0);
        }
        let got = proj.project(&store, raw).unwrap().projected;
        for k in 0..4 {
            let mut s = b2[k] as f64;
            for j in 0..5 {
                s += hidden[j] * w2[j * 4 + k] as f64;
            }
            assert!((got[k] as f64 - s).abs() < 1e-5, "{k}: {} vs {s}", got[k]);
        }
    }
}
