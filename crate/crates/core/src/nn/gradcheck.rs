//! Finite-difference checks of every tape operation's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Compares analytic gradients of `build` against central differences for
/// every element of every parameter.
fn check(params: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let eval = |ps: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ps.iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0] as f64
    };
    let mut g = Graph::training();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out, params.len());
    let h = 1e-2f32;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.grads[pi].as_ref().expect("missing gradient");
        for j in 0..p.len() {
            let mut plus = params.clone();
            plus[pi].data_mut()[j] += h;
            let mut minus = params.clone();
            minus[pi].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
            let a = analytic.data()[j] as f64;
            let tol = 2e-2 * (1.0 + numeric.abs().max(a.abs()));
            assert!(
                (a - numeric).abs() < tol,
                "param {pi} elem {j}: analytic {a} numeric {numeric}"
            );
        }
    }
}

fn probe(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn linear_relu_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = probe(&mut rng, 4 * 3);
    check(
        vec![rand_tensor(&mut rng, &[4, 5]), rand_tensor(&mut rng, &[5, 3]), rand_tensor(&mut rng, &[3])],
        |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let r = g.relu(y);
            let s = g.add(r, y);
            g.dot_const(s, &c)
        },
    );
}

#[test]
fn conv2d_strided_and_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = probe(&mut rng, 2 * 3 * 3 * 3);
    check(
        vec![
            rand_tensor(&mut rng, &[2, 2, 6, 6]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
        ],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1);
            g.dot_const(y, &c)
        },
    );
}

#[test]
fn layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = probe(&mut rng, 3 * 6);
    check(
        vec![rand_tensor(&mut rng, &[3, 6]), rand_tensor(&mut rng, &[6]), rand_tensor(&mut rng, &[6])],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            g.dot_const(y, &c)
        },
    );
}

#[test]
fn pyramid_pool_concat_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = probe(&mut rng, 2 * 3 * 8 * 8);
    check(vec![rand_tensor(&mut rng, &[2, 1, 4, 4])], |g, v| {
        let p1 = g.pyramid_pool(v[0], 1);
        let p2 = g.pyramid_pool(v[0], 3);
        let cat = g.concat_channels(&[v[0], p1, p2]);
        let up = g.upsample2x(cat);
        g.dot_const(up, &c)
    });
}

#[test]
fn repeat_rows_and_rows_to_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = probe(&mut rng, 2 * 3 * 4);
    check(vec![rand_tensor(&mut rng, &[2, 3])], |g, v| {
        let r = g.repeat_rows(v[0], 4);
        let m = g.rows_to_map(r, 2, 2, 2);
        g.dot_const(m, &c)
    });
}

#[test]
fn attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c = probe(&mut rng, 3 * 4);
    check(
        vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[3 * 5, 4]),
            rand_tensor(&mut rng, &[3 * 5, 4]),
        ],
        |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2);
            g.dot_const(y, &c)
        },
    );
}

#[test]
fn assemble_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layout = vec![
        vec![TokenSource::Optical(0), TokenSource::Optical(1), TokenSource::Radar(0)],
        vec![TokenSource::Optical(2), TokenSource::Radar(1), TokenSource::Radar(2)],
    ];
    let c = probe(&mut rng, 2 * 4 * 3 * (2 + 3 + 2));
    check(
        vec![
            rand_tensor(&mut rng, &[3, 2, 2, 2]),
            rand_tensor(&mut rng, &[3, 3]),
            rand_tensor(&mut rng, &[3, 2, 2, 2]),
            rand_tensor(&mut rng, &[3, 3]),
        ],
        |g, v| {
            let t = g.assemble_tokens(v[0], v[1], Some((v[2], v[3])), layout.clone());
            g.dot_const(t, &c)
        },
    );
}

#[test]
fn laplace_nll_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let target = rand_tensor(&mut rng, &[2, 2, 2, 2]);
    let mask = vec![true, false, true, true, true, true, false, true];
    // Keep log-scales inside the clamp window and residuals away from zero.
    let mut out = rand_tensor(&mut rng, &[2, 4, 2, 2]);
    for b in 0..2 {
        for ch in 0..2 {
            for px in 0..4 {
                let mu = (b * 4 + ch) * 4 + px;
                let y = target.data()[(b * 2 + ch) * 4 + px];
                out.data_mut()[mu] = y + if px % 2 == 0 { 0.5 } else { -0.5 };
            }
        }
    }
    check(vec![out], |g, v| g.laplace_nll(v[0], &target, &mask));
}

#[test]
fn inference_graph_reports_no_grads() {
    let mut g = Graph::inference();
    let x = g.param(0, Tensor::full(&[1, 2], 1.0));
    let s = g.dot_const(x, &[1.0, 1.0]);
    let grads = g.backward(s, 1);
    assert!(grads.grads[0].is_none());
}
