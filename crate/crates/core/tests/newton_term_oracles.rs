//! Term-by-term oracles for the M-step building blocks.
//!
//! A deliberately naive double-loop implementation assembles `G_t`, `H_t`,
//! `I_t`, the profile gradient, and `A_t`, `B_t` straight from their
//! defining sums; the engine's windowed prefix-sum implementation must
//! agree to 1e-10. A centred finite difference of the locally solved tilt
//! checks the profile gradient independently.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use tiltfit::data::{ColumnRoles, Dataset};
use tiltfit::kernel::{kernel_weight, KernelSpec};
use tiltfit::profile_em::EmEngine;

fn roles() -> ColumnRoles {
    ColumnRoles::new(vec!["x1".into()], vec!["x2".into()], "y", "delta").unwrap()
}

/// A small random instance: n rows, ~65% responders, M imputations each.
fn instance(seed: u64, n: usize, m: usize) -> (Dataset, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x1 = Vec::new();
    let mut y = Vec::new();
    let mut delta = Vec::new();
    for _ in 0..n {
        x1.push(rng.random::<f64>() * 2.0 - 0.5);
        let resp = rng.random::<f64>() < 0.65;
        delta.push(resp);
        y.push(if resp {
            Some(rng.random::<f64>() * 3.0 - 1.5)
        } else {
            None
        });
    }
    let n_nonresp = delta.iter().filter(|d| !**d).count();
    let imputations: Vec<Vec<f64>> = (0..n_nonresp)
        .map(|_| {
            let mut draws: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 3.0 - 1.5).collect();
            draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
            draws
        })
        .collect();
    let d = Dataset::from_parts(
        DMatrix::from_vec(n, 1, x1.clone()),
        DMatrix::from_vec(n, 1, x1.iter().map(|v| v * 0.5 + 0.3).collect()),
        y,
        delta,
        roles(),
    )
    .unwrap();
    (d, imputations)
}

struct Naive {
    g_t: Vec<f64>,
    h_t: Vec<f64>,
    i_t: Vec<f64>,
    grad: Vec<f64>,
    a_t: DVector<f64>,
    b_t: DMatrix<f64>,
}

/// Assemble every term measurably differently from the engine: direct
/// kernel evaluation per pair, no windows, no prefix sums.
fn naive_terms(
    d: &Dataset,
    imps: &[Vec<f64>],
    weights: &[Vec<f64>],
    pts: &[f64],
    phi: &DVector<f64>,
    g_at: &dyn Fn(f64) -> f64,
    h: f64,
) -> Naive {
    let spec = KernelSpec::epanechnikov(h);
    let pi = |x1: f64, gamma: f64| -> f64 {
        let eta = x1 * phi[0] + gamma;
        1.0 / (1.0 + (-eta).exp())
    };
    let resp: Vec<usize> = (0..d.n()).filter(|&i| d.delta(i)).collect();
    let nonresp: Vec<usize> = (0..d.n()).filter(|&i| !d.delta(i)).collect();

    let mut g_t = vec![0.0; pts.len()];
    let mut h_t = vec![0.0; pts.len()];
    let mut i_t = vec![0.0; pts.len()];
    for (k, &t) in pts.iter().enumerate() {
        let gamma = g_at(t);
        for &i in &resp {
            let x1 = d.x1()[(i, 0)];
            let p = pi(x1, gamma);
            let kw = kernel_weight(&spec, t - d.y_observed(i));
            g_t[k] += (1.0 - p) * kw;
            h_t[k] -= (1.0 - p) * p * kw;
            i_t[k] += (1.0 - p) * p * kw * x1;
        }
        for (u, &i) in nonresp.iter().enumerate() {
            let x1 = d.x1()[(i, 0)];
            let p = pi(x1, gamma);
            for (j, &ystar) in imps[u].iter().enumerate() {
                let kw = kernel_weight(&spec, t - ystar);
                g_t[k] -= weights[u][j] * p * kw;
                h_t[k] -= (1.0 - p) * p * weights[u][j] * kw;
                i_t[k] += (1.0 - p) * p * weights[u][j] * kw * x1;
            }
        }
    }
    let grad: Vec<f64> = (0..pts.len()).map(|k| i_t[k] / h_t[k]).collect();
    let grad_at = |y: f64| -> f64 {
        let k = pts
            .iter()
            .position(|&v| v == y)
            .expect("term oracle evaluates at pooled points");
        grad[k]
    };

    let mut a_t = DVector::zeros(1);
    let mut b_t = DMatrix::zeros(1, 1);
    for &i in &resp {
        let x1 = d.x1()[(i, 0)];
        let y = d.y_observed(i);
        let p = pi(x1, g_at(y));
        let v = x1 + grad_at(y);
        a_t[0] += (1.0 - p) * v;
        b_t[(0, 0)] -= p * (1.0 - p) * v * v;
    }
    for (u, &i) in nonresp.iter().enumerate() {
        let x1 = d.x1()[(i, 0)];
        for (j, &ystar) in imps[u].iter().enumerate() {
            let p = pi(x1, g_at(ystar));
            let v = x1 + grad_at(ystar);
            a_t[0] -= weights[u][j] * p * v;
            b_t[(0, 0)] -= weights[u][j] * p * (1.0 - p) * v * v;
        }
    }
    Naive { g_t, h_t, i_t, grad, a_t, b_t }
}

#[test]
fn engine_terms_match_naive_assembly() {
    for seed in [11u64, 22, 33, 44, 55] {
        let (d, imps) = instance(seed, 20, 5);
        let h = 0.8;
        let clamp = 1e-3;
        let mut eng = EmEngine::new(&d, imps.clone(), h, clamp).unwrap();
        eng.set_phi(DVector::from_vec(vec![0.35]));
        // a non-constant tilt to exercise every term
        let pts = eng.eval_points().to_vec();
        let g_values: Vec<f64> = pts.iter().map(|y| 0.25 * y - 0.1 * y * y).collect();
        eng.set_g_values(&g_values);
        eng.refresh_weights();
        let weights: Vec<Vec<f64>> = eng.weights().to_vec();

        let terms = eng.m_step_terms().unwrap();
        let g_at = |y: f64| -> f64 {
            let k = pts.iter().position(|&v| v == y).unwrap();
            g_values[k]
        };
        let phi = DVector::from_vec(vec![0.35]);
        let naive = naive_terms(&d, &imps, &weights, &pts, &phi, &g_at, h);

        for k in 0..pts.len() {
            assert!(
                (terms.g_t[k] - naive.g_t[k]).abs() < 1e-10,
                "seed {seed} G_t[{k}]: {} vs {}",
                terms.g_t[k],
                naive.g_t[k]
            );
            assert!(
                (terms.h_t[k] - naive.h_t[k]).abs() < 1e-10,
                "seed {seed} H_t[{k}]: {} vs {}",
                terms.h_t[k],
                naive.h_t[k]
            );
            assert!(
                (terms.i_t[(k, 0)] - naive.i_t[k]).abs() < 1e-10,
                "seed {seed} I_t[{k}]: {} vs {}",
                terms.i_t[(k, 0)],
                naive.i_t[k]
            );
            assert!(
                (terms.grad[(k, 0)] - naive.grad[k]).abs() < 1e-10,
                "seed {seed} grad[{k}]: {} vs {}",
                terms.grad[(k, 0)],
                naive.grad[k]
            );
        }
        assert!(
            (terms.a_t[0] - naive.a_t[0]).abs() < 1e-10,
            "seed {seed} A_t: {} vs {}",
            terms.a_t[0],
            naive.a_t[0]
        );
        assert!(
            (terms.b_t[(0, 0)] - naive.b_t[(0, 0)]).abs() < 1e-10,
            "seed {seed} B_t: {} vs {}",
            terms.b_t[(0, 0)],
            naive.b_t[(0, 0)]
        );
    }
}

/// The profile gradient of g matches a centred finite difference of the
/// locally solved tilt within 1e-3 on ten seeded small instances.
#[test]
fn profile_gradient_matches_finite_differences() {
    for seed in 1u64..=10 {
        let (d, imps) = instance(seed * 7 + 1, 20, 5);
        let h = 0.8;
        let phi0 = 0.3;
        let solve_at = |phi: f64, weights: &[Vec<f64>]| -> Vec<f64> {
            let mut eng = EmEngine::new(&d, imps.clone(), h, 1e-3).unwrap();
            eng.set_phi(DVector::from_vec(vec![phi]));
            eng.set_weights(weights);
            eng.solve_g_fixed_phi(1e-12, 500).unwrap();
            eng.g_values()
        };
        // fix the fractional weights at the phi0 solve: the profile
        // gradient is the within-M-step derivative at fixed weights
        let mut eng0 = EmEngine::new(&d, imps.clone(), h, 1e-3).unwrap();
        eng0.set_phi(DVector::from_vec(vec![phi0]));
        eng0.refresh_weights();
        let weights: Vec<Vec<f64>> = eng0.weights().to_vec();
        eng0.solve_g_fixed_phi(1e-12, 500).unwrap();
        let g_solved = eng0.g_values();
        eng0.gradient_g().unwrap();
        let grad = eng0.grad_matrix();

        let eps = 1e-5;
        let g_plus = solve_at(phi0 + eps, &weights);
        let g_minus = solve_at(phi0 - eps, &weights);
        let mut worst = 0.0f64;
        for k in 0..g_solved.len() {
            let fd = (g_plus[k] - g_minus[k]) / (2.0 * eps);
            worst = worst.max((grad[(k, 0)] - fd).abs());
        }
        assert!(worst <= 1e-3, "seed {seed}: max |grad - fd| = {worst}");
    }
}
