//! Shared helpers for the integration suites, most importantly an
//! independent E-step oracle: generic Gaussian conditioning on the full
//! joint covariance of (x, y, t, u), with its own naive matrix inverse.
//! Nothing here reuses the crate's conditioning or factorization code.

use ndarray::{Array1, Array2};
use ppls::em::EStepMoments;
use ppls::{DataPair, Theta};

/// Plain Gauss-Jordan inverse with partial pivoting. Quadratic-time
/// elegance is beside the point; being independent of the library is.
pub fn naive_inverse(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut work = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                work[[i, col]]
                    .abs()
                    .partial_cmp(&work[[j, col]].abs())
                    .unwrap()
            })
            .unwrap();
        assert!(work[[pivot_row, col]].abs() > 1e-300, "singular matrix");
        if pivot_row != col {
            for j in 0..n {
                work.swap([pivot_row, j], [col, j]);
                inv.swap([pivot_row, j], [col, j]);
            }
        }
        let pivot = work[[col, col]];
        for j in 0..n {
            work[[col, j]] /= pivot;
            inv[[col, j]] /= pivot;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let factor = work[[i, col]];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                work[[i, j]] -= factor * work[[col, j]];
                inv[[i, j]] -= factor * inv[[col, j]];
            }
        }
    }
    inv
}

/// Joint covariance of the stacked vector (x, y, t, u), assembled entry by
/// entry from the model definition x = W t + e, y = C u + f, u = t B + h.
pub fn joint_covariance(theta: &Theta) -> Array2<f64> {
    let (p, q, r) = (theta.p(), theta.q(), theta.r());
    let d = p + q + 2 * r;
    let st = &theta.sigma_t2;
    let b = &theta.b;
    // latent covariances
    let mut cov = Array2::<f64>::zeros((d, d));
    let idx_x = 0;
    let idx_y = p;
    let idx_t = p + q;
    let idx_u = p + q + r;
    for k in 0..r {
        let var_t = st[k];
        let cov_tu = st[k] * b[k];
        let var_u = st[k] * b[k] * b[k] + theta.sigma_h2;
        cov[[idx_t + k, idx_t + k]] = var_t;
        cov[[idx_t + k, idx_u + k]] = cov_tu;
        cov[[idx_u + k, idx_t + k]] = cov_tu;
        cov[[idx_u + k, idx_u + k]] = var_u;
        // x = W t + e
        for i in 0..p {
            cov[[idx_x + i, idx_t + k]] += theta.w[[i, k]] * var_t;
            cov[[idx_t + k, idx_x + i]] += theta.w[[i, k]] * var_t;
            cov[[idx_x + i, idx_u + k]] += theta.w[[i, k]] * cov_tu;
            cov[[idx_u + k, idx_x + i]] += theta.w[[i, k]] * cov_tu;
        }
        // y = C u + f
        for i in 0..q {
            cov[[idx_y + i, idx_u + k]] += theta.c[[i, k]] * var_u;
            cov[[idx_u + k, idx_y + i]] += theta.c[[i, k]] * var_u;
            cov[[idx_y + i, idx_t + k]] += theta.c[[i, k]] * cov_tu;
            cov[[idx_t + k, idx_y + i]] += theta.c[[i, k]] * cov_tu;
        }
        for i in 0..p {
            for j in 0..p {
                cov[[idx_x + i, idx_x + j]] += theta.w[[i, k]] * theta.w[[j, k]] * var_t;
            }
            for j in 0..q {
                let v = theta.w[[i, k]] * theta.c[[j, k]] * cov_tu;
                cov[[idx_x + i, idx_y + j]] += v;
                cov[[idx_y + j, idx_x + i]] += v;
            }
        }
        for i in 0..q {
            for j in 0..q {
                cov[[idx_y + i, idx_y + j]] += theta.c[[i, k]] * theta.c[[j, k]] * var_u;
            }
        }
    }
    for i in 0..p {
        cov[[i, i]] += theta.sigma_e2;
    }
    for i in 0..q {
        cov[[p + i, p + i]] += theta.sigma_f2;
    }
    cov
}

/// E-step moments via generic Gaussian conditioning of (t, u) on (x, y).
pub fn oracle_e_step(data: &DataPair, theta: &Theta) -> EStepMoments {
    let (p, q, r) = (theta.p(), theta.q(), theta.r());
    let n = data.n();
    let nf = n as f64;
    let d_obs = p + q;
    let joint = joint_covariance(theta);
    let sigma_obs = joint.slice(ndarray::s![..d_obs, ..d_obs]).to_owned();
    let k_mat = joint.slice(ndarray::s![..d_obs, d_obs..]).to_owned();
    let sigma_lat = joint.slice(ndarray::s![d_obs.., d_obs..]).to_owned();
    let obs_inv = naive_inverse(&sigma_obs);
    let gain = obs_inv.dot(&k_mat); // (p+q) x 2r
    let z = data.stacked();
    let mu_lat = z.dot(&gain); // N x 2r
    let v_lat = &sigma_lat - &k_mat.t().dot(&gain);
    let mu_t = mu_lat.slice(ndarray::s![.., ..r]).to_owned();
    let mu_u = mu_lat.slice(ndarray::s![.., r..]).to_owned();
    let v_tt = v_lat.slice(ndarray::s![..r, ..r]).to_owned();
    let v_uu = v_lat.slice(ndarray::s![r.., r..]).to_owned();
    let v_ut = v_lat.slice(ndarray::s![r.., ..r]).to_owned();
    let ctt = nf * &v_tt + &mu_t.t().dot(&mu_t);
    let cuu = nf * &v_uu + &mu_u.t().dot(&mu_u);
    let cut = nf * &v_ut + &mu_u.t().dot(&mu_t);
    // E||x - W t||^2 summed over rows, and the y / structural analogues.
    let rx = data.x() - &mu_t.dot(&theta.w.t());
    let exp_ee = rx.iter().map(|v| v * v).sum::<f64>()
        + nf * trace_quad(&theta.w, &v_tt);
    let ry = data.y() - &mu_u.dot(&theta.c.t());
    let exp_ff = ry.iter().map(|v| v * v).sum::<f64>()
        + nf * trace_quad(&theta.c, &v_uu);
    let mut exp_hh = 0.0;
    for i in 0..n {
        for k in 0..r {
            let diff = mu_u[[i, k]] - theta.b[k] * mu_t[[i, k]];
            exp_hh += diff * diff;
        }
    }
    for k in 0..r {
        exp_hh +=
            nf * (v_uu[[k, k]] - 2.0 * theta.b[k] * v_ut[[k, k]] + theta.b[k] * theta.b[k] * v_tt[[k, k]]);
    }
    EStepMoments {
        mu_t,
        mu_u,
        ctt,
        cuu,
        cut,
        exp_ee,
        exp_ff,
        exp_hh,
    }
}

/// tr(A^T A V) for loading matrix A and latent covariance V.
fn trace_quad(a: &Array2<f64>, v: &Array2<f64>) -> f64 {
    let gram = a.t().dot(a);
    let mut acc = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            acc += gram[[i, j]] * v[[j, i]];
        }
    }
    acc
}

/// Sample data rows directly from the generative equations (independent of
/// the library's simulation module) and center them.
pub fn sample_from_model(theta: &Theta, n: usize, seed: u64) -> DataPair {
    use rand::prelude::*;
    use rand_distr::StandardNormal;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (p, q, r) = (theta.p(), theta.q(), theta.r());
    let mut x = Array2::<f64>::zeros((n, p));
    let mut y = Array2::<f64>::zeros((n, q));
    for i in 0..n {
        let t: Array1<f64> = (0..r)
            .map(|k| theta.sigma_t2[k].sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let u: Array1<f64> = (0..r)
            .map(|k| theta.b[k] * t[k] + theta.sigma_h2.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for j in 0..p {
            let mut v = theta.sigma_e2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            for k in 0..r {
                v += theta.w[[j, k]] * t[k];
            }
            x[[i, j]] = v;
        }
        for j in 0..q {
            let mut v = theta.sigma_f2.sqrt() * rng.sample::<f64, _>(StandardNormal);
            for k in 0..r {
                v += theta.c[[j, k]] * u[k];
            }
            y[[i, j]] = v;
        }
    }
    DataPair::new(x, y).unwrap().center()
}

/// Relative max-norm difference against a block's own scale.
pub fn rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max)
        / scale
}
