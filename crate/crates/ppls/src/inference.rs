//! Standard errors for the loading matrices: observed-information
//! (Louis-method) asymptotic SEs per component, and bootstrap SEs.
//! Asymptotic SEs come from the joint observed information over all
//! parameters, restricted to the orthonormality constraints; the
//! per-column information matrix is also exposed.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::em::{fit_ppls, FitConfig, FitResult};
use crate::error::{PplsError, Result};
use crate::model::{log_likelihood_scatter, DataPair, Theta};
use crate::numerics::{sym_eig, sym_pseudo_inverse, Matrix, SpdFactor, SINGULAR_VALUE_REL_TOL};
use crate::sim::align_loadings;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeMethod {
    Asymptotic,
    Bootstrap,
}

#[derive(Debug, Clone)]
pub struct LoadingSE {
    /// p x r, nonnegative.
    pub se_w: Matrix,
    /// q x r, nonnegative.
    pub se_c: Matrix,
    pub method: SeMethod,
    /// 0 for the asymptotic method.
    pub bootstrap_replicates: usize,
    /// Per-column: observed information not positive definite (asymptotic
    /// method only; the pseudo-inverse was used).
    pub degenerate_w: Vec<bool>,
    pub degenerate_c: Vec<bool>,
}

/// Louis-method observed information for loading column `k` (0-based).
/// `load` is the full p x r loading matrix, `mu` the N x r conditional
/// score means, `cov` the r x r conditional score covariance shared by
/// rows, and `noise_var` the isotropic noise variance of the block.
///
/// The complete-data score for column k is
///   S = sigma^-2 (Z - T W^T)^T t_k,
/// and Louis' identity at the fit reduces to E{B} - cov(S | data) with
/// B = sigma^-2 (t_k^T t_k) I_p. Rows are conditionally independent, and
/// Gaussian fourth-moment identities give the closed form below. Keeping
/// the cross-component terms of the score matters: scoring each column as
/// if it were the only one leaves large negative directions along the
/// other loading columns and an indefinite information matrix.
fn louis_information(
    z: &ArrayView2<f64>,
    load: &ArrayView2<f64>,
    mu: &ArrayView2<f64>,
    cov: &Matrix,
    k: usize,
    noise_var: f64,
) -> Matrix {
    let (n, p) = z.dim();
    let nf = n as f64;
    // Conditional-mean residual block G = Z - mu W^T.
    let g = z - &mu.dot(&load.t());
    let r_mat = g.t().dot(&g);
    let mu_k = mu.column(k);
    let h = g.t().dot(&mu_k);
    let mu2 = mu_k.dot(&mu_k);
    let vkk = cov[[k, k]].max(0.0);
    let wv = load.dot(cov); // W V
    let wvwt = wv.dot(&load.t()); // W V W^T
    let wvk = load.dot(&cov.column(k)); // W v_k
    // cov(S) sigma^4 = V_kk R - h (W v_k)^T - (W v_k) h^T
    //                  + (||mu_k||^2 + N V_kk) W V W^T + N (W v_k)(W v_k)^T
    let inv2 = 1.0 / (noise_var * noise_var);
    let mut cov_s = r_mat * vkk;
    for i in 0..p {
        for j in 0..p {
            cov_s[[i, j]] += -h[i] * wvk[j] - wvk[i] * h[j]
                + (mu2 + nf * vkk) * wvwt[[i, j]]
                + nf * wvk[i] * wvk[j];
            cov_s[[i, j]] *= inv2;
        }
    }
    // E{B} = (E(t_k^T t_k | data) / sigma^2) I_p
    let eb = (mu2 + nf * vkk) / noise_var;
    let mut info = cov_s.mapv(|v| -v);
    for i in 0..p {
        info[[i, i]] += eb;
    }
    0.5 * (&info + &info.t())
}

/// Packed free-parameter vector: vec(W) | vec(C) | b | sigma_t2 |
/// sigma_e2 | sigma_f2 | sigma_h2 (columns stacked in order).
fn pack_theta(theta: &Theta) -> Array1<f64> {
    let (p, q, r) = (theta.p(), theta.q(), theta.r());
    let mut v = Vec::with_capacity((p + q) * r + 2 * r + 3);
    for k in 0..r {
        v.extend(theta.w.column(k).iter());
    }
    for k in 0..r {
        v.extend(theta.c.column(k).iter());
    }
    v.extend(theta.b.iter());
    v.extend(theta.sigma_t2.iter());
    v.push(theta.sigma_e2);
    v.push(theta.sigma_f2);
    v.push(theta.sigma_h2);
    Array1::from(v)
}

fn unpack_theta(base: &Theta, v: &Array1<f64>) -> Theta {
    let (p, q, r) = (base.p(), base.q(), base.r());
    let mut theta = base.clone();
    let mut idx = 0;
    for k in 0..r {
        for i in 0..p {
            theta.w[[i, k]] = v[idx];
            idx += 1;
        }
    }
    for k in 0..r {
        for i in 0..q {
            theta.c[[i, k]] = v[idx];
            idx += 1;
        }
    }
    for k in 0..r {
        theta.b[k] = v[idx];
        idx += 1;
    }
    for k in 0..r {
        theta.sigma_t2[k] = v[idx];
        idx += 1;
    }
    theta.sigma_e2 = v[idx];
    theta.sigma_f2 = v[idx + 1];
    theta.sigma_h2 = v[idx + 2];
    theta
}

/// Observed information over the full packed parameter vector, by central
/// finite differences of the closed-form marginal log-likelihood. The
/// likelihood is available exactly, so this equals the Louis-method
/// E{B} - E{SS^T} for the joint parameter (the per-column
/// `louis_information` is its W-column diagonal block).
fn joint_observed_information(scatter: &Matrix, n: usize, theta: &Theta) -> Result<Matrix> {
    let x0 = pack_theta(theta);
    let d = x0.len();
    let n_load = (theta.p() + theta.q() + 1) * theta.r(); // loadings + b
    let step: Array1<f64> = x0
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if i < n_load {
                1e-3 * v.abs().max(1e-2)
            } else {
                1e-3 * v
            }
        })
        .collect();
    let eval = |v: &Array1<f64>| log_likelihood_scatter(scatter, n, &unpack_theta(theta, v));
    let f0 = eval(&x0)?;
    let mut info = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in i..d {
            let (hi, hj) = (step[i], step[j]);
            let hess = if i == j {
                let mut vp = x0.clone();
                vp[i] += hi;
                let mut vm = x0.clone();
                vm[i] -= hi;
                (eval(&vp)? - 2.0 * f0 + eval(&vm)?) / (hi * hi)
            } else {
                let mut vpp = x0.clone();
                vpp[i] += hi;
                vpp[j] += hj;
                let mut vpm = x0.clone();
                vpm[i] += hi;
                vpm[j] -= hj;
                let mut vmp = x0.clone();
                vmp[i] -= hi;
                vmp[j] += hj;
                let mut vmm = x0.clone();
                vmm[i] -= hi;
                vmm[j] -= hj;
                (eval(&vpp)? - eval(&vpm)? - eval(&vmp)? + eval(&vmm)?) / (4.0 * hi * hj)
            };
            info[[i, j]] = -hess;
            info[[j, i]] = -hess;
        }
    }
    Ok(info)
}

/// Orthogonal projector onto the tangent space of the constraints
/// W^T W = I and C^T C = I at `theta`, in packed coordinates.
fn constraint_tangent_projector(theta: &Theta) -> Matrix {
    let (p, q, r) = (theta.p(), theta.q(), theta.r());
    let d = (p + q) * r + 2 * r + 3;
    let m = r * (r + 1); // r(r+1)/2 constraints per loading matrix
    let mut normals = Array2::<f64>::zeros((d, m));
    let mut col = 0;
    // d(w_k . w_l) direction: column k picks up w_l and column l picks up w_k.
    for k in 0..r {
        for l in k..r {
            for i in 0..p {
                normals[[k * p + i, col]] += theta.w[[i, l]];
                normals[[l * p + i, col]] += theta.w[[i, k]];
            }
            col += 1;
        }
    }
    let off = p * r;
    for k in 0..r {
        for l in k..r {
            for i in 0..q {
                normals[[off + k * q + i, col]] += theta.c[[i, l]];
                normals[[off + l * q + i, col]] += theta.c[[i, k]];
            }
            col += 1;
        }
    }
    let gram_inv = sym_pseudo_inverse(&normals.t().dot(&normals), SINGULAR_VALUE_REL_TOL);
    let mut proj = Array2::<f64>::eye(d) - &normals.dot(&gram_inv).dot(&normals.t());
    proj = 0.5 * (&proj + &proj.t());
    proj
}

const JOINT_INFO_NULL_REL_TOL: f64 = 1e-8;

/// Constrained asymptotic covariance of the packed parameter vector:
/// the joint observed information restricted to the constraint tangent
/// space and pseudo-inverted. The per-column marginal covariance of a
/// single loading column conditions on nothing, so it reflects the
/// variability of the joint constrained MLE (including rotation between
/// components and the unit-norm pinning of large entries), which the
/// per-column information alone does not.
///
/// The second return is a degeneracy flag: the projected information had
/// non-positive directions beyond the r(r+1) constraint null modes.
fn joint_parameter_covariance(data: &DataPair, theta: &Theta) -> Result<(Matrix, bool)> {
    let info = joint_observed_information(&data.scatter(), data.n(), theta)?;
    let proj = constraint_tangent_projector(theta);
    let pip = proj.dot(&info).dot(&proj);
    let pip = 0.5 * (&pip + &pip.t());
    let (vals, _) = sym_eig(&pip);
    let top = vals.iter().cloned().fold(0.0f64, f64::max);
    let tol = JOINT_INFO_NULL_REL_TOL * top.max(f64::MIN_POSITIVE);
    let null_modes = vals.iter().filter(|&&v| v <= tol).count();
    let degenerate = null_modes != theta.r() * (theta.r() + 1);
    if degenerate {
        log::warn!(
            "joint observed information has {null_modes} null or negative modes \
             (expected {} constraint modes); standard errors may be unreliable",
            theta.r() * (theta.r() + 1)
        );
    }
    Ok((sym_pseudo_inverse(&pip, JOINT_INFO_NULL_REL_TOL), degenerate))
}

fn se_from_information(info: &Matrix) -> (Array1<f64>, bool) {
    match SpdFactor::new(info) {
        Ok(factor) => {
            let inv = factor.inverse();
            (inv.diag().mapv(|v| v.max(0.0).sqrt()), false)
        }
        Err(_) => {
            log::warn!("observed information not positive definite; using pseudo-inverse");
            let inv = sym_pseudo_inverse(info, SINGULAR_VALUE_REL_TOL);
            (inv.diag().mapv(|v| v.max(0.0).sqrt()), true)
        }
    }
}

/// Asymptotic SE for column `k` (1-based) of W, with the observed
/// information matrix and a degeneracy flag.
pub fn asymptotic_se_w(
    data: &DataPair,
    fit: &FitResult,
    k: usize,
) -> Result<(Array1<f64>, Matrix, bool)> {
    let r = fit.theta.r();
    if k == 0 || k > r {
        return Err(PplsError::ComponentOutOfRange { k, r });
    }
    let j = k - 1;
    let n = data.n() as f64;
    let moments = &fit.final_moments;
    // Recover the conditional score covariance from Ctt = N V + mu^T mu.
    let cov = (&moments.ctt - &moments.mu_t.t().dot(&moments.mu_t)) / n;
    let cov = 0.5 * (&cov + &cov.t());
    let info = louis_information(
        &data.x().view(),
        &fit.theta.w.view(),
        &moments.mu_t.view(),
        &cov,
        j,
        fit.theta.sigma_e2,
    );
    let (se, degenerate) = match joint_parameter_covariance(data, &fit.theta) {
        Ok((joint_cov, deg)) => {
            let off = j * data.p();
            (diag_sqrt(&joint_cov, off, data.p()), deg)
        }
        Err(err) => {
            log::warn!("joint information failed ({err}); falling back to per-column inverse");
            (se_from_information(&info).0, true)
        }
    };
    Ok((se, info, degenerate))
}

/// Asymptotic SE for column `k` (1-based) of C, by formal symmetry of the
/// two data blocks (an extrapolation: the derivation covers W).
pub fn asymptotic_se_c(
    data: &DataPair,
    fit: &FitResult,
    k: usize,
) -> Result<(Array1<f64>, Matrix, bool)> {
    let r = fit.theta.r();
    if k == 0 || k > r {
        return Err(PplsError::ComponentOutOfRange { k, r });
    }
    let j = k - 1;
    let n = data.n() as f64;
    let moments = &fit.final_moments;
    let cov = (&moments.cuu - &moments.mu_u.t().dot(&moments.mu_u)) / n;
    let cov = 0.5 * (&cov + &cov.t());
    let info = louis_information(
        &data.y().view(),
        &fit.theta.c.view(),
        &moments.mu_u.view(),
        &cov,
        j,
        fit.theta.sigma_f2,
    );
    let (se, degenerate) = match joint_parameter_covariance(data, &fit.theta) {
        Ok((joint_cov, deg)) => {
            let off = data.p() * r + j * data.q();
            (diag_sqrt(&joint_cov, off, data.q()), deg)
        }
        Err(err) => {
            log::warn!("joint information failed ({err}); falling back to per-column inverse");
            (se_from_information(&info).0, true)
        }
    };
    Ok((se, info, degenerate))
}

fn diag_sqrt(cov: &Matrix, offset: usize, len: usize) -> Array1<f64> {
    (0..len)
        .map(|i| cov[[offset + i, offset + i]].max(0.0).sqrt())
        .collect()
}

/// Asymptotic SEs for every loading column of both matrices. The joint
/// parameter covariance is computed once and shared across columns.
pub fn asymptotic_se(data: &DataPair, fit: &FitResult) -> Result<LoadingSE> {
    let r = fit.theta.r();
    let (p, q) = (data.p(), data.q());
    let mut se_w = Array2::zeros((p, r));
    let mut se_c = Array2::zeros((q, r));
    let (joint_cov, degenerate) = joint_parameter_covariance(data, &fit.theta)?;
    for k in 0..r {
        se_w.column_mut(k).assign(&diag_sqrt(&joint_cov, k * p, p));
        se_c.column_mut(k).assign(&diag_sqrt(&joint_cov, p * r + k * q, q));
    }
    let degenerate_w = vec![degenerate; r];
    let degenerate_c = vec![degenerate; r];
    Ok(LoadingSE {
        se_w,
        se_c,
        method: SeMethod::Asymptotic,
        bootstrap_replicates: 0,
        degenerate_w,
        degenerate_c,
    })
}

/// Bootstrap SEs: resample rows jointly with replacement (replicate b uses
/// seed `baseSeed + b`), re-center, refit, align to the base fit, and take
/// entrywise standard deviations (ddof = 1). Errors if more than 10% of
/// replicates fail to fit.
pub fn bootstrap_se(
    data: &DataPair,
    r: usize,
    config: &FitConfig,
    replicates: usize,
    base_seed: u64,
) -> Result<LoadingSE> {
    if replicates < 2 {
        return Err(PplsError::InvalidInput(
            "bootstrap needs at least 2 replicates".into(),
        ));
    }
    let base = fit_ppls(data, r, config)?;
    let n = data.n();
    let mut sum_w = Array2::<f64>::zeros((data.p(), r));
    let mut sumsq_w = Array2::<f64>::zeros((data.p(), r));
    let mut sum_c = Array2::<f64>::zeros((data.q(), r));
    let mut sumsq_c = Array2::<f64>::zeros((data.q(), r));
    let mut used = 0usize;
    let mut failed = 0usize;
    for b in 1..=replicates as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(b));
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let xb = data.x().select(Axis(0), &rows);
        let yb = data.y().select(Axis(0), &rows);
        let pair = DataPair::new(xb, yb).expect("resampled shapes agree").center();
        match fit_ppls(&pair, r, config) {
            Ok(fit) => {
                let aligned = align_loadings(
                    &fit.theta.w,
                    &fit.theta.c,
                    &fit.theta.b,
                    &fit.theta.sigma_t2,
                    &base.theta.w,
                    &base.theta.c,
                );
                sum_w += &aligned.w;
                sumsq_w += &aligned.w.mapv(|v| v * v);
                sum_c += &aligned.c;
                sumsq_c += &aligned.c.mapv(|v| v * v);
                used += 1;
            }
            Err(err) => {
                log::warn!("bootstrap replicate {b} failed: {err}");
                failed += 1;
            }
        }
    }
    if failed * 10 > replicates {
        return Err(PplsError::TooManyFailedReplicates {
            failed,
            total: replicates,
            limit: replicates / 10,
        });
    }
    let m = used as f64;
    let sd = |sum: &Matrix, sumsq: &Matrix| {
        let mean = sum / m;
        ((sumsq - &(&mean * &mean * m)) / (m - 1.0)).mapv(|v| v.max(0.0).sqrt())
    };
    Ok(LoadingSE {
        se_w: sd(&sum_w, &sumsq_w),
        se_c: sd(&sum_c, &sumsq_c),
        method: SeMethod::Bootstrap,
        bootstrap_replicates: used,
        degenerate_w: vec![false; r],
        degenerate_c: vec![false; r],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_data, make_true_model, ScenarioConfig};
    use ndarray::concatenate;

    fn dataset(n: usize, p: usize, q: usize, noise: f64, seed: u64) -> DataPair {
        let config = ScenarioConfig {
            n,
            p,
            q,
            noise_level: noise,
            ..ScenarioConfig::default()
        };
        let model = make_true_model(&config);
        generate_data(&model, n, seed).0
    }

    #[test]
    fn information_matrix_is_symmetric_and_se_positive() {
        let data = dataset(300, 8, 8, 0.2, 5);
        let fit = fit_ppls(&data, 3, &FitConfig::default()).unwrap();
        for k in 1..=3 {
            let (se, info, degenerate) = asymptotic_se_w(&data, &fit, k).unwrap();
            assert!(!degenerate, "component {k} degenerate");
            for i in 0..8 {
                for j in 0..8 {
                    assert!((info[[i, j]] - info[[j, i]]).abs() < 1e-10);
                }
            }
            assert!(se.iter().all(|&v| v > 0.0 && v.is_finite()));
        }
        assert!(matches!(
            asymptotic_se_w(&data, &fit, 4),
            Err(PplsError::ComponentOutOfRange { k: 4, r: 3 })
        ));
        assert!(matches!(
            asymptotic_se_w(&data, &fit, 0),
            Err(PplsError::ComponentOutOfRange { .. })
        ));
    }

    // The analytic per-column information and the numerically differenced
    // joint Hessian are derived independently; the W-column block of the
    // latter must reproduce the former.
    #[test]
    fn per_column_information_matches_joint_hessian_block() {
        let data = dataset(200, 6, 5, 0.2, 11);
        let fit = fit_ppls(&data, 2, &FitConfig::default()).unwrap();
        let joint = joint_observed_information(&data.scatter(), data.n(), &fit.theta).unwrap();
        for k in 1..=2usize {
            let (_, info, _) = asymptotic_se_w(&data, &fit, k).unwrap();
            let off = (k - 1) * 6;
            for i in 0..6 {
                for j in 0..6 {
                    let joint_ij = joint[[off + i, off + j]];
                    assert!(
                        (info[[i, j]] - joint_ij).abs() <= 1e-3 * (1.0 + joint_ij.abs()),
                        "k={k} i={i} j={j}: analytic {} vs differenced {}",
                        info[[i, j]],
                        joint_ij
                    );
                }
            }
        }
    }

    #[test]
    fn asymptotic_se_shrinks_with_sample_size() {
        let config = ScenarioConfig {
            n: 8000,
            p: 8,
            q: 8,
            noise_level: 0.2,
            ..ScenarioConfig::default()
        };
        let model = make_true_model(&config);
        let mut previous = f64::INFINITY;
        for n in [500usize, 2000, 8000] {
            let (data, _) = generate_data(&model, n, 17);
            let fit = fit_ppls(&data, 3, &FitConfig::default()).unwrap();
            let se = asymptotic_se(&data, &fit).unwrap();
            let mean = se.se_w.mean().unwrap();
            assert!(mean < previous, "mean se did not shrink at N = {n}: {mean}");
            previous = mean;
        }
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let data = dataset(120, 6, 6, 0.2, 9);
        let config = FitConfig::default();
        let a = bootstrap_se(&data, 2, &config, 15, 77).unwrap();
        let b = bootstrap_se(&data, 2, &config, 15, 77).unwrap();
        assert_eq!(a.se_w, b.se_w);
        assert_eq!(a.se_c, b.se_c);
        assert_eq!(a.method, SeMethod::Bootstrap);
        assert!(a.bootstrap_replicates >= 14);
        assert!(a.se_w.iter().all(|&v| v.is_finite() && v >= 0.0));
    }

    #[test]
    fn bootstrap_se_scales_like_inverse_sqrt_n() {
        let data = dataset(250, 6, 6, 0.2, 13);
        let doubled = DataPair::new_centered(
            concatenate![Axis(0), data.x().view(), data.x().view()],
            concatenate![Axis(0), data.y().view(), data.y().view()],
        )
        .unwrap();
        let config = FitConfig::default();
        let base = bootstrap_se(&data, 2, &config, 150, 7).unwrap();
        let twice = bootstrap_se(&doubled, 2, &config, 150, 7).unwrap();
        // keep to well-identified entries to avoid noise-dominated ratios
        let mut ratios = Vec::new();
        for (a, b) in base.se_w.iter().zip(twice.se_w.iter()) {
            if *a > 1e-3 {
                ratios.push(b / a);
            }
        }
        let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let want = 1.0 / 2f64.sqrt();
        assert!(
            (mean_ratio - want).abs() < 0.15 * want,
            "mean shrink ratio {mean_ratio}, expected about {want}"
        );
    }

    #[test]
    fn bootstrap_rejects_too_few_replicates() {
        let data = dataset(80, 6, 6, 0.2, 3);
        assert!(matches!(
            bootstrap_se(&data, 2, &FitConfig::default(), 1, 0),
            Err(PplsError::InvalidInput(_))
        ));
    }
}
