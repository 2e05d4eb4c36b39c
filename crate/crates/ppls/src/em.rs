//! Constrained EM estimation: exact conditional moments of the latent
//! scores, the orthogonality-preserving M-step, initialization, and the
//! convergence-controlled driver.

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{PplsError, Result};
use crate::model::{assemble_sigma, canonicalize_theta, DataPair, Theta};
use crate::numerics::{
    gram_schmidt_orthonormalize, sym_eig, Matrix, SpdFactor, CHOLESKY_PIVOT_REL_TOL,
};

/// Conditional moments of the latent scores given the observed data, plus
/// the expected noise sufficient statistics.
#[derive(Debug, Clone)]
pub struct EStepMoments {
    /// E(T | X,Y), N x r.
    pub mu_t: Matrix,
    /// E(U | X,Y), N x r.
    pub mu_u: Matrix,
    /// E(T^T T | X,Y), r x r.
    pub ctt: Matrix,
    /// E(U^T U | X,Y), r x r.
    pub cuu: Matrix,
    /// E(U^T T | X,Y), r x r.
    pub cut: Matrix,
    /// tr E(E^T E | X,Y).
    pub exp_ee: f64,
    /// tr E(F^T F | X,Y).
    pub exp_ff: f64,
    /// tr E(H^T H | X,Y).
    pub exp_hh: f64,
}

/// How the M-step computes the orthogonalizing matrix for the loading
/// update `W = X^T mu_T L^{-T}` with `L L^T = mu_T^T X X^T mu_T`.
///
/// The Lagrange multiplier matrix of the orthonormality constraint is
/// symmetric, so the maximizing `L` is the symmetric square root; a
/// triangular factor satisfies the same identity but is not a maximizer
/// and loses the EM ascent guarantee. Both variants therefore target the
/// symmetric root and differ only in the numerical route, which is what
/// the equivalence-of-optima claim is tested against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orthogonalization {
    /// Denman-Beavers iteration driven by Cholesky solves (default).
    CholeskyLower,
    /// Eigendecomposition `V diag(sqrt(lambda)) V^T`.
    Eigenvectors,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Absolute log-likelihood increment below which EM stops.
    pub tol_loglik: f64,
    pub orthogonalization: Orthogonalization,
    /// Perturbs the SVD initialization; 0 means no perturbation.
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol_loglik: 1e-6,
            orthogonalization: Orthogonalization::CholeskyLower,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Converged parameters in canonical form.
    pub theta: Theta,
    /// Observed log-likelihood at every EM iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    /// Number of M-steps performed.
    pub iterations: usize,
    /// Moments of the canonical parameters on the training data.
    pub final_moments: EStepMoments,
}

/// Per-observation conditional structure shared by the E-step and the
/// sufficient-statistic driver.
#[derive(Debug, Clone)]
pub(crate) struct Conditionals {
    /// Sigma^{-1} cov((x,y), t), (p+q) x r.
    pub a_t: Matrix,
    /// Sigma^{-1} cov((x,y), u), (p+q) x r.
    pub a_u: Matrix,
    /// var(t | x,y), r x r.
    pub v_tt: Matrix,
    /// var(u | x,y), r x r.
    pub v_uu: Matrix,
    /// cov(u, t | x,y), r x r.
    pub v_ut: Matrix,
}

pub(crate) fn conditionals(theta: &Theta) -> Result<(Conditionals, SpdFactor)> {
    let blocks = assemble_sigma(theta);
    let factor = SpdFactor::new(&blocks.joint())?;
    let k_t = concatenate![Axis(0), blocks.cov_xt.view(), blocks.cov_yt.view()];
    let k_u = concatenate![Axis(0), blocks.cov_xu.view(), blocks.cov_yu.view()];
    let a_t = factor.solve(&k_t);
    let a_u = factor.solve(&k_u);
    let sigma_t = Array2::from_diag(&theta.sigma_t2);
    let sigma_u = Array2::from_diag(
        &(&theta.sigma_t2 * &theta.b * &theta.b + theta.sigma_h2),
    );
    let cov_ut = Array2::from_diag(&(&theta.sigma_t2 * &theta.b));
    let v_tt = symmetrize(&(&sigma_t - &k_t.t().dot(&a_t)));
    let v_uu = symmetrize(&(&sigma_u - &k_u.t().dot(&a_u)));
    let v_ut = &cov_ut - &k_u.t().dot(&a_t);
    Ok((
        Conditionals {
            a_t,
            a_u,
            v_tt,
            v_uu,
            v_ut,
        },
        factor,
    ))
}

fn symmetrize(m: &Matrix) -> Matrix {
    0.5 * (m + &m.t())
}

/// Exact E-step: conditional first and second moments of `(T, U)` and the
/// expected noise sufficient statistics under `theta`.
pub fn e_step(data: &DataPair, theta: &Theta) -> Result<EStepMoments> {
    if !data.is_centered() {
        return Err(PplsError::InvalidInput("E-step requires centered data".into()));
    }
    if theta.r() >= data.n() {
        return Err(PplsError::InvalidInput(format!(
            "need r < N, got r = {} and N = {}",
            theta.r(),
            data.n()
        )));
    }
    let (cond, _factor) = conditionals(theta)?;
    let z = data.stacked();
    let mu_t = z.dot(&cond.a_t);
    let mu_u = z.dot(&cond.a_u);
    let n = data.n() as f64;
    let ctt = symmetrize(&(n * &cond.v_tt + &mu_t.t().dot(&mu_t)));
    let cuu = symmetrize(&(n * &cond.v_uu + &mu_u.t().dot(&mu_u)));
    let cut = n * &cond.v_ut + &mu_u.t().dot(&mu_t);
    let gw = data.x().t().dot(&mu_t);
    let gc = data.y().t().dot(&mu_u);
    let tr_xx = data.x().iter().map(|v| v * v).sum::<f64>();
    let tr_yy = data.y().iter().map(|v| v * v).sum::<f64>();
    let (exp_ee, exp_ff, exp_hh) = noise_statistics(
        &theta.w, &theta.c, &theta.b, &gw, &gc, &ctt, &cuu, &cut, tr_xx, tr_yy,
    );
    Ok(EStepMoments {
        mu_t,
        mu_u,
        ctt,
        cuu,
        cut,
        exp_ee,
        exp_ff,
        exp_hh,
    })
}

#[allow(clippy::too_many_arguments)]
fn noise_statistics(
    w: &Matrix,
    c: &Matrix,
    b: &Array1<f64>,
    gw: &Matrix,
    gc: &Matrix,
    ctt: &Matrix,
    cuu: &Matrix,
    cut: &Matrix,
    tr_xx: f64,
    tr_yy: f64,
) -> (f64, f64, f64) {
    let wtw = w.t().dot(w);
    let ctc = c.t().dot(c);
    let r = b.len();
    let tr_prod = |a: &Matrix, b: &Matrix| {
        let mut s = 0.0;
        for i in 0..r {
            for j in 0..r {
                s += a[[i, j]] * b[[j, i]];
            }
        }
        s
    };
    let cross_w: f64 = gw.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
    let cross_c: f64 = gc.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
    let exp_ee = (tr_xx - 2.0 * cross_w + tr_prod(ctt, &wtw)).max(0.0);
    let exp_ff = (tr_yy - 2.0 * cross_c + tr_prod(cuu, &ctc)).max(0.0);
    let mut exp_hh = cuu.diag().sum();
    for k in 0..r {
        exp_hh += -2.0 * b[k] * cut[[k, k]] + b[k] * b[k] * ctt[[k, k]];
    }
    (exp_ee, exp_ff.max(0.0), exp_hh.max(0.0))
}

/// Second moments and data cross-products, everything the M-step needs.
struct SuffMoments {
    /// X^T mu_T, p x r.
    gw: Matrix,
    /// Y^T mu_U, q x r.
    gc: Matrix,
    ctt: Matrix,
    cuu: Matrix,
    cut: Matrix,
    tr_xx: f64,
    tr_yy: f64,
}

/// Maximization step. The returned loadings are orthonormal to 1e-10; the
/// result is not canonicalized (component order may be arbitrary). The
/// noise variances are computed from the *updated* loadings (that joint
/// update is what makes the EM increment nonnegative).
pub fn m_step(data: &DataPair, moments: &EStepMoments, config: &FitConfig) -> Result<Theta> {
    let suff = SuffMoments {
        gw: data.x().t().dot(&moments.mu_t),
        gc: data.y().t().dot(&moments.mu_u),
        ctt: moments.ctt.clone(),
        cuu: moments.cuu.clone(),
        cut: moments.cut.clone(),
        tr_xx: data.x().iter().map(|v| v * v).sum(),
        tr_yy: data.y().iter().map(|v| v * v).sum(),
    };
    m_step_core(&suff, data.n(), data.p(), data.q(), config.orthogonalization, false, 0)
}

fn orthonormal_update(g: &Matrix, ortho: Orthogonalization) -> Result<Matrix> {
    let gram = g.t().dot(g);
    let r = gram.nrows();
    match ortho {
        Orthogonalization::CholeskyLower => {
            // Denman-Beavers: y -> gram^{1/2}, z -> gram^{-1/2}; every
            // inverse is a Cholesky solve, which also rejects a
            // non-positive-definite gram up front.
            let mut y = gram.clone();
            let mut z: Matrix = Array2::eye(r);
            for _ in 0..100 {
                let y_inv = SpdFactor::new(&y)?.inverse();
                let z_inv = SpdFactor::new(&z)?.inverse();
                let y_next: Matrix = 0.5 * (&y + &z_inv);
                let z_next: Matrix = 0.5 * (&z + &y_inv);
                let delta = (&y_next - &y)
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0f64, f64::max);
                let scale = y_next.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
                y = y_next;
                z = z_next;
                if delta <= 1e-15 * scale {
                    break;
                }
            }
            Ok(g.dot(&z))
        }
        Orthogonalization::Eigenvectors => {
            let (vals, vecs) = sym_eig(&gram);
            let max = vals[0].max(f64::MIN_POSITIVE);
            if let Some((k, &v)) = vals
                .iter()
                .enumerate()
                .find(|(_, &v)| v <= CHOLESKY_PIVOT_REL_TOL * max)
            {
                return Err(PplsError::NotPositiveDefinite { index: k, pivot: v });
            }
            let mut inv_sqrt = Array2::zeros((r, r));
            for k in 0..r {
                inv_sqrt[[k, k]] = 1.0 / vals[k].sqrt();
            }
            Ok(g.dot(&vecs).dot(&inv_sqrt).dot(&vecs.t()))
        }
    }
}

fn m_step_core(
    suff: &SuffMoments,
    n: usize,
    p: usize,
    q: usize,
    ortho: Orthogonalization,
    floor_small: bool,
    iteration: usize,
) -> Result<Theta> {
    let r = suff.ctt.nrows();
    let nf = n as f64;
    let mut w = orthonormal_update(&suff.gw, ortho)?;
    let c = orthonormal_update(&suff.gc, ortho)?;

    // B = (Cut Ctt^{-1}) o I_r
    let ctt_factor = SpdFactor::new(&suff.ctt)?;
    let solved = ctt_factor.solve(&suff.cut.t().to_owned()); // Ctt^{-1} Cut^T
    let mut b = Array1::zeros(r);
    for k in 0..r {
        b[k] = solved[[k, k]];
    }

    // Noise variances from the freshly updated loadings and regression
    // weights (with their raw signs).
    let (exp_ee, exp_ff, exp_hh) = noise_statistics(
        &w, &c, &b, &suff.gw, &suff.gc, &suff.ctt, &suff.cuu, &suff.cut, suff.tr_xx, suff.tr_yy,
    );
    let mut sigma_t2: Array1<f64> = suff.ctt.diag().to_owned() / nf;
    let mut sigma_e2 = exp_ee / (nf * p as f64);
    let mut sigma_f2 = exp_ff / (nf * q as f64);
    let mut sigma_h2 = exp_hh / (nf * r as f64);

    // A negative regression coefficient is the same distribution with the
    // (w_k, b_k) pair negated; normalize to b_k > 0 after the variance
    // updates so the likelihood is untouched.
    for k in 0..r {
        if b[k] < 0.0 {
            b[k] = -b[k];
            w.column_mut(k).mapv_inplace(|x| -x);
        } else if b[k] == 0.0 {
            return Err(PplsError::NegativeVariance {
                parameter: "b",
                value: 0.0,
                iteration,
            });
        }
    }
    let guard = |name: &'static str, v: &mut f64| -> Result<()> {
        if *v <= 0.0 {
            if floor_small {
                log::warn!(
                    "{name} underflowed to {v:.3e} near iteration {iteration}; flooring at 1e-12"
                );
                *v = 1e-12;
                Ok(())
            } else {
                Err(PplsError::NegativeVariance {
                    parameter: name,
                    value: *v,
                    iteration,
                })
            }
        } else {
            Ok(())
        }
    };
    for k in 0..r {
        guard("sigma_t2", &mut sigma_t2[k])?;
    }
    guard("sigma_e2", &mut sigma_e2)?;
    guard("sigma_f2", &mut sigma_f2)?;
    guard("sigma_h2", &mut sigma_h2)?;

    Ok(Theta {
        w,
        c,
        b,
        sigma_t2,
        sigma_e2,
        sigma_f2,
        sigma_h2,
    })
}

/// Deterministic starting point from the SVD of `X^T Y`.
///
/// A nonzero `seed` perturbs the loadings by orthonormalized Gaussian noise
/// of relative Frobenius size 1e-2; seed 0 leaves them untouched.
pub fn initialize_theta(data: &DataPair, r: usize, seed: u64) -> Result<Theta> {
    let (n, p, q) = (data.n(), data.p(), data.q());
    if r == 0 || r >= n.min(p).min(q) {
        return Err(PplsError::InvalidInput(format!(
            "need 0 < r < min(N, p, q) = {}, got r = {r}",
            n.min(p).min(q)
        )));
    }
    let cross = data.x().t().dot(data.y());
    let (u, _s, v) = crate::numerics::top_singular_triplets(&cross.view(), r)?;
    let mut w = u;
    let mut c = v;
    if seed != 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perturb = |m: &Matrix, rng: &mut ChaCha8Rng| -> Result<Matrix> {
            let noise =
                Array2::from_shape_fn(m.dim(), |_| rng.sample::<f64, _>(StandardNormal));
            let scale = 0.01
                * (m.iter().map(|v| v * v).sum::<f64>()
                    / noise.iter().map(|v| v * v).sum::<f64>())
                .sqrt();
            gram_schmidt_orthonormalize(&(m + &(noise * scale)))
        };
        w = perturb(&w, &mut rng)?;
        c = perturb(&c, &mut rng)?;
    }
    let nf = n as f64;
    let t_scores = data.x().dot(&w);
    let u_scores = data.y().dot(&c);
    let mut sigma_t2 = Array1::zeros(r);
    let mut b = Array1::zeros(r);
    for k in 0..r {
        let tt = t_scores.column(k).dot(&t_scores.column(k));
        let tu = t_scores.column(k).dot(&u_scores.column(k));
        sigma_t2[k] = (tt / nf).max(1e-12);
        b[k] = (tu / tt).max(1e-8);
    }
    let resid_var = |m: &Matrix, scores: &Matrix, load: &Matrix| {
        let fit = scores.dot(&load.t());
        let total = m.iter().map(|v| v * v).sum::<f64>();
        let resid = m
            .iter()
            .zip(fit.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        let cells = (m.nrows() * m.ncols()) as f64;
        (resid / cells).max(1e-6 * total / cells)
    };
    let sigma_e2 = resid_var(data.x(), &t_scores, &w);
    let sigma_f2 = resid_var(data.y(), &u_scores, &c);
    let sigma_h2 = 0.1 * (&sigma_t2 * &b * &b).mean().expect("r >= 1");
    Ok(Theta {
        w,
        c,
        b,
        sigma_t2,
        sigma_e2,
        sigma_f2,
        sigma_h2,
    })
}

/// Fit the model by EM until the log-likelihood increment drops below
/// `config.tol_loglik` or `config.max_iter` steps are reached.
///
/// The driver iterates on the scatter matrix `Z^T Z`, so per-iteration cost
/// is independent of N; the returned moments are computed on the full data
/// for the final canonical parameters. Deterministic given
/// `(data, r, config)`.
pub fn fit_ppls(data: &DataPair, r: usize, config: &FitConfig) -> Result<FitResult> {
    if !data.is_centered() {
        return Err(PplsError::InvalidInput(
            "fit requires centered data (center() or --no-center with pre-centered input)".into(),
        ));
    }
    let (n, p, q) = (data.n(), data.p(), data.q());
    if r == 0 || r >= n.min(p).min(q) {
        return Err(PplsError::InvalidInput(format!(
            "need 0 < r < min(N, p, q) = {}, got r = {r}",
            n.min(p).min(q)
        )));
    }
    let nf = n as f64;
    let d = (p + q) as f64;
    let g = data.scatter() * nf; // Z^T Z
    let tr_xx = g.slice(ndarray::s![..p, ..p]).diag().sum();
    let tr_yy = g.slice(ndarray::s![p.., p..]).diag().sum();

    let mut theta = initialize_theta(data, r, config.seed)?;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    let floor_from = config.max_iter - config.max_iter / 10;

    for iter in 0..config.max_iter {
        let (cond, factor) = conditionals(&theta)?;
        let ll = -0.5
            * nf
            * (d * (2.0 * std::f64::consts::PI).ln()
                + factor.log_det()
                + factor.trace_solve(&g) / nf);
        if !ll.is_finite() {
            return Err(PplsError::NonFiniteLikelihood(iter));
        }
        trace.push(ll);
        if iter > 0 && (ll - trace[iter - 1]).abs() < config.tol_loglik {
            converged = true;
            break;
        }

        let ga_t = g.dot(&cond.a_t);
        let ga_u = g.dot(&cond.a_u);
        let ctt = symmetrize(&(nf * &cond.v_tt + &cond.a_t.t().dot(&ga_t)));
        let cuu = symmetrize(&(nf * &cond.v_uu + &cond.a_u.t().dot(&ga_u)));
        let cut = nf * &cond.v_ut + &cond.a_u.t().dot(&ga_t);
        let gw = ga_t.slice(ndarray::s![..p, ..]).to_owned();
        let gc = ga_u.slice(ndarray::s![p.., ..]).to_owned();
        let suff = SuffMoments {
            gw,
            gc,
            ctt,
            cuu,
            cut,
            tr_xx,
            tr_yy,
        };
        theta = m_step_core(&suff, n, p, q, config.orthogonalization, iter >= floor_from, iter)?;
        iterations = iter + 1;
    }

    let (theta, _signs, _perm) = canonicalize_theta(&theta)?;
    let final_moments = e_step(data, &theta)?;
    Ok(FitResult {
        theta,
        loglik_trace: trace,
        converged,
        iterations,
        final_moments,
    })
}

/// Expected complete-data log-likelihood `Q(theta)` with the expectation
/// taken under the parameters that produced `moments`.
pub fn expected_complete_loglik(data: &DataPair, moments: &EStepMoments, theta: &Theta) -> f64 {
    let (n, p, q, r) = (data.n() as f64, data.p() as f64, data.q() as f64, theta.r());
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let gw = data.x().t().dot(&moments.mu_t);
    let gc = data.y().t().dot(&moments.mu_u);
    let tr_xx = data.x().iter().map(|v| v * v).sum::<f64>();
    let tr_yy = data.y().iter().map(|v| v * v).sum::<f64>();
    let (exp_ee, exp_ff, exp_hh) = noise_statistics(
        &theta.w,
        &theta.c,
        &theta.b,
        &gw,
        &gc,
        &moments.ctt,
        &moments.cuu,
        &moments.cut,
        tr_xx,
        tr_yy,
    );
    let mut qval = -0.5 * n * p * (ln2pi + theta.sigma_e2.ln()) - 0.5 * exp_ee / theta.sigma_e2;
    qval += -0.5 * n * q * (ln2pi + theta.sigma_f2.ln()) - 0.5 * exp_ff / theta.sigma_f2;
    qval += -0.5 * n * r as f64 * (ln2pi + theta.sigma_h2.ln()) - 0.5 * exp_hh / theta.sigma_h2;
    for k in 0..r {
        qval += -0.5 * n * (ln2pi + theta.sigma_t2[k].ln())
            - 0.5 * moments.ctt[[k, k]] / theta.sigma_t2[k];
    }
    qval
}
