//! Model parameters, covariance assembly, log-likelihood,
//! canonicalization and descriptive statistics.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::em::EStepMoments;
use crate::error::{PplsError, Result};
use crate::numerics::{Matrix, SpdFactor};

/// Orthonormality tolerance used when validating loadings.
pub const LOADING_ORTHO_TOL: f64 = 1e-8;
/// Two components whose `sigma_t^2 * b` values are closer than this
/// (relatively) cannot be ordered reliably.
pub const COMPONENT_GAP_REL_TOL: f64 = 1e-8;

/// Version tag written into serialized parameter documents.
pub const THETA_FORMAT_VERSION: u32 = 1;

/// Full PPLS parameter set.
///
/// `b` and `sigma_t2` hold the diagonals of the regression matrix `B` and
/// the latent covariance; `sigma_*2` are the isotropic noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub w: Matrix,
    pub c: Matrix,
    pub b: Array1<f64>,
    pub sigma_t2: Array1<f64>,
    pub sigma_e2: f64,
    pub sigma_f2: f64,
    pub sigma_h2: f64,
}

impl Theta {
    pub fn p(&self) -> usize {
        self.w.nrows()
    }
    pub fn q(&self) -> usize {
        self.c.nrows()
    }
    pub fn r(&self) -> usize {
        self.w.ncols()
    }

    /// Per-component ordering keys `sigma_t_k^2 * b_k`.
    pub fn component_scales(&self) -> Array1<f64> {
        &self.sigma_t2 * &self.b
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ThetaDocument::from(self)).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ThetaDocument = serde_json::from_str(text)
            .map_err(|e| PplsError::InvalidInput(format!("theta json: {e}")))?;
        doc.into_theta()
    }
}

#[derive(Serialize, Deserialize)]
struct ThetaDocument {
    format_version: u32,
    p: usize,
    q: usize,
    r: usize,
    w: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    b: Vec<f64>,
    sigma_t2: Vec<f64>,
    sigma_e2: f64,
    sigma_f2: f64,
    sigma_h2: f64,
}

impl From<&Theta> for ThetaDocument {
    fn from(t: &Theta) -> Self {
        let rows = |m: &Matrix| m.rows().into_iter().map(|r| r.to_vec()).collect();
        Self {
            format_version: THETA_FORMAT_VERSION,
            p: t.p(),
            q: t.q(),
            r: t.r(),
            w: rows(&t.w),
            c: rows(&t.c),
            b: t.b.to_vec(),
            sigma_t2: t.sigma_t2.to_vec(),
            sigma_e2: t.sigma_e2,
            sigma_f2: t.sigma_f2,
            sigma_h2: t.sigma_h2,
        }
    }
}

impl ThetaDocument {
    fn into_theta(self) -> Result<Theta> {
        if self.format_version != THETA_FORMAT_VERSION {
            return Err(PplsError::InvalidInput(format!(
                "unsupported theta format version {}",
                self.format_version
            )));
        }
        let to_matrix = |rows: Vec<Vec<f64>>, nr: usize, nc: usize, name: &str| -> Result<Matrix> {
            if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
                return Err(PplsError::InvalidInput(format!(
                    "{name} must be {nr}x{nc}"
                )));
            }
            Ok(Array2::from_shape_vec((nr, nc), rows.into_iter().flatten().collect())
                .expect("shape checked"))
        };
        let w = to_matrix(self.w, self.p, self.r, "w")?;
        let c = to_matrix(self.c, self.q, self.r, "c")?;
        if self.b.len() != self.r || self.sigma_t2.len() != self.r {
            return Err(PplsError::InvalidInput(
                "b and sigma_t2 must have length r".into(),
            ));
        }
        Ok(Theta {
            w,
            c,
            b: Array1::from_vec(self.b),
            sigma_t2: Array1::from_vec(self.sigma_t2),
            sigma_e2: self.sigma_e2,
            sigma_f2: self.sigma_f2,
            sigma_h2: self.sigma_h2,
        })
    }
}

/// One violated parameter constraint, with the measured discrepancy.
#[derive(Debug, Clone, PartialEq)]
pub enum ThetaViolation {
    RankOutOfRange { r: usize, p: usize, q: usize },
    LoadingsNotOrthonormal { matrix: &'static str, discrepancy: f64 },
    NonPositiveRegression { k: usize, value: f64 },
    NonPositiveLatentVariance { k: usize, value: f64 },
    OrderingViolated { k: usize, previous: f64, next: f64 },
    NonPositiveNoiseVariance { name: &'static str, value: f64 },
}

impl std::fmt::Display for ThetaViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::RankOutOfRange { r, p, q } => {
                write!(f, "r = {r} must satisfy 0 < r < min(p, q) = {}", p.min(q))
            }
            Self::LoadingsNotOrthonormal { matrix, discrepancy } => {
                write!(f, "{matrix}^T {matrix} deviates from I by {discrepancy:.3e}")
            }
            Self::NonPositiveRegression { k, value } => {
                write!(f, "b[{k}] = {value:.3e} must be positive")
            }
            Self::NonPositiveLatentVariance { k, value } => {
                write!(f, "sigma_t2[{k}] = {value:.3e} must be positive")
            }
            Self::OrderingViolated { k, previous, next } => write!(
                f,
                "sigma_t2*b must strictly decrease: position {k} has {previous:.6e} -> {next:.6e}"
            ),
            Self::NonPositiveNoiseVariance { name, value } => {
                write!(f, "{name} = {value:.3e} must be positive")
            }
        }
    }
}

/// Check every parameter constraint; an empty list means `theta` is valid.
pub fn validate_theta(theta: &Theta) -> Vec<ThetaViolation> {
    let mut out = Vec::new();
    let (p, q, r) = (theta.p(), theta.q(), theta.r());
    if r == 0 || r >= p.min(q) {
        out.push(ThetaViolation::RankOutOfRange { r, p, q });
    }
    for (name, m) in [("W", &theta.w), ("C", &theta.c)] {
        let gram = m.t().dot(m);
        let mut disc = 0.0f64;
        for i in 0..r {
            for j in 0..r {
                let want = if i == j { 1.0 } else { 0.0 };
                disc += (gram[[i, j]] - want).powi(2);
            }
        }
        let disc = disc.sqrt();
        if disc > LOADING_ORTHO_TOL {
            out.push(ThetaViolation::LoadingsNotOrthonormal {
                matrix: name,
                discrepancy: disc,
            });
        }
    }
    for k in 0..r {
        if !(theta.b[k] > 0.0) {
            out.push(ThetaViolation::NonPositiveRegression {
                k,
                value: theta.b[k],
            });
        }
        if !(theta.sigma_t2[k] > 0.0) {
            out.push(ThetaViolation::NonPositiveLatentVariance {
                k,
                value: theta.sigma_t2[k],
            });
        }
    }
    let scales = theta.component_scales();
    for k in 1..r {
        if !(scales[k] < scales[k - 1]) {
            out.push(ThetaViolation::OrderingViolated {
                k,
                previous: scales[k - 1],
                next: scales[k],
            });
        }
    }
    for (name, v) in [
        ("sigma_e2", theta.sigma_e2),
        ("sigma_f2", theta.sigma_f2),
        ("sigma_h2", theta.sigma_h2),
    ] {
        if !(v > 0.0) {
            out.push(ThetaViolation::NonPositiveNoiseVariance { name, value: v });
        }
    }
    out
}

/// Covariance blocks of the joint normal distribution of `(x, y, t, u)`
/// implied by a parameter set.
#[derive(Debug, Clone)]
pub struct CovarianceBlocks {
    pub sigma_x: Matrix,
    pub sigma_y: Matrix,
    pub sigma_xy: Matrix,
    pub cov_xt: Matrix,
    pub cov_xu: Matrix,
    pub cov_yt: Matrix,
    pub cov_yu: Matrix,
}

impl CovarianceBlocks {
    /// Assemble the full (p+q)x(p+q) covariance of the observed vector.
    pub fn joint(&self) -> Matrix {
        let p = self.sigma_x.nrows();
        let q = self.sigma_y.nrows();
        let mut out = Array2::zeros((p + q, p + q));
        out.slice_mut(ndarray::s![..p, ..p]).assign(&self.sigma_x);
        out.slice_mut(ndarray::s![..p, p..]).assign(&self.sigma_xy);
        out.slice_mut(ndarray::s![p.., ..p]).assign(&self.sigma_xy.t());
        out.slice_mut(ndarray::s![p.., p..]).assign(&self.sigma_y);
        out
    }
}

/// Covariance blocks of the observed and latent vectors under `theta`.
///
/// Rank-one contributions are accumulated in descending `sigma_t^2 * b`
/// order; the result is therefore bit-identical across column permutations
/// and sign flips of the input.
pub fn assemble_sigma(theta: &Theta) -> CovarianceBlocks {
    let (p, q, r) = (theta.p(), theta.q(), theta.r());
    let scales = theta.component_scales();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| scales[j].partial_cmp(&scales[i]).expect("finite scales"));

    let mut sigma_x = Array2::eye(p) * theta.sigma_e2;
    let mut sigma_y = Array2::eye(q) * theta.sigma_f2;
    let mut sigma_xy = Array2::zeros((p, q));
    let mut cov_xt = Array2::zeros((p, r));
    let mut cov_xu = Array2::zeros((p, r));
    let mut cov_yt = Array2::zeros((q, r));
    let mut cov_yu = Array2::zeros((q, r));

    for &k in &order {
        let st = theta.sigma_t2[k];
        let bk = theta.b[k];
        let wk = theta.w.column(k);
        let ck = theta.c.column(k);
        for i in 0..p {
            for j in 0..p {
                sigma_x[[i, j]] += st * wk[i] * wk[j];
            }
        }
        let var_u = bk * bk * st + theta.sigma_h2;
        for i in 0..q {
            for j in 0..q {
                sigma_y[[i, j]] += var_u * ck[i] * ck[j];
            }
        }
        for i in 0..p {
            for j in 0..q {
                sigma_xy[[i, j]] += st * bk * wk[i] * ck[j];
            }
        }
        for i in 0..p {
            cov_xt[[i, k]] = st * wk[i];
            cov_xu[[i, k]] = st * bk * wk[i];
        }
        for i in 0..q {
            cov_yt[[i, k]] = st * bk * ck[i];
            cov_yu[[i, k]] = (st * bk * bk + theta.sigma_h2) * ck[i];
        }
    }
    CovarianceBlocks {
        sigma_x,
        sigma_y,
        sigma_xy,
        cov_xt,
        cov_xu,
        cov_yt,
        cov_yu,
    }
}

/// Paired, row-aligned observation matrices.
#[derive(Debug, Clone)]
pub struct DataPair {
    x: Matrix,
    y: Matrix,
    centered: bool,
}

impl DataPair {
    /// Uncentered data. Row counts must match and all entries be finite.
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        Self::build(x, y, false)
    }

    /// Data the caller asserts is column-centered; the assertion is checked
    /// against each column's standard deviation.
    pub fn new_centered(x: Matrix, y: Matrix) -> Result<Self> {
        let pair = Self::build(x, y, true)?;
        for (name, m) in [("x", &pair.x), ("y", &pair.y)] {
            let n = m.nrows() as f64;
            for (j, col) in m.columns().into_iter().enumerate() {
                let mean = col.sum() / n;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                if mean.abs() > 1e-10 * sd.max(f64::MIN_POSITIVE) {
                    return Err(PplsError::InvalidInput(format!(
                        "{name} column {j} is not centered (mean {mean:.3e}, sd {sd:.3e})"
                    )));
                }
            }
        }
        Ok(pair)
    }

    fn build(x: Matrix, y: Matrix, centered: bool) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(PplsError::DimensionMismatch(format!(
                "X has {} rows, Y has {} rows",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.nrows() < 2 {
            return Err(PplsError::InvalidInput("need at least 2 rows".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(PplsError::InvalidInput("non-finite entry in data".into()));
        }
        Ok(Self { x, y, centered })
    }

    /// Subtract each column mean.
    pub fn center(&self) -> Self {
        let center_cols = |m: &Matrix| {
            let mut out = m.clone();
            let n = m.nrows() as f64;
            for mut col in out.columns_mut() {
                let mean = col.sum() / n;
                col.mapv_inplace(|v| v - mean);
            }
            out
        };
        Self {
            x: center_cols(&self.x),
            y: center_cols(&self.y),
            centered: true,
        }
    }

    /// Divide each column by its sample standard deviation.
    pub fn scale_unit_variance(&self) -> Result<Self> {
        let scale_cols = |m: &Matrix| -> Result<Matrix> {
            let mut out = m.clone();
            let n = m.nrows() as f64;
            for (j, mut col) in out.columns_mut().into_iter().enumerate() {
                let mean = col.sum() / n;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                if sd <= 0.0 {
                    return Err(PplsError::InvalidInput(format!(
                        "column {j} has zero variance, cannot scale"
                    )));
                }
                col.mapv_inplace(|v| v / sd);
            }
            Ok(out)
        };
        Ok(Self {
            x: scale_cols(&self.x)?,
            y: scale_cols(&self.y)?,
            centered: self.centered,
        })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }
    pub fn y(&self) -> &Matrix {
        &self.y
    }
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.y.ncols()
    }
    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Stacked observation matrix `Z = (X, Y)`, N x (p+q).
    pub fn stacked(&self) -> Matrix {
        concatenate![Axis(1), self.x.view(), self.y.view()]
    }

    /// Scatter matrix `S = Z^T Z / N`.
    pub fn scatter(&self) -> Matrix {
        let p = self.p();
        let q = self.q();
        let n = self.n() as f64;
        let mut s = Array2::zeros((p + q, p + q));
        let sxx = self.x.t().dot(&self.x);
        let sxy = self.x.t().dot(&self.y);
        let syy = self.y.t().dot(&self.y);
        s.slice_mut(ndarray::s![..p, ..p]).assign(&sxx);
        s.slice_mut(ndarray::s![..p, p..]).assign(&sxy);
        s.slice_mut(ndarray::s![p.., ..p]).assign(&sxy.t());
        s.slice_mut(ndarray::s![p.., p..]).assign(&syy);
        s / n
    }
}

/// Observed log-likelihood of centered data under `theta`.
pub fn log_likelihood(data: &DataPair, theta: &Theta) -> Result<f64> {
    if !data.is_centered() {
        return Err(PplsError::InvalidInput(
            "log-likelihood requires centered data".into(),
        ));
    }
    if theta.r() >= data.n() {
        return Err(PplsError::InvalidInput(format!(
            "need r < N, got r = {} and N = {}",
            theta.r(),
            data.n()
        )));
    }
    log_likelihood_scatter(&data.scatter(), data.n(), theta)
}

/// Log-likelihood from the scatter matrix `S = Z^T Z / N` alone.
pub fn log_likelihood_scatter(s: &Matrix, n: usize, theta: &Theta) -> Result<f64> {
    let d = (theta.p() + theta.q()) as f64;
    let sigma = assemble_sigma(theta).joint();
    let factor = SpdFactor::new(&sigma)?;
    let nf = n as f64;
    Ok(-0.5 * nf * (d * (2.0 * std::f64::consts::PI).ln() + factor.log_det() + factor.trace_solve(s)))
}

/// Canonicalize a loosely constrained parameter set: jointly permute
/// columns so `sigma_t^2 * b` strictly decreases, then flip each `(w_k,
/// c_k)` pair so the largest-magnitude entry of `w_k` is positive.
///
/// Returns the canonical parameters, the per-column sign flips applied
/// (in output column order) and the permutation (`permutation[j]` is the
/// input column placed at output position `j`).
pub fn canonicalize_theta(theta: &Theta) -> Result<(Theta, Array1<f64>, Vec<usize>)> {
    let r = theta.r();
    let scales = theta.component_scales();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| scales[j].partial_cmp(&scales[i]).expect("finite scales"));
    for w in order.windows(2) {
        let (hi, lo) = (scales[w[0]], scales[w[1]]);
        let gap = (hi - lo) / hi.abs().max(lo.abs());
        if gap <= COMPONENT_GAP_REL_TOL {
            return Err(PplsError::NearDegenerateComponents {
                i: w[0],
                j: w[1],
                gap,
            });
        }
    }
    let p = theta.p();
    let q = theta.q();
    let mut w = Array2::zeros((p, r));
    let mut c = Array2::zeros((q, r));
    let mut b = Array1::zeros(r);
    let mut sigma_t2 = Array1::zeros(r);
    let mut signs = Array1::zeros(r);
    for (dst, &src) in order.iter().enumerate() {
        let wk = theta.w.column(src);
        let mut best = 0usize;
        for i in 1..p {
            if wk[i].abs() > wk[best].abs() {
                best = i;
            }
        }
        let sign = if wk[best] < 0.0 { -1.0 } else { 1.0 };
        signs[dst] = sign;
        for i in 0..p {
            w[[i, dst]] = sign * wk[i];
        }
        let ck = theta.c.column(src);
        for i in 0..q {
            c[[i, dst]] = sign * ck[i];
        }
        b[dst] = theta.b[src];
        sigma_t2[dst] = theta.sigma_t2[src];
    }
    Ok((
        Theta {
            w,
            c,
            b,
            sigma_t2,
            sigma_e2: theta.sigma_e2,
            sigma_f2: theta.sigma_f2,
            sigma_h2: theta.sigma_h2,
        },
        signs,
        order,
    ))
}

/// Proportion of variation in each block captured by the conditional
/// latent scores: `||mu_T||_F^2 / ||X||_F^2` and the analogue for `Y`.
/// (The loadings are orthonormal, so `||mu_T W^T||_F = ||mu_T||_F`.)
pub fn variance_explained(data: &DataPair, moments: &EStepMoments) -> (f64, f64) {
    let sq = |m: &Matrix| m.iter().map(|v| v * v).sum::<f64>();
    let ratio_x = sq(&moments.mu_t) / sq(data.x());
    let ratio_y = sq(&moments.mu_u) / sq(data.y());
    (ratio_x, ratio_y)
}

/// Overlap fraction `tr(Sigma_xy) / tr(Sigma_y)`; defined only for p = q.
pub fn overlap_fraction(theta: &Theta) -> Result<f64> {
    if theta.p() != theta.q() {
        return Err(PplsError::NonSquareCrossBlock {
            p: theta.p(),
            q: theta.q(),
        });
    }
    let blocks = assemble_sigma(theta);
    Ok(blocks.sigma_xy.diag().sum() / blocks.sigma_y.diag().sum())
}

/// RV coefficient of two centered blocks with equal row counts:
/// `tr(Sxy Syx) / sqrt(tr(Sxx^2) tr(Syy^2))`.
pub fn rv_coefficient(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(PplsError::DimensionMismatch(format!(
            "X has {} rows, Y has {} rows",
            x.nrows(),
            y.nrows()
        )));
    }
    let frob_sq = |m: &Matrix| m.iter().map(|v| v * v).sum::<f64>();
    let sxx = frob_sq(&x.t().dot(x)).sqrt();
    let syy = frob_sq(&y.t().dot(y)).sqrt();
    if sxx == 0.0 {
        return Err(PplsError::ZeroVariance("X"));
    }
    if syy == 0.0 {
        return Err(PplsError::ZeroVariance("Y"));
    }
    let cross = frob_sq(&x.t().dot(y));
    Ok(cross / (sxx * syy))
}
