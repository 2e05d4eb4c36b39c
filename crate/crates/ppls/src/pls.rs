//! Classical PLS with orthogonal loadings, the comparison estimator.
//!
//! The canonical implementation takes the top-r singular vectors of the
//! cross-covariance `X^T Y`; a NIPALS power iteration on the first
//! component is available for cross-checking.

use crate::error::{PplsError, Result};
use crate::model::DataPair;
use crate::numerics::{top_singular_triplets, Matrix};

#[derive(Debug, Clone)]
pub struct PlsFit {
    /// p x r, orthonormal.
    pub w: Matrix,
    /// q x r, orthonormal.
    pub c: Matrix,
    /// X W, N x r.
    pub scores_t: Matrix,
    /// Y C, N x r.
    pub scores_u: Matrix,
}

/// Orthogonal-loadings PLS: `W`, `C` are the top-r left/right singular
/// vectors of `X^T Y` under the deterministic sign convention of
/// [`top_singular_triplets`]. Deterministic and row-order invariant.
pub fn fit_pls(data: &DataPair, r: usize) -> Result<PlsFit> {
    if !data.is_centered() {
        return Err(PplsError::InvalidInput("PLS requires centered data".into()));
    }
    let (n, p, q) = (data.n(), data.p(), data.q());
    if r == 0 || r >= n.min(p).min(q) {
        return Err(PplsError::InvalidInput(format!(
            "need 0 < r < min(N, p, q) = {}, got r = {r}",
            n.min(p).min(q)
        )));
    }
    let cross = data.x().t().dot(data.y());
    let (w, _s, c) = top_singular_triplets(&cross.view(), r)?;
    let scores_t = data.x().dot(&w);
    let scores_u = data.y().dot(&c);
    Ok(PlsFit {
        w,
        c,
        scores_t,
        scores_u,
    })
}

/// First PLS weight pair by NIPALS power iteration on `X^T Y`, tolerance
/// 1e-10. Cross-check for the SVD path; sign follows the same convention.
pub fn nipals_first_component(data: &DataPair) -> Result<(ndarray::Array1<f64>, ndarray::Array1<f64>)> {
    if !data.is_centered() {
        return Err(PplsError::InvalidInput("PLS requires centered data".into()));
    }
    let m = data.x().t().dot(data.y()); // p x q
    let mtm = m.t().dot(&m);
    let mut c = ndarray::Array1::from_elem(data.q(), 1.0 / (data.q() as f64).sqrt());
    for _ in 0..10_000 {
        let next = mtm.dot(&c);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return Err(PplsError::ZeroVariance("cross-covariance"));
        }
        let next = next / norm;
        let delta = (&next - &c)
            .iter()
            .map(|v| v.abs())
            .fold(0.0f64, f64::max)
            .min(
                (&next + &c)
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0f64, f64::max),
            );
        c = next;
        if delta < 1e-10 {
            break;
        }
    }
    let w = m.dot(&c);
    let norm = w.dot(&w).sqrt();
    if norm == 0.0 {
        return Err(PplsError::ZeroVariance("cross-covariance"));
    }
    let mut w = w / norm;
    // same sign convention as the SVD path: largest-|entry| of w positive
    let mut lead = 0;
    for (i, v) in w.iter().enumerate() {
        if v.abs() > w[lead].abs() {
            lead = i;
        }
    }
    if w[lead] < 0.0 {
        w.mapv_inplace(|v| -v);
        c.mapv_inplace(|v| -v);
    }
    Ok((w, c))
}
