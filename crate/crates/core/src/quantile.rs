//! Private quantile estimation over a fixed grid (AboveThreshold style).
//!
//! The candidate grid starts at 0.1 and advances by
//! `next(p) = max(p + 0.1, p * 1.01)` until it crosses 2^64: tenths up to
//! 10.1, then ~1% multiplicative steps. The walk compares the rank count
//! f_S(p) = |{x <= p}| against the target (k/100)*m, with one Laplace(2/eps)
//! draw perturbing the target and a fresh Laplace(4/eps) draw per grid
//! point; accepting the first crossing is what keeps the whole sweep
//! eps-DP, and any answer is off by at most one grid step (additive 0.1 or
//! relative ~1%) plus the noise margin.
//!
//! The additive phase is materialized as exact decimal tenths (i/10) rather
//! than by repeated f64 addition, which drifts (1.9 + 0.1 rounds above 2.0)
//! and would misplace integer-valued scalars that sit exactly on grid
//! points. The step rule itself is unchanged.

use crate::mechanisms::sample_laplace;
use rand::Rng;
use serde::Serialize;
use std::sync::OnceLock;
use thiserror::Error;

/// Upper end of the representable range: 2^64.
pub const GRID_CAP: f64 = 1.8446744073709552e19;

#[derive(Debug, Error, PartialEq)]
pub enum QuantileError {
    #[error("grid point {0} is at or beyond the cap 2^64")]
    BeyondCap(f64),
    #[error("empty input")]
    EmptyInput,
}

/// The step rule. Errors once `p` reaches the cap.
pub fn grid_next(p: f64) -> Result<f64, QuantileError> {
    assert!(p > 0.0 && p.is_finite(), "grid points are positive reals");
    if p >= GRID_CAP {
        return Err(QuantileError::BeyondCap(p));
    }
    Ok((p + 0.1).max(p * 1.01))
}

static GRID: OnceLock<Vec<f64>> = OnceLock::new();

/// All grid points from 0.1 through the first point at or above the cap
/// (the saturation point, on which walks that never cross halt).
pub fn grid() -> &'static [f64] {
    GRID.get_or_init(|| {
        let mut pts: Vec<f64> = (1..=101).map(|i| i as f64 / 10.0).collect();
        loop {
            let p = *pts.last().expect("grid is nonempty");
            if p >= GRID_CAP {
                break;
            }
            pts.push((p + 0.1).max(p * 1.01));
        }
        pts
    })
}

pub fn grid_size() -> usize {
    grid().len()
}

/// f_S(p): how many inputs are at most p.
pub fn rank_count(values: &[f64], p: f64) -> usize {
    values.iter().filter(|&&x| x <= p).count()
}

/// One traced private quantile walk.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantileRun {
    /// The grid point returned.
    pub value: f64,
    /// Grid points visited (= per-point noise draws).
    pub steps: usize,
    /// Largest |draw| among the threshold draw and all per-point draws.
    pub max_noise_magnitude: f64,
    /// Rank shortfall target - f_S(value) at the returned point.
    pub halt_deficit: f64,
    /// True when the walk exhausted the grid and returned the saturation
    /// point instead of crossing.
    pub saturated: bool,
}

/// eps-DP estimate of the k-th percentile of `values`; also returns per-run
/// diagnostics. `values` may be empty.
pub fn dp_quantile_traced(
    values: &[f64],
    k: u32,
    epsilon: f64,
    rng: &mut impl Rng,
) -> QuantileRun {
    assert!((1..=99).contains(&k), "percentile must lie in 1..=99");
    assert!(epsilon > 0.0 && epsilon.is_finite(), "epsilon must be positive");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let target = (k as f64 / 100.0) * sorted.len() as f64;
    let rank = |p: f64| sorted.partition_point(|&x| x <= p) as f64;

    let pts = grid();
    let eta = sample_laplace(2.0 / epsilon, rng);
    let mut max_noise = eta.abs();
    let mut steps = 0;
    for &p in &pts[..pts.len() - 1] {
        let eta_p = sample_laplace(4.0 / epsilon, rng);
        max_noise = max_noise.max(eta_p.abs());
        steps += 1;
        let f = rank(p);
        if f + eta_p >= target + eta {
            return QuantileRun {
                value: p,
                steps,
                max_noise_magnitude: max_noise,
                halt_deficit: target - f,
                saturated: false,
            };
        }
    }
    let last = *pts.last().expect("grid is nonempty");
    QuantileRun {
        value: last,
        steps,
        max_noise_magnitude: max_noise,
        halt_deficit: target - rank(last),
        saturated: true,
    }
}

/// eps-DP estimate of the k-th percentile of `values`.
pub fn dp_quantile(values: &[f64], k: u32, epsilon: f64, rng: &mut impl Rng) -> f64 {
    dp_quantile_traced(values, k, epsilon, rng).value
}

/// Noise-free variant of the walk: the first grid point p with
/// f_S(p) >= (k/100)*m. Test and demo use only; not a private mechanism.
pub fn noise_free_quantile(values: &[f64], k: u32) -> f64 {
    assert!((1..=99).contains(&k), "percentile must lie in 1..=99");
    let target = (k as f64 / 100.0) * values.len() as f64;
    let pts = grid();
    for &p in pts {
        if rank_count(values, p) as f64 >= target {
            return p;
        }
    }
    *pts.last().expect("grid is nonempty")
}

/// The ceil((k/100)*|S|)-th smallest element: the exact, non-private
/// percentile used as a test oracle and by the deterministic attack demo.
pub fn exact_quantile(values: &[f64], k: u32) -> Result<f64, QuantileError> {
    assert!((1..=99).contains(&k), "percentile must lie in 1..=99");
    if values.is_empty() {
        return Err(QuantileError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (k as usize * sorted.len()).div_ceil(100);
    Ok(sorted[rank - 1])
}
