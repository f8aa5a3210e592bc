//! Bound autotuning: sample-size calculus, per-parameter DP quantiles on a
//! Bernoulli sample S, and bound resolution for aggregation on the rest.
//!
//! The sampling rate q balances two failure sources, each budgeted beta:
//! S must be representative (the k-th percentile of S falls within 5
//! percentile points of the population's), and the DP quantile walk must
//! land within 5 points of the sample's. Both conditions come from
//! Chernoff-style tail bounds; psi_rep and psi_dp are the multiplicative
//! slacks they admit, found numerically. When g parameters are tuned, the
//! failure budget and the privacy budget are split evenly (beta/g, eps/g)
//! and a union bound covers the set.

use crate::bounding::{Bound, ContributionBounds};
use crate::dataset::{bernoulli_partition, derive_scalars, Dataset, Partition, PartitionError, ScalarError};
use crate::mechanisms::sample_laplace;
use crate::quantile::{dp_quantile, exact_quantile, noise_free_quantile};
use crate::query::{missing_bounds, QueryPlan, TunableParameter};
use crate::rng;
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AutotuneConfig {
    /// Target percentile.
    pub k: u32,
    /// Failure budget for the 10-approximation guarantee.
    pub beta: f64,
    /// Number of parameters being tuned.
    pub g: usize,
}

impl Default for AutotuneConfig {
    fn default() -> Self {
        AutotuneConfig { k: 83, beta: 1.0 / 30.0, g: 1 }
    }
}

impl AutotuneConfig {
    pub fn validate(&self) -> Result<(), AutotuneError> {
        if !(6..=94).contains(&self.k) {
            return Err(AutotuneError::PercentileOutOfRange(self.k));
        }
        if !(self.beta > 0.0 && self.beta < 1.0 / 3.0) {
            return Err(AutotuneError::BetaOutOfRange(self.beta));
        }
        if self.g == 0 {
            return Err(AutotuneError::NothingToTune);
        }
        Ok(())
    }
}

/// The derived sampling parameters for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingPlan {
    pub z: f64,
    pub psi_rep: f64,
    pub m_star: u64,
    pub psi_dp: f64,
    /// Bernoulli head-bias for drawing S.
    pub q: f64,
    pub beta_effective: f64,
    pub epsilon_effective: f64,
}

/// Rank interval for a gamma-approximation of the k-th percentile: 1-based
/// ranks ceil((k-gamma)/100*|T|) ..= floor((k+gamma)/100*|T|).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PercentileWindow {
    pub gamma: u32,
    pub lower_index: u64,
    pub upper_index: u64,
}

impl PercentileWindow {
    /// Value bounds in a sorted multiset; None when the rank window is empty.
    pub fn values(&self, sorted: &[f64]) -> Option<(f64, f64)> {
        if self.lower_index == 0 || self.upper_index < self.lower_index {
            return None;
        }
        let lo = sorted.get(self.lower_index as usize - 1)?;
        let hi = sorted.get(self.upper_index as usize - 1)?;
        Some((*lo, *hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TunedValue {
    Groups(u64),
    Magnitude(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TunedParameter {
    pub parameter: TunableParameter,
    /// Grid point the quantile walk returned.
    pub raw_quantile: f64,
    pub value: TunedValue,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AutotuneReport {
    pub tuned: Vec<TunedParameter>,
    pub sampling: SamplingPlan,
    pub sample_size: u64,
    pub remainder_size: u64,
    pub epsilon_per_parameter: f64,
}

/// Whether quantile walks draw noise. NoiseFree exists for tests and the
/// deterministic half of the attack demo; the CLI run path never uses it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QuantileMode {
    Dp,
    NoiseFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AttackMode {
    Deterministic,
    Dp,
}

#[derive(Debug, Error, PartialEq)]
pub enum AutotuneError {
    #[error("percentile {0} outside the supported range 6..=94")]
    PercentileOutOfRange(u32),
    #[error("beta must lie in (0, 1/3), got {0}")]
    BetaOutOfRange(f64),
    #[error("nothing to tune: the plan already provides every required bound")]
    NothingToTune,
    #[error("insufficient data: required sampling rate {required:.4} exceeds 1 at n={n}")]
    InsufficientData { required: f64, n: u64 },
    #[error("empty sample: the Bernoulli draw selected no units")]
    EmptySample,
    #[error("empty input")]
    EmptyInput,
    #[error("window k={k} gamma={gamma} leaves [0, 100]")]
    WindowOutOfRange { k: u32, gamma: u32 },
    #[error(transparent)]
    Scalar(#[from] ScalarError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

/// z(k) = min( k(105-k)/((k-5)(100-k)), (100-k)(k+5)/(k(95-k)) ).
pub fn z_of_k(k: u32) -> Result<f64, AutotuneError> {
    if !(6..=94).contains(&k) {
        return Err(AutotuneError::PercentileOutOfRange(k));
    }
    let kf = f64::from(k);
    let first = kf * (105.0 - kf) / ((kf - 5.0) * (100.0 - kf));
    let second = (100.0 - kf) * (kf + 5.0) / (kf * (95.0 - kf));
    Ok(first.min(second))
}

/// Largest representativeness slack: the psi with (1+psi)/(1-psi) = z(k),
/// found by bisection, minus a 1e-9 margin to keep the inequality strict.
pub fn psi_rep(k: u32) -> Result<f64, AutotuneError> {
    let z = z_of_k(k)?;
    debug_assert!(z > 1.0, "z > 1 throughout 6..=94");
    let f = |psi: f64| (1.0 + psi) / (1.0 - psi) - z;
    let mut lo = 0.0f64;
    let mut hi = 1.0 - 1e-12;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-16 {
            break;
        }
    }
    Ok(0.5 * (lo + hi) - 1e-9)
}

/// Minimum sample size for the DP walk: ceil((160/eps) ln(4470/beta)).
pub fn m_star(epsilon: f64, beta: f64) -> u64 {
    assert!(epsilon > 0.0 && epsilon.is_finite(), "epsilon must be positive");
    assert!(beta > 0.0 && beta < 1.0, "beta must lie in (0, 1)");
    ((160.0 / epsilon) * (4470.0 / beta).ln()).ceil() as u64
}

/// Positive root of psi^2 + c psi - c = 0 with c = (2/m*) ln(1/beta), by
/// bisection to residual below 1e-12.
pub fn psi_dp(m_star: u64, beta: f64) -> f64 {
    assert!(m_star >= 1, "m_star must be at least 1");
    assert!(beta > 0.0 && beta < 1.0, "beta must lie in (0, 1)");
    let c = (2.0 / m_star as f64) * (1.0 / beta).ln();
    let g = |psi: f64| psi * psi + c * psi - c;
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    debug_assert!(g(root).abs() < 1e-12, "bisection residual {}", g(root));
    root
}

/// The sampling rate that makes the tuned value a 10-approximation of the
/// population percentile except with probability ~beta, per parameter.
pub fn required_q(n: u64, epsilon: f64, config: &AutotuneConfig) -> Result<SamplingPlan, AutotuneError> {
    config.validate()?;
    assert!(n >= 1, "dataset must contain at least one unit");
    assert!(epsilon > 0.0 && epsilon.is_finite(), "epsilon must be positive");
    let g = config.g as f64;
    let beta_eff = config.beta / g;
    let eps_eff = epsilon / g;
    let nf = n as f64;
    let kf = f64::from(config.k);

    let z = z_of_k(config.k)?;
    let rep_slack = psi_rep(config.k)?;
    let rep_coeff = (300.0 / (kf - 5.0)).max(20.0).max(300.0 / (95.0 - kf));
    let q_rep = rep_coeff * (5.0 / beta_eff).ln() / (rep_slack * rep_slack * nf);

    let m = m_star(eps_eff, beta_eff);
    let dp_slack = psi_dp(m, beta_eff);
    let q_dp = (2.0 * (1.0 / beta_eff).ln() / (nf * dp_slack * dp_slack))
        .max(m as f64 / ((1.0 - dp_slack) * nf));

    let q = q_rep.max(q_dp);
    if q > 1.0 {
        return Err(AutotuneError::InsufficientData { required: q, n });
    }
    Ok(SamplingPlan {
        z,
        psi_rep: rep_slack,
        m_star: m,
        psi_dp: dp_slack,
        q,
        beta_effective: beta_eff,
        epsilon_effective: eps_eff,
    })
}

/// Tunes every missing bound: partitions units at rate q, derives each
/// parameter's scalar series over the sample S only, and runs one quantile
/// walk per parameter at eps/g. Aggregation must then use the returned
/// partition's remainder, so no unit feeds both stages.
pub fn run_autotune(
    ds: &Dataset,
    plan: &QueryPlan,
    config: &AutotuneConfig,
    seed: u64,
    mode: QuantileMode,
) -> Result<(AutotuneReport, Partition), AutotuneError> {
    let params = missing_bounds(plan);
    if params.is_empty() {
        return Err(AutotuneError::NothingToTune);
    }
    let config = AutotuneConfig { g: params.len(), ..*config };
    let sampling = required_q(ds.n(), plan.epsilon, &config)?;
    let partition = bernoulli_partition(ds, sampling.q, seed)?;
    if partition.sample_units.is_empty() {
        return Err(AutotuneError::EmptySample);
    }
    let sample = ds.subset(&partition.sample_units);

    let mut tuned = Vec::with_capacity(params.len());
    for (index, &parameter) in params.iter().enumerate() {
        let series = derive_scalars(&sample, plan, parameter)?;
        let raw = match mode {
            QuantileMode::Dp => {
                let mut stream = rng::derive_stream(seed, rng::DOMAIN_QUANTILE, index as u64);
                dp_quantile(&series.values, config.k, sampling.epsilon_effective, &mut stream)
            }
            QuantileMode::NoiseFree => noise_free_quantile(&series.values, config.k),
        };
        let value = match parameter {
            TunableParameter::MaxGroupsContributed => {
                TunedValue::Groups(raw.ceil().max(1.0) as u64)
            }
            _ => TunedValue::Magnitude(raw.max(0.1)),
        };
        tuned.push(TunedParameter { parameter, raw_quantile: raw, value });
    }

    let report = AutotuneReport {
        tuned,
        sampling,
        sample_size: partition.sample_units.len() as u64,
        remainder_size: partition.remainder_units.len() as u64,
        epsilon_per_parameter: sampling.epsilon_effective,
    };
    Ok((report, partition))
}

/// Plan bounds merged with tuned values; tuned fields carry provenance.
pub fn resolve_bounds(plan: &QueryPlan, report: &AutotuneReport) -> ContributionBounds {
    let mut bounds = ContributionBounds::from_plan(plan);
    for t in &report.tuned {
        match (t.parameter, t.value) {
            (TunableParameter::MaxGroupsContributed, TunedValue::Groups(c)) => {
                bounds.max_groups_contributed = Some(Bound::tuned(c));
            }
            (TunableParameter::LInf { aggregation }, TunedValue::Magnitude(v)) => {
                bounds.per_aggregation[aggregation].l_inf = Some(Bound::tuned(v));
            }
            (TunableParameter::L1 { aggregation }, TunedValue::Magnitude(v)) => {
                bounds.per_aggregation[aggregation].l_1 = Some(Bound::tuned(v));
            }
            (TunableParameter::L2 { aggregation }, TunedValue::Magnitude(v)) => {
                bounds.per_aggregation[aggregation].l_2 = Some(Bound::tuned(v));
            }
            (p, v) => unreachable!("parameter {p:?} cannot carry value {v:?}"),
        }
    }
    bounds
}

/// Rank window of the gamma-approximation band around the k-th percentile.
pub fn percentile_window(t: &[f64], k: u32, gamma: u32) -> Result<PercentileWindow, AutotuneError> {
    if t.is_empty() {
        return Err(AutotuneError::EmptyInput);
    }
    if gamma > k || k + gamma > 100 {
        return Err(AutotuneError::WindowOutOfRange { k, gamma });
    }
    let len = t.len() as u64;
    let lower_index = (u64::from(k - gamma) * len).div_ceil(100);
    let upper_index = u64::from(k + gamma) * len / 100;
    Ok(PercentileWindow { gamma, lower_index, upper_index })
}

const ATTACK_NORMAL_ONLY: usize = 82;
const ATTACK_BOTH_GROUPS: usize = 17;
const ATTACK_CALIBRATION_TRIALS: u64 = 2000;
const DOMAIN_ATTACK_TRIAL: &str = "attack-trial";
const DOMAIN_ATTACK_CALIBRATE: &str = "attack-calibrate";

fn attack_scalars(secret_bit: bool) -> Vec<f64> {
    let mut s = vec![1.0; ATTACK_NORMAL_ONLY];
    s.extend(std::iter::repeat_n(2.0, ATTACK_BOTH_GROUPS));
    s.push(if secret_bit { 2.0 } else { 1.0 });
    s
}

fn attack_tuned_cap(scalars: &[f64], mode: AttackMode, epsilon: f64, rng: &mut impl Rng) -> u64 {
    let raw = match mode {
        AttackMode::Deterministic => exact_quantile(scalars, 83).expect("attack set is nonempty"),
        AttackMode::Dp => dp_quantile(scalars, 83, epsilon, rng),
    };
    raw.ceil().max(1.0) as u64
}

/// Reproduces the quantile-leak attack: an adversary surrounds Alice with 82
/// normal-only units and 17 both-group units, so the 83rd-percentile group
/// count equals Alice's. Each trial tunes max_groups_contributed on that
/// dataset, releases the "normal" sum with noise scaled by the tuned cap
/// (l_inf = 1), and lets the attacker subtract the known pre-noise sum and
/// run a maximum-likelihood test on (tuned cap, noise sample). Returns the
/// fraction of trials where the attacker guesses Alice's bit.
pub fn sybil_attack_demo(mode: AttackMode, epsilon: f64, trials: u64, seed: u64) -> f64 {
    assert!(trials >= 1, "at least one trial required");
    assert!(epsilon > 0.0 && epsilon.is_finite(), "epsilon must be positive");

    // Attacker-side calibration: empirical distribution of the tuned cap
    // under each hypothesis.
    let mut cap_counts: [BTreeMap<u64, u64>; 2] = [BTreeMap::new(), BTreeMap::new()];
    for bit in [false, true] {
        let scalars = attack_scalars(bit);
        for j in 0..ATTACK_CALIBRATION_TRIALS {
            let mut rng = rng::derive_stream(
                seed,
                DOMAIN_ATTACK_CALIBRATE,
                u64::from(bit) * ATTACK_CALIBRATION_TRIALS + j,
            );
            let cap = attack_tuned_cap(&scalars, mode, epsilon, &mut rng);
            *cap_counts[usize::from(bit)].entry(cap).or_insert(0) += 1;
        }
    }
    let cap_likelihood = |bit: usize, cap: u64| {
        // Additive smoothing keeps unseen caps from zeroing a hypothesis.
        (cap_counts[bit].get(&cap).copied().unwrap_or(0) as f64 + 0.5)
            / (ATTACK_CALIBRATION_TRIALS as f64 + 1.0)
    };
    let laplace_pdf = |x: f64, scale: f64| (-x.abs() / scale).exp() / (2.0 * scale);

    let mut correct = 0u64;
    for t in 0..trials {
        let mut rng = rng::derive_stream(seed, DOMAIN_ATTACK_TRIAL, t);
        let secret_bit = rng.random::<bool>();
        let scalars = attack_scalars(secret_bit);
        let cap = attack_tuned_cap(&scalars, mode, epsilon, &mut rng);

        // Released "normal" sum: every unit contributes 1, so the pre-noise
        // value 100 is known to the attacker exactly.
        let true_normal_sum = (ATTACK_NORMAL_ONLY + ATTACK_BOTH_GROUPS + 1) as f64;
        let noise_scale = cap as f64 / epsilon;
        let released = true_normal_sum + sample_laplace(noise_scale, &mut rng);
        let measured_noise = released - true_normal_sum;

        // The noise density is the same under both hypotheses given the cap,
        // so the ratio is driven by the cap distributions; the density is
        // kept for the full likelihood shape.
        let score = |bit: usize| cap_likelihood(bit, cap) * laplace_pdf(measured_noise, noise_scale);
        let guess = match score(1).partial_cmp(&score(0)).expect("finite likelihoods") {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => rng.random::<bool>(),
        };
        if guess == secret_bit {
            correct += 1;
        }
    }
    correct as f64 / trials as f64
}
