//! Noise primitives, mergeable partial aggregation, and the final release.
//!
//! Aggregation follows a leaf/root shape: leaves compute exact per-group
//! sums over disjoint unit streams, the root merges them and adds noise
//! once. Sums accumulate in Q64.64 fixed point (i128), so addition is
//! associative and the pre-noise result is bit-identical for every shard
//! layout. All noise is drawn at the root from one stream.

use crate::bounding::{BoundedUnit, BoundingError, ContributionBounds};
use crate::query::{DomainMode, QueryPlan};
use rand::distr::Open01;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    Laplace,
    Gaussian,
}

#[derive(Debug, Error, PartialEq)]
pub enum MechanismError {
    #[error("value {value} cannot be represented in the fixed-point accumulator")]
    ValueOutOfRange { value: f64 },
    #[error("aggregate overflow")]
    Overflow,
    #[error("partial aggregates have different schemas: {a} vs {b} aggregations")]
    SchemaMismatch { a: usize, b: usize },
    #[error("bounds are insufficient for {mechanism:?} noise on aggregation {aggregation}")]
    InsufficientBounds { mechanism: Mechanism, aggregation: usize },
    #[error("open-set release requires delta > 0 for thresholding")]
    ThresholdingImpossible,
    #[error("the Gaussian mechanism requires delta > 0")]
    GaussianRequiresDelta,
    #[error(transparent)]
    Bounding(#[from] BoundingError),
}

/// One draw from Laplace(0, scale) by inverse CDF on a (0,1) uniform.
pub fn sample_laplace(scale: f64, rng: &mut impl Rng) -> f64 {
    assert!(scale > 0.0 && scale.is_finite(), "laplace scale must be positive");
    let u: f64 = rng.sample(Open01);
    if u < 0.5 {
        scale * (2.0 * u).ln()
    } else {
        -scale * (2.0 * (1.0 - u)).ln()
    }
}

/// One draw from Normal(0, sigma^2).
pub fn sample_gaussian(sigma: f64, rng: &mut impl Rng) -> f64 {
    assert!(sigma > 0.0 && sigma.is_finite(), "gaussian sigma must be positive");
    rng.sample(Normal::new(0.0, sigma).expect("finite positive sigma"))
}

/// Standard deviation of the analytic Gaussian mechanism:
/// `sensitivity * sqrt(2 ln(1.25/delta)) / epsilon`.
pub fn gaussian_sigma(l2_sensitivity: f64, epsilon: f64, delta: f64) -> f64 {
    l2_sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

/// Worst-case change to one aggregation's sum vector from dropping a unit:
/// L1 (Laplace) is min(l_1, C*l_inf); L2 (Gaussian) is min(l_2, sqrt(C)*l_inf).
pub fn sensitivity(
    bounds: &ContributionBounds,
    aggregation: usize,
    mechanism: Mechanism,
) -> Result<f64, MechanismError> {
    let agg = bounds.per_aggregation.get(aggregation).ok_or(MechanismError::SchemaMismatch {
        a: bounds.per_aggregation.len(),
        b: aggregation + 1,
    })?;
    let cap = bounds.max_groups_contributed.as_ref().map(|b| b.value as f64);
    let l_inf = agg.l_inf.as_ref().map(|b| b.value);
    let mut best = f64::INFINITY;
    match mechanism {
        Mechanism::Laplace => {
            if let Some(l_1) = &agg.l_1 {
                best = best.min(l_1.value);
            }
            if let (Some(c), Some(inf)) = (cap, l_inf) {
                best = best.min(c * inf);
            }
        }
        Mechanism::Gaussian => {
            if let Some(l_2) = &agg.l_2 {
                best = best.min(l_2.value);
            }
            if let (Some(c), Some(inf)) = (cap, l_inf) {
                best = best.min(c.sqrt() * inf);
            }
        }
    }
    if best.is_finite() {
        Ok(best)
    } else {
        Err(MechanismError::InsufficientBounds { mechanism, aggregation })
    }
}

/// Q64.64 fixed-point accumulator. Scaling by 2^64 is exact in f64, so the
/// conversion only truncates mass below 2^-64; integer addition afterwards
/// is associative, which merge order relies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FixedSum(i128);

const FIXED_SCALE: f64 = 1.8446744073709552e19; // 2^64
const FIXED_MAX_ABS: f64 = 4.611686018427388e18; // 2^62, headroom before i128 overflow

impl FixedSum {
    pub const ZERO: FixedSum = FixedSum(0);

    pub fn from_f64(value: f64) -> Result<FixedSum, MechanismError> {
        if !value.is_finite() || value.abs() >= FIXED_MAX_ABS {
            return Err(MechanismError::ValueOutOfRange { value });
        }
        Ok(FixedSum((value * FIXED_SCALE) as i128))
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / FIXED_SCALE
    }

    pub fn checked_add(self, rhs: FixedSum) -> Result<FixedSum, MechanismError> {
        self.0.checked_add(rhs.0).map(FixedSum).ok_or(MechanismError::Overflow)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub sums: Vec<FixedSum>,
    pub distinct_unit_count: u64,
}

/// Exact per-group sums and distinct-unit counts, mergeable across shards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialAggregate {
    num_aggregations: usize,
    groups: BTreeMap<Vec<String>, GroupAggregate>,
}

impl PartialAggregate {
    pub fn empty(num_aggregations: usize) -> Self {
        PartialAggregate { num_aggregations, groups: BTreeMap::new() }
    }

    pub fn num_aggregations(&self) -> usize {
        self.num_aggregations
    }

    pub fn groups(&self) -> &BTreeMap<Vec<String>, GroupAggregate> {
        &self.groups
    }

    pub fn add_unit(&mut self, unit: &BoundedUnit) -> Result<(), MechanismError> {
        for (key, values) in &unit.groups {
            if values.len() != self.num_aggregations {
                return Err(MechanismError::SchemaMismatch {
                    a: self.num_aggregations,
                    b: values.len(),
                });
            }
            let entry = self.groups.entry(key.clone()).or_insert_with(|| GroupAggregate {
                sums: vec![FixedSum::ZERO; self.num_aggregations],
                distinct_unit_count: 0,
            });
            for (slot, v) in entry.sums.iter_mut().zip(values) {
                *slot = slot.checked_add(FixedSum::from_f64(*v)?)?;
            }
            entry.distinct_unit_count =
                entry.distinct_unit_count.checked_add(1).ok_or(MechanismError::Overflow)?;
        }
        Ok(())
    }
}

/// Folds a stream of bounded units into one exact partial aggregate.
pub fn aggregate_partial<'a>(
    units: impl IntoIterator<Item = &'a BoundedUnit>,
    num_aggregations: usize,
) -> Result<PartialAggregate, MechanismError> {
    let mut p = PartialAggregate::empty(num_aggregations);
    for unit in units {
        p.add_unit(unit)?;
    }
    Ok(p)
}

/// Pointwise sum over the union of groups. Commutative and associative with
/// the empty partial as identity.
pub fn merge(a: &PartialAggregate, b: &PartialAggregate) -> Result<PartialAggregate, MechanismError> {
    if a.num_aggregations != b.num_aggregations {
        return Err(MechanismError::SchemaMismatch { a: a.num_aggregations, b: b.num_aggregations });
    }
    let mut out = a.clone();
    for (key, add) in &b.groups {
        let entry = out.groups.entry(key.clone()).or_insert_with(|| GroupAggregate {
            sums: vec![FixedSum::ZERO; out.num_aggregations],
            distinct_unit_count: 0,
        });
        for (slot, v) in entry.sums.iter_mut().zip(&add.sums) {
            *slot = slot.checked_add(*v)?;
        }
        entry.distinct_unit_count = entry
            .distinct_unit_count
            .checked_add(add.distinct_unit_count)
            .ok_or(MechanismError::Overflow)?;
    }
    Ok(out)
}

/// Noisy-count gate for open-set release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub tau: f64,
    pub delta_threshold: f64,
    pub epsilon_select: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub key: Vec<String>,
    pub sums: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismInfo {
    pub mechanism: Mechanism,
    pub epsilon_per_aggregation: f64,
    pub noise_scales: Vec<f64>,
    pub threshold: Option<ThresholdSpec>,
}

/// The released histogram: noised rows, suppression bookkeeping, mechanism
/// metadata, and the bounds (with provenance) the run enforced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DPHistogram {
    pub rows: Vec<HistogramRow>,
    pub suppressed_group_count: u64,
    pub mechanism: MechanismInfo,
    pub bounds: ContributionBounds,
}

/// Noises and releases the merged aggregate.
///
/// The privacy budget is split evenly: each aggregation gets one share, and
/// open-set mode reserves one extra share for group selection. Open-set
/// groups are released only when their distinct-unit count plus
/// Laplace(C/eps_select) noise clears tau = 1 + (C/eps_select) ln(C/(2 delta_t));
/// any unit touches at most C groups, so a per-group failure budget of
/// delta_t/C union-bounds to delta_t. Closed-set mode releases the declared
/// domain exactly, absent groups as noised zeros.
pub fn finalize(
    partial: &PartialAggregate,
    plan: &QueryPlan,
    bounds: &ContributionBounds,
    mechanism: Mechanism,
    rng: &mut impl Rng,
) -> Result<DPHistogram, MechanismError> {
    let missing = bounds.unresolved(plan);
    if !missing.is_empty() {
        return Err(BoundingError::Unresolved { missing }.into());
    }
    let num_aggs = plan.aggregations.len();
    if partial.num_aggregations != num_aggs {
        return Err(MechanismError::SchemaMismatch { a: partial.num_aggregations, b: num_aggs });
    }
    let open = matches!(plan.domain_mode, DomainMode::OpenSet);
    let shares = if open { num_aggs + 1 } else { num_aggs };
    let eps_share = plan.epsilon / shares as f64;

    if mechanism == Mechanism::Gaussian && plan.delta <= 0.0 {
        return Err(MechanismError::GaussianRequiresDelta);
    }
    let mut noise_scales = Vec::with_capacity(num_aggs);
    for i in 0..num_aggs {
        let sens = sensitivity(bounds, i, mechanism)?;
        let scale = match mechanism {
            Mechanism::Laplace => sens / eps_share,
            Mechanism::Gaussian => gaussian_sigma(sens, eps_share, plan.delta / 2.0),
        };
        noise_scales.push(scale);
    }
    let draw = |scale: f64, rng: &mut _| match mechanism {
        Mechanism::Laplace => sample_laplace(scale, rng),
        Mechanism::Gaussian => sample_gaussian(scale, rng),
    };

    let mut rows = Vec::new();
    let mut suppressed_group_count = 0u64;
    let threshold = if open {
        let delta_threshold = match mechanism {
            Mechanism::Laplace => plan.delta,
            Mechanism::Gaussian => plan.delta / 2.0,
        };
        if delta_threshold <= 0.0 {
            return Err(MechanismError::ThresholdingImpossible);
        }
        let cap = bounds
            .max_groups_contributed
            .as_ref()
            .expect("open-set bounds resolved imply a group cap")
            .value as f64;
        let epsilon_select = eps_share;
        let tau = (1.0 + (cap / epsilon_select) * (cap / (2.0 * delta_threshold)).ln()).max(1.0);
        for (key, agg) in &partial.groups {
            let noisy_count =
                agg.distinct_unit_count as f64 + sample_laplace(cap / epsilon_select, rng);
            if noisy_count >= tau {
                let sums = agg
                    .sums
                    .iter()
                    .zip(&noise_scales)
                    .map(|(s, scale)| s.to_f64() + draw(*scale, rng))
                    .collect();
                rows.push(HistogramRow { key: key.clone(), sums });
            } else {
                suppressed_group_count += 1;
            }
        }
        Some(ThresholdSpec { tau, delta_threshold, epsilon_select })
    } else {
        let DomainMode::ClosedSet(domain) = &plan.domain_mode else { unreachable!() };
        let declared: BTreeSet<Vec<String>> = domain.iter().cloned().collect();
        for key in &declared {
            let sums = match partial.groups.get(key) {
                Some(agg) => agg.sums.clone(),
                None => vec![FixedSum::ZERO; num_aggs],
            };
            let sums = sums
                .iter()
                .zip(&noise_scales)
                .map(|(s, scale)| s.to_f64() + draw(*scale, rng))
                .collect();
            rows.push(HistogramRow { key: key.clone(), sums });
        }
        suppressed_group_count =
            partial.groups.keys().filter(|k| !declared.contains(*k)).count() as u64;
        None
    };

    Ok(DPHistogram {
        rows,
        suppressed_group_count,
        mechanism: MechanismInfo {
            mechanism,
            epsilon_per_aggregation: eps_share,
            noise_scales,
            threshold,
        },
        bounds: bounds.clone(),
    })
}
