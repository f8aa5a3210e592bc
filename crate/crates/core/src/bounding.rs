//! Per-unit contribution bounding.
//!
//! Before aggregation, each DP unit's raw rows are reduced to per-group
//! subtotals and forced inside the contribution bounds: per-group magnitudes
//! are clamped to l_inf, at most `max_groups_contributed` groups are kept
//! (a seeded uniform subset, so retention is not data-dependent), and each
//! aggregation's subtotal vector is rescaled to satisfy the L1/L2 norm caps.

use crate::dataset::{self, ScalarError, UploadRow};
use crate::query::{DomainMode, QueryPlan, TunableParameter};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

/// Relative tolerance for norm checks: |v| may exceed a bound l by at most
/// `l.max(1) * CHECK_TOL` and still count as compliant.
pub const CHECK_TOL: f64 = 1e-9;

/// Scaling slack: a norm within `1 + SCALE_SLACK` of its bound is left
/// untouched. Keeps rebounding an already-bounded unit an exact identity
/// while staying far below `CHECK_TOL`.
const SCALE_SLACK: f64 = 1e-12;

/// Whether a bound came from the query text or from the tuning stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Given,
    Tuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound<T> {
    pub value: T,
    pub provenance: Provenance,
}

impl<T> Bound<T> {
    pub fn given(value: T) -> Self {
        Bound { value, provenance: Provenance::Given }
    }

    pub fn tuned(value: T) -> Self {
        Bound { value, provenance: Provenance::Tuned }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregationBounds {
    pub l_inf: Option<Bound<f64>>,
    pub l_1: Option<Bound<f64>>,
    pub l_2: Option<Bound<f64>>,
}

/// The full set of contribution bounds for a query, with per-field
/// provenance so reports can show which values were tuned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionBounds {
    pub max_groups_contributed: Option<Bound<u64>>,
    pub per_aggregation: Vec<AggregationBounds>,
}

/// One unit after bounding: per retained group, the bounded subtotal for
/// each aggregation in plan order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundedUnit {
    pub unit_id: String,
    pub groups: BTreeMap<Vec<String>, Vec<f64>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum BoundingError {
    #[error("contribution bounds incomplete: missing {}", .missing.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(", "))]
    Unresolved { missing: Vec<TunableParameter> },
    #[error("{bound} must be positive and finite")]
    NonPositive { bound: String },
    #[error("max_groups_contributed must be at least 1")]
    ZeroGroupCap,
    #[error(transparent)]
    Scalar(#[from] ScalarError),
}

impl ContributionBounds {
    /// Bounds stated in the query itself, all marked as given.
    pub fn from_plan(plan: &QueryPlan) -> Self {
        ContributionBounds {
            max_groups_contributed: plan.max_groups_contributed.map(Bound::given),
            per_aggregation: plan
                .aggregations
                .iter()
                .map(|agg| AggregationBounds {
                    l_inf: agg.l_inf.map(Bound::given),
                    l_1: agg.l_1.map(Bound::given),
                    l_2: agg.l_2.map(Bound::given),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), BoundingError> {
        if let Some(c) = &self.max_groups_contributed {
            if c.value == 0 {
                return Err(BoundingError::ZeroGroupCap);
            }
        }
        for (i, agg) in self.per_aggregation.iter().enumerate() {
            for (name, bound) in [("L_inf", &agg.l_inf), ("L_1", &agg.l_1), ("L_2", &agg.l_2)] {
                if let Some(b) = bound {
                    if !(b.value > 0.0) || !b.value.is_finite() {
                        return Err(BoundingError::NonPositive {
                            bound: format!("{name} (aggregation {i})"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Parameters still required under the plan's domain mode. Mirrors the
    /// gap analysis on the query, but evaluated against these bounds, which
    /// may already include tuned values.
    pub fn unresolved(&self, plan: &QueryPlan) -> Vec<TunableParameter> {
        let open = matches!(plan.domain_mode, DomainMode::OpenSet);
        let mut needs_cap = false;
        let mut needs_l_inf = Vec::new();
        for (i, agg) in self.per_aggregation.iter().enumerate() {
            let pair_needed = open || (agg.l_1.is_none() && agg.l_2.is_none());
            if !pair_needed {
                continue;
            }
            if self.max_groups_contributed.is_none() {
                needs_cap = true;
            }
            if agg.l_inf.is_none() {
                needs_l_inf.push(i);
            }
        }
        let mut out = Vec::new();
        if needs_cap {
            out.push(TunableParameter::MaxGroupsContributed);
        }
        out.extend(needs_l_inf.into_iter().map(|aggregation| TunableParameter::LInf { aggregation }));
        out
    }
}

/// Bounds one unit. Order matters and is fixed: subtotal, clamp to l_inf,
/// drop groups above the cap, then rescale to the L1/L2 norms (clamped
/// magnitudes are what the norm step sees).
pub fn bound_unit(
    unit_id: &str,
    rows: &[UploadRow],
    plan: &QueryPlan,
    bounds: &ContributionBounds,
    master_seed: u64,
) -> Result<BoundedUnit, BoundingError> {
    let missing = bounds.unresolved(plan);
    if !missing.is_empty() {
        return Err(BoundingError::Unresolved { missing });
    }
    let mut groups = dataset::group_subtotals(unit_id, rows, plan)?;

    for (i, agg) in bounds.per_aggregation.iter().enumerate() {
        if let Some(l_inf) = &agg.l_inf {
            for values in groups.values_mut() {
                values[i] = values[i].clamp(-l_inf.value, l_inf.value);
            }
        }
    }

    if let Some(cap) = &bounds.max_groups_contributed {
        let cap = cap.value as usize;
        if groups.len() > cap {
            let mut ranked: Vec<(u64, Vec<String>)> = groups
                .keys()
                .map(|key| {
                    let parts: Vec<&[u8]> = key.iter().map(|p| p.as_bytes()).collect();
                    (rng::keyed_rank(master_seed, rng::DOMAIN_GROUP_SELECT, unit_id, &parts), key.clone())
                })
                .collect();
            ranked.sort();
            let keep: Vec<Vec<String>> = ranked.into_iter().take(cap).map(|(_, k)| k).collect();
            groups.retain(|key, _| keep.contains(key));
        }
    }

    for (i, agg) in bounds.per_aggregation.iter().enumerate() {
        let mut factor = 1.0f64;
        if let Some(l_1) = &agg.l_1 {
            let n1: f64 = groups.values().map(|v| v[i].abs()).sum();
            if n1 > l_1.value * (1.0 + SCALE_SLACK) {
                factor = factor.min(l_1.value / n1);
            }
        }
        if let Some(l_2) = &agg.l_2 {
            let n2: f64 = groups.values().map(|v| v[i] * v[i]).sum::<f64>().sqrt();
            if n2 > l_2.value * (1.0 + SCALE_SLACK) {
                factor = factor.min(l_2.value / n2);
            }
        }
        if factor < 1.0 {
            for values in groups.values_mut() {
                values[i] *= factor;
            }
        }
    }

    Ok(BoundedUnit { unit_id: unit_id.to_owned(), groups })
}

/// Test oracle: true iff `u` satisfies every invariant of `bounds`, with
/// relative tolerance [`CHECK_TOL`] on magnitude and norm comparisons.
pub fn check_bounds(u: &BoundedUnit, bounds: &ContributionBounds) -> bool {
    let tol = |l: f64| l.max(1.0) * CHECK_TOL;
    if let Some(cap) = &bounds.max_groups_contributed {
        if u.groups.len() as u64 > cap.value {
            return false;
        }
    }
    for values in u.groups.values() {
        if values.len() != bounds.per_aggregation.len() {
            return false;
        }
    }
    for (i, agg) in bounds.per_aggregation.iter().enumerate() {
        if let Some(l_inf) = &agg.l_inf {
            for values in u.groups.values() {
                if values[i].abs() > l_inf.value + tol(l_inf.value) {
                    return false;
                }
            }
        }
        if let Some(l_1) = &agg.l_1 {
            let n1: f64 = u.groups.values().map(|v| v[i].abs()).sum();
            if n1 > l_1.value + tol(l_1.value) {
                return false;
            }
        }
        if let Some(l_2) = &agg.l_2 {
            let n2: f64 = u.groups.values().map(|v| v[i] * v[i]).sum::<f64>().sqrt();
            if n2 > l_2.value + tol(l_2.value) {
                return false;
            }
        }
    }
    true
}
