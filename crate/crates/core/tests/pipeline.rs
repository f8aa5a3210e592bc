//! Cross-module flows: tune on the sample, aggregate the remainder, release
//! under ledger control.

use dpgroup_core::autotune::{run_autotune, AutotuneConfig, QuantileMode, resolve_bounds};
use dpgroup_core::bounding::{bound_unit, check_bounds, ContributionBounds};
use dpgroup_core::dataset::{Dataset, UploadRow};
use dpgroup_core::ledger::{BudgetLedger, Stage};
use dpgroup_core::mechanisms::{aggregate_partial, finalize, Mechanism};
use dpgroup_core::query::{parse_query, DomainMode, QueryPlan};
use dpgroup_core::rng;
use rand::Rng;
use std::collections::BTreeSet;

fn row(unit: &str, key: &str, v: f64) -> UploadRow {
    UploadRow {
        unit_id: unit.into(),
        keys: [("city".to_string(), key.to_string())].into(),
        values: [("spend".to_string(), v)].into(),
    }
}

fn open_plan() -> QueryPlan {
    parse_query(
        "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS(epsilon=1, delta=1e-5) \
         city, SUM(spend) @{L_inf=2} AS total FROM uploads GROUP BY city",
    )
    .unwrap()
}

/// Units touch one to three groups; values vary but stay within l_inf = 2.
fn synthetic_dataset(n: usize) -> Dataset {
    let cities = ["ada", "bly", "cori", "dale", "eyre"];
    let mut data_rng = rng::derive_stream(99, "pipeline-test-data", 0);
    let mut rows = Vec::new();
    for i in 0..n {
        let id = format!("u{i:06}");
        let touched = 1 + data_rng.random_range(0..3usize);
        for c in 0..touched {
            rows.push(row(&id, cities[(i + c) % cities.len()], data_rng.random_range(-2.0..2.0)));
        }
    }
    Dataset::from_rows(rows).unwrap()
}

#[test]
fn tuned_open_set_run_releases_and_charges_disjoint_stages() {
    let plan = open_plan();
    let ds = synthetic_dataset(30_000);
    let seed = 41;

    let (report, partition) =
        run_autotune(&ds, &plan, &AutotuneConfig::default(), seed, QuantileMode::Dp).unwrap();
    // The partition covers the dataset exactly once.
    assert!(partition.sample_units.is_disjoint(&partition.remainder_units));
    assert_eq!(
        partition.sample_units.len() + partition.remainder_units.len(),
        ds.n() as usize
    );
    assert!(report.sample_size as usize >= report.sampling.m_star as usize / 2);

    // Tuning resolved everything the plan left open.
    let bounds = resolve_bounds(&plan, &report);
    bounds.validate().unwrap();
    assert!(bounds.unresolved(&plan).is_empty());
    let cap = bounds.max_groups_contributed.unwrap().value;
    assert!((1..=3).contains(&cap), "tuned cap {cap} outside the data's range");

    // Aggregation sees remainder units only.
    let remainder = ds.subset(&partition.remainder_units);
    let bounded: Vec<_> = remainder
        .units()
        .map(|(id, rows)| bound_unit(id, rows, &plan, &bounds, seed).unwrap())
        .collect();
    for u in &bounded {
        assert!(check_bounds(u, &bounds));
    }
    let partial = aggregate_partial(bounded.iter(), 1).unwrap();
    let total_groups = partial.groups().len() as u64;

    let mut finalize_rng = rng::derive_stream(seed, rng::DOMAIN_FINALIZE, 0);
    let hist = finalize(&partial, &plan, &bounds, Mechanism::Laplace, &mut finalize_rng).unwrap();
    assert_eq!(hist.rows.len() as u64 + hist.suppressed_group_count, total_groups);
    let released: BTreeSet<&Vec<String>> = hist.rows.iter().map(|r| &r.key).collect();
    for key in released {
        assert!(partial.groups().contains_key(key), "released group never aggregated");
    }
    // Five populous groups at n=30k clear any reasonable threshold.
    assert_eq!(hist.rows.len(), 5);

    // Budget: quantile charge for S, aggregation charge for the remainder.
    let mut ledger = BudgetLedger::default();
    ledger.charge(&partition.sample_units, Stage::Quantile, 1).unwrap();
    ledger.charge(&partition.remainder_units, Stage::Aggregation, 1).unwrap();
    assert!(ledger
        .units_in_stage(Stage::Quantile)
        .is_disjoint(&ledger.units_in_stage(Stage::Aggregation)));
    assert_eq!(ledger.units.len(), ds.n() as usize);
    let token = ledger.commit_release("run-digest").unwrap();
    assert_eq!(token.version, 1);
}

#[test]
fn tuned_cap_is_enforced_during_bounding() {
    // Units touching five groups, tuned against a dataset where the 83rd
    // percentile of group counts is 2: bounding must drop groups.
    let plan = open_plan();
    let mut rows = Vec::new();
    for i in 0..12_000 {
        let id = format!("u{i:05}");
        let touched = if i % 10 < 9 { 2 } else { 5 };
        for c in 0..touched {
            rows.push(row(&id, &format!("g{c}"), 1.0));
        }
    }
    let ds = Dataset::from_rows(rows).unwrap();
    let (report, partition) =
        run_autotune(&ds, &plan, &AutotuneConfig::default(), 17, QuantileMode::NoiseFree).unwrap();
    let bounds = resolve_bounds(&plan, &report);
    assert_eq!(bounds.max_groups_contributed.unwrap().value, 2);

    let remainder = ds.subset(&partition.remainder_units);
    for (id, unit_rows) in remainder.units() {
        let bounded = bound_unit(id, unit_rows, &plan, &bounds, 17).unwrap();
        assert!(bounded.groups.len() <= 2, "unit {id} kept {} groups", bounded.groups.len());
    }
}

#[test]
fn closed_set_run_needs_no_tuning_and_covers_the_domain() {
    let mut plan = parse_query(
        "SELECT WITH DIFFERENTIAL_PRIVACY OPTIONS(epsilon=1, delta=0, max_groups_contributed=2) \
         city, SUM(spend) @{L_inf=2, L_1=3} AS total FROM uploads GROUP BY city",
    )
    .unwrap();
    plan.domain_mode = DomainMode::ClosedSet(vec![
        vec!["ada".into()],
        vec!["bly".into()],
        vec!["nowhere".into()],
    ]);
    assert!(dpgroup_core::query::missing_bounds(&plan).is_empty());

    let ds = synthetic_dataset(500);
    let bounds = ContributionBounds::from_plan(&plan);
    let bounded: Vec<_> = ds
        .units()
        .map(|(id, rows)| bound_unit(id, rows, &plan, &bounds, 3).unwrap())
        .collect();
    let partial = aggregate_partial(bounded.iter(), 1).unwrap();
    let mut finalize_rng = rng::derive_stream(3, rng::DOMAIN_FINALIZE, 0);
    let hist = finalize(&partial, &plan, &bounds, Mechanism::Laplace, &mut finalize_rng).unwrap();

    let keys: Vec<&Vec<String>> = hist.rows.iter().map(|r| &r.key).collect();
    assert_eq!(
        keys,
        [&vec!["ada".to_string()], &vec!["bly".to_string()], &vec!["nowhere".to_string()]]
    );
    assert!(hist.mechanism.threshold.is_none());
    // Groups observed in the data but not declared are suppressed.
    assert_eq!(hist.suppressed_group_count, 3);
}

#[test]
fn fixed_seed_reproduces_the_release_exactly() {
    let plan = open_plan();
    let ds = synthetic_dataset(25_000);
    let run = |seed: u64| {
        let (report, partition) =
            run_autotune(&ds, &plan, &AutotuneConfig::default(), seed, QuantileMode::Dp).unwrap();
        let bounds = resolve_bounds(&plan, &report);
        let remainder = ds.subset(&partition.remainder_units);
        let bounded: Vec<_> = remainder
            .units()
            .map(|(id, rows)| bound_unit(id, rows, &plan, &bounds, seed).unwrap())
            .collect();
        let partial = aggregate_partial(bounded.iter(), 1).unwrap();
        let mut finalize_rng = rng::derive_stream(seed, rng::DOMAIN_FINALIZE, 0);
        let hist = finalize(&partial, &plan, &bounds, Mechanism::Laplace, &mut finalize_rng).unwrap();
        serde_json::to_string(&hist).unwrap()
    };
    assert_eq!(run(7), run(7), "same seed must reproduce the identical release");
    assert_ne!(run(7), run(8), "different seeds should perturb the noise");
}
