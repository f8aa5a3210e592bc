//! Property tests: parser round-trips, bounding postconditions, and the
//! merge monoid.

use dpgroup_core::bounding::{bound_unit, check_bounds, AggregationBounds, Bound, ContributionBounds};
use dpgroup_core::dataset::UploadRow;
use dpgroup_core::mechanisms::{aggregate_partial, merge, PartialAggregate};
use dpgroup_core::query::{parse_query, render_query, AggregationSpec, DomainMode, QueryPlan};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn ident() -> impl Strategy<Value = String> {
    // The c_ prefix keeps generated names clear of query keywords.
    "[a-z][a-z0-9_]{0,6}".prop_map(|s| format!("c_{s}"))
}

fn bound_value() -> impl Strategy<Value = Option<f64>> {
    prop::option::of(0.001f64..1000.0)
}

fn aggregation() -> impl Strategy<Value = AggregationSpec> {
    // Norm hints must sit at or above l_inf when both are declared, so the
    // optional L_1/L_2 values are generated as multiples of the base.
    (
        ident(),
        ident(),
        prop::option::of(0.001f64..100.0),
        prop::option::of(1.0f64..50.0),
        prop::option::of(1.0f64..50.0),
    )
        .prop_map(|(input_column, alias, l_inf, m_1, m_2)| {
            let base = l_inf.unwrap_or(0.5);
            AggregationSpec {
                input_column,
                alias,
                l_inf,
                l_1: m_1.map(|m| base * m),
                l_2: m_2.map(|m| base * m),
            }
        })
}

fn plan() -> impl Strategy<Value = QueryPlan> {
    (
        0.001f64..100.0,
        prop_oneof![Just(0.0), 1e-9f64..0.01],
        prop::option::of(1u64..100),
        prop::collection::vec(ident(), 1..3),
        prop::collection::vec(aggregation(), 1..3),
        ident(),
    )
        .prop_map(|(epsilon, delta, max_groups_contributed, group_keys, mut aggregations, source_table)| {
            for (i, agg) in aggregations.iter_mut().enumerate() {
                agg.alias = format!("{}_{i}", agg.alias);
            }
            QueryPlan {
                epsilon,
                delta,
                max_groups_contributed,
                group_keys,
                aggregations,
                source_table,
                domain_mode: DomainMode::OpenSet,
            }
        })
}

proptest! {
    #[test]
    fn render_parse_round_trip(plan in plan()) {
        let text = render_query(&plan);
        let reparsed = parse_query(&text).expect("rendered queries must parse");
        prop_assert_eq!(reparsed, plan);
    }

    #[test]
    fn parser_never_panics_on_garbage(text in "\\PC{0,120}") {
        let _ = parse_query(&text);
    }

    #[test]
    fn parser_never_panics_on_query_like_soup(
        tokens in prop::collection::vec(
            prop_oneof![
                Just("SELECT".to_string()), Just("WITH".to_string()),
                Just("DIFFERENTIAL_PRIVACY".to_string()), Just("OPTIONS".to_string()),
                Just("SUM".to_string()), Just("FROM".to_string()),
                Just("GROUP".to_string()), Just("BY".to_string()),
                Just("AS".to_string()), Just("@{".to_string()), Just("}".to_string()),
                Just("(".to_string()), Just(")".to_string()), Just(",".to_string()),
                Just("=".to_string()), Just("epsilon".to_string()),
                Just("1.5".to_string()), Just("x".to_string()),
            ],
            0..40,
        )
    ) {
        let _ = parse_query(&tokens.join(" "));
    }
}

/// A single unit's raw rows over `num_aggs` value columns and a small group
/// pool, plus fully resolved bounds to enforce on it.
#[derive(Debug, Clone)]
struct BoundingCase {
    rows: Vec<UploadRow>,
    plan: QueryPlan,
    bounds: ContributionBounds,
    seed: u64,
}

fn value_columns(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i}")).collect()
}

fn bounding_plan(num_aggs: usize) -> QueryPlan {
    QueryPlan {
        epsilon: 1.0,
        delta: 1e-6,
        max_groups_contributed: None,
        group_keys: vec!["k".into()],
        aggregations: value_columns(num_aggs)
            .into_iter()
            .map(|c| AggregationSpec {
                input_column: c.clone(),
                alias: format!("sum_{c}"),
                l_inf: None,
                l_1: None,
                l_2: None,
            })
            .collect(),
        source_table: "t".into(),
        domain_mode: DomainMode::OpenSet,
    }
}

fn bounding_case() -> impl Strategy<Value = BoundingCase> {
    (1usize..=3)
        .prop_flat_map(|num_aggs| {
            let rows = prop::collection::vec(
                (0u8..8, prop::collection::vec(-1e4f64..1e4, num_aggs..=num_aggs)),
                0..25,
            );
            let per_agg = prop::collection::vec(
                (0.01f64..100.0, bound_value(), bound_value()),
                num_aggs..=num_aggs,
            );
            (Just(num_aggs), rows, 1u64..=5, per_agg, any::<u64>())
        })
        .prop_map(|(num_aggs, raw_rows, cap, per_agg, seed)| {
            let columns = value_columns(num_aggs);
            let rows = raw_rows
                .into_iter()
                .map(|(group, values)| UploadRow {
                    unit_id: "u".into(),
                    keys: [("k".to_string(), format!("g{group}"))].into(),
                    values: columns.iter().cloned().zip(values).collect(),
                })
                .collect();
            let bounds = ContributionBounds {
                max_groups_contributed: Some(Bound::given(cap)),
                per_aggregation: per_agg
                    .into_iter()
                    .map(|(l_inf, l_1, l_2)| AggregationBounds {
                        l_inf: Some(Bound::given(l_inf)),
                        l_1: l_1.map(Bound::given),
                        l_2: l_2.map(Bound::given),
                    })
                    .collect(),
            };
            BoundingCase { rows, plan: bounding_plan(num_aggs), bounds, seed }
        })
}

/// Reconstructs one row per retained group so a bounded unit can be fed
/// through bounding again.
fn rows_of_bounded(u: &dpgroup_core::bounding::BoundedUnit, columns: &[String]) -> Vec<UploadRow> {
    u.groups
        .iter()
        .map(|(key, values)| UploadRow {
            unit_id: u.unit_id.clone(),
            keys: [("k".to_string(), key[0].clone())].into(),
            values: columns.iter().cloned().zip(values.iter().copied()).collect(),
        })
        .collect()
}

proptest! {
    #[test]
    fn bounding_always_satisfies_its_own_check(case in bounding_case()) {
        let u = bound_unit("u", &case.rows, &case.plan, &case.bounds, case.seed).unwrap();
        prop_assert!(check_bounds(&u, &case.bounds));
        prop_assert!(u.groups.len() as u64 <= case.bounds.max_groups_contributed.unwrap().value);
    }

    #[test]
    fn bounding_is_idempotent(case in bounding_case()) {
        let once = bound_unit("u", &case.rows, &case.plan, &case.bounds, case.seed).unwrap();
        let columns = value_columns(case.plan.aggregations.len());
        let again =
            bound_unit("u", &rows_of_bounded(&once, &columns), &case.plan, &case.bounds, case.seed)
                .unwrap();
        prop_assert_eq!(once, again);
    }

    #[test]
    fn loosening_the_group_cap_only_adds_groups(case in bounding_case()) {
        // Keep-set nesting: raising C retains a superset of the groups.
        let tight = bound_unit("u", &case.rows, &case.plan, &case.bounds, case.seed).unwrap();
        let mut looser = case.bounds.clone();
        let cap = looser.max_groups_contributed.unwrap().value;
        looser.max_groups_contributed = Some(Bound::given(cap + 1));
        let loose = bound_unit("u", &case.rows, &case.plan, &looser, case.seed).unwrap();
        for key in tight.groups.keys() {
            prop_assert!(loose.groups.contains_key(key));
        }
    }
}

fn partial_from_values(units: &[(String, Vec<(String, [f64; 2])>)]) -> PartialAggregate {
    let bounded: Vec<_> = units
        .iter()
        .map(|(id, groups)| dpgroup_core::bounding::BoundedUnit {
            unit_id: id.clone(),
            groups: groups
                .iter()
                .map(|(g, vs)| (vec![g.clone()], vs.to_vec()))
                .collect::<BTreeMap<_, _>>(),
        })
        .collect();
    aggregate_partial(bounded.iter(), 2).unwrap()
}

fn unit_batch(prefix: &'static str) -> impl Strategy<Value = Vec<(String, Vec<(String, [f64; 2])>)>> {
    prop::collection::vec(
        (
            0u8..4,
            prop::collection::vec((0u8..4, [-100f64..100.0, -100f64..100.0]), 1..4),
        ),
        0..4,
    )
    .prop_map(move |units| {
        units
            .into_iter()
            .enumerate()
            .map(|(i, (_, groups))| {
                (
                    format!("{prefix}{i}"),
                    groups
                        .into_iter()
                        .map(|(g, vs)| (format!("g{g}"), vs))
                        .collect(),
                )
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn merge_is_a_commutative_monoid(
        a in unit_batch("a"), b in unit_batch("b"), c in unit_batch("c")
    ) {
        let (pa, pb, pc) = (partial_from_values(&a), partial_from_values(&b), partial_from_values(&c));
        let ab_c = merge(&merge(&pa, &pb).unwrap(), &pc).unwrap();
        let a_bc = merge(&pa, &merge(&pb, &pc).unwrap()).unwrap();
        prop_assert_eq!(&ab_c, &a_bc);
        let ba = merge(&pb, &pa).unwrap();
        prop_assert_eq!(merge(&pa, &pb).unwrap(), ba);
        let empty = PartialAggregate::empty(2);
        prop_assert_eq!(merge(&pa, &empty).unwrap(), pa);
    }
}
