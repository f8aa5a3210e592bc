//! The budget-consuming run pipeline: parse, authorize, ingest, tune,
//! bound, aggregate, finalize, charge, commit, release.

use crate::RunArgs;
use anyhow::{bail, Context, Result};
use dpgroup_core::autotune::{run_autotune, AutotuneConfig, AutotuneReport, QuantileMode, resolve_bounds};
use dpgroup_core::bounding::{bound_unit, BoundedUnit, ContributionBounds};
use dpgroup_core::dataset::{ingest_csv, ingest_jsonl, CsvMapping, Dataset};
use dpgroup_core::ledger::{authorize, load_policy, AccessRequest, BudgetLedger, Decision, PolicyDocument, Stage};
use dpgroup_core::mechanisms::{aggregate_partial, finalize, merge, DPHistogram, Mechanism, PartialAggregate};
use dpgroup_core::query::{load_domain, missing_bounds, parse_query, render_query, DomainMode, QueryPlan};
use dpgroup_core::rng;
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

/// Identity this binary presents to access policies.
pub const APPLICATION_DIGEST: &str = "sha256:dpgroup-aggregator-v1";
pub const ALGORITHM_GROUP_BY: &str = "dp_group_by";
pub const ALGORITHM_QUANTILE: &str = "dp_quantile";

#[derive(Serialize)]
struct RunReport<'a> {
    query: String,
    master_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    autotune: Option<&'a AutotuneReport>,
    histogram: &'a DPHistogram,
    ledger_version: u64,
    release_digest: String,
}

pub(crate) fn load_plan(
    query_path: &Path,
    domain_path: Option<&Path>,
) -> Result<QueryPlan> {
    let text = fs::read_to_string(query_path)
        .with_context(|| format!("reading query {}", query_path.display()))?;
    let mut plan = parse_query(&text).context("parsing query")?;
    plan.validate().context("validating query")?;
    if let Some(path) = domain_path {
        let domain_text = fs::read_to_string(path)
            .with_context(|| format!("reading domain {}", path.display()))?;
        let tuples =
            load_domain(&domain_text, plan.group_keys.len()).context("loading domain")?;
        plan.domain_mode = DomainMode::ClosedSet(tuples);
    }
    Ok(plan)
}

pub(crate) fn load_dataset(
    data_path: &Path,
    data_map: Option<&Path>,
    plan: &QueryPlan,
) -> Result<Dataset> {
    let file = fs::File::open(data_path)
        .with_context(|| format!("reading data {}", data_path.display()))?;
    let ds = match data_map {
        Some(map_path) => {
            let map_text = fs::read_to_string(map_path)
                .with_context(|| format!("reading data map {}", map_path.display()))?;
            let mapping: CsvMapping =
                serde_json::from_str(&map_text).context("parsing data map")?;
            ingest_csv(file, &mapping, plan).context("ingesting CSV data")?
        }
        None => ingest_jsonl(std::io::BufReader::new(file), plan).context("ingesting data")?,
    };
    Ok(ds)
}

fn require_grant(policy: &PolicyDocument, plan: &QueryPlan, algorithm_id: &str) -> Result<u32> {
    let request = AccessRequest {
        epsilon: plan.epsilon,
        delta: plan.delta,
        algorithm_id: algorithm_id.to_string(),
        application_digest: APPLICATION_DIGEST.to_string(),
    };
    match authorize(policy, &request) {
        Decision::Grant { max_uses_per_upload, .. } => Ok(max_uses_per_upload),
        Decision::Deny { reason } => bail!("authorization denied for {algorithm_id}: {reason}"),
    }
}

/// Bounds and aggregates `units` across `shards` worker threads; unit-to-
/// shard assignment is round-robin over sorted ids and merge order is the
/// shard order, so the result is independent of scheduling and byte-stable
/// for any shard count.
pub(crate) fn sharded_aggregate(
    ds: &Dataset,
    plan: &QueryPlan,
    bounds: &ContributionBounds,
    seed: u64,
    shards: usize,
) -> Result<PartialAggregate> {
    let shards = shards.max(1);
    let ids: Vec<&str> = ds.unit_ids().collect();
    let num_aggs = plan.aggregations.len();
    let partials: Vec<PartialAggregate> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..shards)
            .map(|shard| {
                let ids = &ids;
                scope.spawn(move || -> Result<PartialAggregate> {
                    let mut bounded: Vec<BoundedUnit> = Vec::new();
                    for id in ids.iter().skip(shard).step_by(shards) {
                        let rows = ds.rows(id).expect("id from this dataset");
                        bounded.push(bound_unit(id, rows, plan, bounds, seed)?);
                    }
                    Ok(aggregate_partial(bounded.iter(), num_aggs)?)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("shard thread must not panic"))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut merged = PartialAggregate::empty(num_aggs);
    for partial in &partials {
        merged = merge(&merged, partial)?;
    }
    Ok(merged)
}

pub(crate) fn histogram_digest(hist: &DPHistogram) -> Result<String> {
    let bytes = serde_json::to_vec(hist).context("serializing histogram")?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn write_atomically(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir).context("creating temp output")?;
    std::io::Write::write_all(&mut tmp.as_file(), contents).context("writing report")?;
    tmp.persist(path).context("persisting report")?;
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let started = Instant::now();
    let plan = load_plan(&args.query, args.domain.as_deref())?;

    // Authorization gates everything else: the data file is not opened
    // until the policy admits the request.
    let policy_text = fs::read_to_string(&args.policy)
        .with_context(|| format!("reading policy {}", args.policy.display()))?;
    let policy = load_policy(&policy_text).context("loading policy")?;
    let max_uses = require_grant(&policy, &plan, ALGORITHM_GROUP_BY)?;
    let missing = missing_bounds(&plan);
    if !missing.is_empty() {
        require_grant(&policy, &plan, ALGORITHM_QUANTILE)?;
    }

    let seed = args.seed.unwrap_or_else(|| rand::rng().random());
    let ds = load_dataset(&args.data, args.data_map.as_deref(), &plan)?;

    // Tuning consumes the Bernoulli sample; aggregation gets the rest.
    let (autotune_report, sample_units, aggregation_units) = if missing.is_empty() {
        let all: BTreeSet<String> = ds.unit_ids().map(str::to_owned).collect();
        (None, BTreeSet::new(), all)
    } else {
        let config = AutotuneConfig { g: missing.len(), ..AutotuneConfig::default() };
        let (report, partition) =
            run_autotune(&ds, &plan, &config, seed, QuantileMode::Dp).context("autotuning")?;
        (Some(report), partition.sample_units, partition.remainder_units)
    };
    let bounds = match &autotune_report {
        Some(report) => resolve_bounds(&plan, report),
        None => ContributionBounds::from_plan(&plan),
    };
    bounds.validate().context("validating bounds")?;

    let remainder = ds.subset(&aggregation_units);
    let partial = sharded_aggregate(&remainder, &plan, &bounds, seed, args.shards)?;
    let mut finalize_rng = rng::derive_stream(seed, rng::DOMAIN_FINALIZE, 0);
    let histogram = finalize(&partial, &plan, &bounds, Mechanism::Laplace, &mut finalize_rng)
        .context("finalizing histogram")?;

    // The budget mutation is a hard prerequisite for writing any output.
    let mut ledger = BudgetLedger::load_or_create(&args.ledger).context("loading ledger")?;
    if !sample_units.is_empty() {
        ledger.charge(&sample_units, Stage::Quantile, max_uses).context("charging quantile stage")?;
    }
    ledger
        .charge(&aggregation_units, Stage::Aggregation, max_uses)
        .context("charging aggregation stage")?;
    let digest = histogram_digest(&histogram)?;
    let token = ledger.commit_release(&digest).context("committing release")?;
    ledger.save(&args.ledger).context("saving ledger")?;

    let report = RunReport {
        query: render_query(&plan),
        master_seed: seed,
        autotune: autotune_report.as_ref(),
        histogram: &histogram,
        ledger_version: token.version,
        release_digest: token.digest.clone(),
    };
    let ReportFormatted::Json(body) = format_report(&report, args.format)?;
    write_atomically(&args.output, body.as_bytes())?;

    println!(
        "release committed: ledger version {}, digest {}, report {}",
        token.version,
        token.digest,
        args.output.display()
    );
    eprintln!("run finished in {:.2?}", started.elapsed());
    Ok(())
}

enum ReportFormatted {
    Json(String),
}

fn format_report(report: &RunReport<'_>, format: crate::ReportFormat) -> Result<ReportFormatted> {
    match format {
        crate::ReportFormat::Json => {
            let mut body = serde_json::to_string_pretty(report).context("serializing report")?;
            body.push('\n');
            Ok(ReportFormatted::Json(body))
        }
    }
}
