//! Read-only commands: plan inspection, Monte-Carlo scenario tables, and
//! the Sybil attack demonstration.

use crate::{AttackDemoArgs, AttackModeArg, DataDistribution, PlanArgs, Scenario, SimulateArgs};
use anyhow::{Context, Result};
use dpgroup_core::autotune::{
    m_star, percentile_window, required_q, run_autotune, sybil_attack_demo, AttackMode,
    AutotuneConfig, AutotuneError, QuantileMode, SamplingPlan, TunedValue,
};
use dpgroup_core::quantile::dp_quantile_traced;
use dpgroup_core::query::{missing_bounds, render_query, AggregationSpec, DomainMode, QueryPlan};
use dpgroup_core::rng;
use dpgroup_core::dataset::{Dataset, UploadRow};
use rand::Rng;
use rand_distr::{LogNormal, Pareto};
use serde::Serialize;

#[derive(Serialize)]
struct PlanSummary {
    query: String,
    n: u64,
    status: &'static str,
    missing_bounds: Vec<String>,
    sampling_plan: Option<SamplingPlan>,
}

pub fn cmd_plan(args: &PlanArgs) -> Result<()> {
    let plan = crate::pipeline::load_plan(&args.query, args.domain.as_deref())?;
    let ds = crate::pipeline::load_dataset(&args.data, args.data_map.as_deref(), &plan)?;
    let missing = missing_bounds(&plan);
    let sampling_plan = if missing.is_empty() {
        None
    } else {
        let config = AutotuneConfig { g: missing.len(), ..AutotuneConfig::default() };
        Some(required_q(ds.n(), plan.epsilon, &config).context("computing sampling plan")?)
    };
    let summary = PlanSummary {
        query: render_query(&plan),
        n: ds.n(),
        status: if missing.is_empty() { "nothing to tune" } else { "tuning required" },
        missing_bounds: missing.iter().map(|p| p.to_string()).collect(),
        sampling_plan,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn sample_values(
    distribution: DataDistribution,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<f64> {
    match distribution {
        DataDistribution::Lognormal => {
            let d = LogNormal::new(0.0, 1.0).expect("valid lognormal");
            (0..count).map(|_| rng.sample(d)).collect()
        }
        DataDistribution::Uniform => (0..count).map(|_| rng.random_range(0.0..10.0)).collect(),
        DataDistribution::Pareto => {
            let d = Pareto::new(1.0, 2.0).expect("valid pareto");
            (0..count).map(|_| rng.sample(d)).collect()
        }
    }
}

/// Widens a window edge by the walk's resolution: one additive grid step or
/// one relative step, whichever is larger.
fn widen(lo: f64, hi: f64) -> (f64, f64) {
    (lo - 0.1f64.max(lo.abs() * 0.01), hi + 0.1f64.max(hi.abs() * 0.01))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    anyhow::ensure!(args.trials >= 1, "at least one trial required");
    match args.scenario {
        Scenario::QuantileAccuracy => quantile_accuracy(args),
        Scenario::Representativeness => representativeness(args),
        Scenario::NoiseBound => noise_bound(args),
        Scenario::KSweep => k_sweep(args),
    }
}

fn quantile_accuracy(args: &SimulateArgs) -> Result<()> {
    let m = m_star(args.epsilon, args.beta) as usize;
    println!("trial,result,window_low,window_high,hit");
    let mut hits = 0u64;
    for trial in 0..args.trials {
        let mut data_rng = rng::derive_stream(args.seed, "simulate-data", trial);
        let mut values = sample_values(args.distribution, m, &mut data_rng);
        let mut noise_rng = rng::derive_stream(args.seed, "simulate-noise", trial);
        let run = dp_quantile_traced(&values, args.k, args.epsilon, &mut noise_rng);
        values.sort_by(f64::total_cmp);
        let (lo, hi) = percentile_window(&values, args.k, 5)?
            .values(&values)
            .context("window ranks out of range")?;
        let (lo, hi) = widen(lo, hi);
        let hit = (lo..=hi).contains(&run.value);
        hits += u64::from(hit);
        println!("{trial},{},{lo},{hi},{}", run.value, u8::from(hit));
    }
    println!("# success_rate {}", hits as f64 / args.trials as f64);
    Ok(())
}

/// Single-group plan whose only missing bound is the magnitude cap, so the
/// tuned value is the DP percentile of the per-unit values.
fn magnitude_plan(epsilon: f64) -> QueryPlan {
    QueryPlan {
        epsilon,
        delta: 1e-6,
        max_groups_contributed: Some(1),
        group_keys: vec!["k".into()],
        aggregations: vec![AggregationSpec {
            input_column: "v".into(),
            alias: "total".into(),
            l_inf: None,
            l_1: None,
            l_2: None,
        }],
        source_table: "sim".into(),
        domain_mode: DomainMode::OpenSet,
    }
}

fn representativeness(args: &SimulateArgs) -> Result<()> {
    let mut population_rng = rng::derive_stream(args.seed, "simulate-population", 0);
    let population = sample_values(args.distribution, args.n as usize, &mut population_rng);
    let rows = population.iter().enumerate().map(|(i, v)| UploadRow {
        unit_id: format!("u{i:08}"),
        keys: [("k".to_string(), "all".to_string())].into(),
        values: [("v".to_string(), *v)].into(),
    });
    let ds = Dataset::from_rows(rows).context("building population")?;
    let plan = magnitude_plan(args.epsilon);
    let config = AutotuneConfig { k: args.k, beta: args.beta, g: 1 };

    let mut sorted = population.clone();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = percentile_window(&sorted, args.k, 10)?
        .values(&sorted)
        .context("window ranks out of range")?;

    println!("trial,tuned,window_low,window_high,hit");
    let mut hits = 0u64;
    for trial in 0..args.trials {
        let master_seed = args.seed.wrapping_add(trial);
        let (report, _) = run_autotune(&ds, &plan, &config, master_seed, QuantileMode::Dp)?;
        let TunedValue::Magnitude(tuned) = report.tuned[0].value else {
            anyhow::bail!("magnitude parameter expected");
        };
        let hit = (lo..=hi).contains(&tuned);
        hits += u64::from(hit);
        println!("{trial},{tuned},{lo},{hi},{}", u8::from(hit));
    }
    println!("# success_rate {}", hits as f64 / args.trials as f64);
    Ok(())
}

fn noise_bound(args: &SimulateArgs) -> Result<()> {
    let m = m_star(args.epsilon, args.beta) as usize;
    let bound = (4.0 / args.epsilon) * (4470.0 / args.beta).ln();
    println!("trial,max_noise,bound,exceeded");
    let mut exceeded = 0u64;
    for trial in 0..args.trials {
        let mut data_rng = rng::derive_stream(args.seed, "simulate-data", trial);
        let values = sample_values(args.distribution, m, &mut data_rng);
        let mut noise_rng = rng::derive_stream(args.seed, "simulate-noise", trial);
        let run = dp_quantile_traced(&values, args.k, args.epsilon, &mut noise_rng);
        let over = run.max_noise_magnitude >= bound;
        exceeded += u64::from(over);
        println!("{trial},{},{bound},{}", run.max_noise_magnitude, u8::from(over));
    }
    println!("# exceed_rate {}", exceeded as f64 / args.trials as f64);
    Ok(())
}

fn k_sweep(args: &SimulateArgs) -> Result<()> {
    println!("k,q,n_q");
    for k in 6..=94u32 {
        let config = AutotuneConfig { k, beta: args.beta, g: 1 };
        let q = match required_q(args.n, args.epsilon, &config) {
            Ok(plan) => plan.q,
            // Rates above 1 are still informative in a sweep.
            Err(AutotuneError::InsufficientData { required, .. }) => required,
            Err(e) => return Err(e.into()),
        };
        println!("{k},{q},{}", q * args.n as f64);
    }
    Ok(())
}

pub fn cmd_attack_demo(args: &AttackDemoArgs) -> Result<()> {
    let mode = match args.mode {
        AttackModeArg::Deterministic => AttackMode::Deterministic,
        AttackModeArg::Dp => AttackMode::Dp,
    };
    let accuracy = sybil_attack_demo(mode, args.epsilon, args.trials, args.seed);
    let bound = args.epsilon.exp() / (1.0 + args.epsilon.exp());
    println!("mode {}", match mode {
        AttackMode::Deterministic => "deterministic",
        AttackMode::Dp => "dp",
    });
    println!("trials {}", args.trials);
    println!("accuracy {accuracy}");
    println!("dp_distinguishing_bound {bound}");
    Ok(())
}
