//! Upload ingestion, per-unit scalar derivation, and Bernoulli partitioning.
//!
//! One upload row belongs to exactly one DP unit (identified by an opaque
//! string). A [`Dataset`] stores each unit's rows in a canonical order, so
//! two ingests of the same multiset of rows compare equal no matter how the
//! input was shuffled or sharded, and every downstream float accumulation
//! visits values in a fixed order.

use crate::query::{QueryPlan, TunableParameter};
use crate::rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Read};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadRow {
    pub unit_id: String,
    #[serde(default)]
    pub keys: BTreeMap<String, String>,
    #[serde(default)]
    pub values: BTreeMap<String, f64>,
}

/// Rows grouped by DP unit. Within a unit, rows are kept sorted by a total
/// order on their content (keys, then values by bit pattern).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    units: BTreeMap<String, Vec<UploadRow>>,
}

/// Per-unit scalar series feeding the quantile stage, one value per unit in
/// unit-id order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarSeries {
    pub parameter: TunableParameter,
    pub values: Vec<f64>,
}

/// Disjoint split of units into the tuning sample S and the remainder S̄.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Partition {
    pub sample_units: BTreeSet<String>,
    pub remainder_units: BTreeSet<String>,
    pub q: f64,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {source}")]
    Io { line: usize, source: std::io::Error },
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("column mapping lacks an entry for `{column}`")]
    MappingMissing { column: String },
    #[error("csv header has no column `{column}`")]
    HeaderMissing { column: String },
    #[error("line {line}: missing {kind} column `{column}`")]
    MissingColumn { line: usize, kind: &'static str, column: String },
    #[error("line {line}: column `{column}` is not a finite number")]
    NonNumeric { line: usize, column: String },
    #[error("no units in input")]
    NoUnits,
}

#[derive(Debug, Error, PartialEq)]
pub enum ScalarError {
    #[error("parameter {0} does not apply to this plan")]
    Inapplicable(TunableParameter),
    #[error("unit `{unit}` lacks {kind} column `{column}`")]
    MissingColumn { unit: String, kind: &'static str, column: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("sampling bias must lie in (0, 1], got {0}")]
    BiasOutOfRange(f64),
}

fn cmp_f64_maps(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Ordering {
    let mut ai = a.iter();
    let mut bi = b.iter();
    loop {
        match (ai.next(), bi.next()) {
            (None, None) => return Ordering::Equal,
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some((ka, va)), Some((kb, vb))) => {
                let ord = ka.cmp(kb).then(va.total_cmp(vb));
                if ord != Ordering::Equal {
                    return ord;
                }
            }
        }
    }
}

fn row_order(a: &UploadRow, b: &UploadRow) -> Ordering {
    a.keys.cmp(&b.keys).then_with(|| cmp_f64_maps(&a.values, &b.values))
}

impl Dataset {
    /// Number of DP units.
    pub fn n(&self) -> u64 {
        self.units.len() as u64
    }

    pub fn unit_ids(&self) -> impl Iterator<Item = &str> {
        self.units.keys().map(String::as_str)
    }

    pub fn units(&self) -> impl Iterator<Item = (&str, &[UploadRow])> {
        self.units.iter().map(|(id, rows)| (id.as_str(), rows.as_slice()))
    }

    pub fn rows(&self, unit_id: &str) -> Option<&[UploadRow]> {
        self.units.get(unit_id).map(Vec::as_slice)
    }

    /// Builds a dataset from in-memory rows, skipping schema checks.
    pub fn from_rows(rows: impl IntoIterator<Item = UploadRow>) -> Result<Self, IngestError> {
        let mut ds = Dataset::default();
        for row in rows {
            ds.units.entry(row.unit_id.clone()).or_default().push(row);
        }
        ds.canonicalize();
        if ds.units.is_empty() {
            return Err(IngestError::NoUnits);
        }
        Ok(ds)
    }

    /// The sub-dataset restricted to the given unit ids.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Dataset {
        Dataset {
            units: self
                .units
                .iter()
                .filter(|(id, _)| ids.contains(*id))
                .map(|(id, rows)| (id.clone(), rows.clone()))
                .collect(),
        }
    }

    fn canonicalize(&mut self) {
        for rows in self.units.values_mut() {
            rows.sort_by(row_order);
        }
    }
}

fn check_row(row: &UploadRow, plan: &QueryPlan, line: usize) -> Result<(), IngestError> {
    for key in &plan.group_keys {
        if !row.keys.contains_key(key) {
            return Err(IngestError::MissingColumn { line, kind: "key", column: key.clone() });
        }
    }
    for agg in &plan.aggregations {
        match row.values.get(&agg.input_column) {
            None => {
                return Err(IngestError::MissingColumn {
                    line,
                    kind: "value",
                    column: agg.input_column.clone(),
                })
            }
            Some(v) if !v.is_finite() => {
                return Err(IngestError::NonNumeric { line, column: agg.input_column.clone() })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Reads JSON-lines uploads: one object per line,
/// `{"unit_id": string, "keys": {col: string}, "values": {col: number}}`.
/// Blank lines are ignored. The result is independent of input order.
pub fn ingest_jsonl<R: BufRead>(reader: R, plan: &QueryPlan) -> Result<Dataset, IngestError> {
    let mut ds = Dataset::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| IngestError::Io { line: line_no, source })?;
        if line.trim().is_empty() {
            continue;
        }
        let row: UploadRow = serde_json::from_str(&line)
            .map_err(|source| IngestError::Json { line: line_no, source })?;
        check_row(&row, plan, line_no)?;
        ds.units.entry(row.unit_id.clone()).or_default().push(row);
    }
    ds.canonicalize();
    if ds.units.is_empty() {
        return Err(IngestError::NoUnits);
    }
    Ok(ds)
}

/// Maps the plan's logical columns onto CSV headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvMapping {
    pub unit_id: String,
    #[serde(default)]
    pub keys: BTreeMap<String, String>,
    #[serde(default)]
    pub values: BTreeMap<String, String>,
}

/// Reads uploads from CSV with a header row, using `mapping` to locate the
/// unit id, key, and value columns.
pub fn ingest_csv<R: Read>(
    reader: R,
    mapping: &CsvMapping,
    plan: &QueryPlan,
) -> Result<Dataset, IngestError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col_index = |name: &str| -> Result<usize, IngestError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::HeaderMissing { column: name.to_owned() })
    };
    let unit_idx = col_index(&mapping.unit_id)?;
    let mut key_idx = Vec::new();
    for key in &plan.group_keys {
        let header = mapping
            .keys
            .get(key)
            .ok_or_else(|| IngestError::MappingMissing { column: key.clone() })?;
        key_idx.push((key.clone(), col_index(header)?));
    }
    let mut value_idx = Vec::new();
    let mut seen = BTreeSet::new();
    for agg in &plan.aggregations {
        if !seen.insert(agg.input_column.clone()) {
            continue;
        }
        let header = mapping
            .values
            .get(&agg.input_column)
            .ok_or_else(|| IngestError::MappingMissing { column: agg.input_column.clone() })?;
        value_idx.push((agg.input_column.clone(), col_index(header)?));
    }

    let mut ds = Dataset::default();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut row = UploadRow {
            unit_id: record.get(unit_idx).unwrap_or("").to_owned(),
            keys: BTreeMap::new(),
            values: BTreeMap::new(),
        };
        for (key, idx) in &key_idx {
            let field = record.get(*idx).ok_or_else(|| IngestError::MissingColumn {
                line,
                kind: "key",
                column: key.clone(),
            })?;
            row.keys.insert(key.clone(), field.to_owned());
        }
        for (column, idx) in &value_idx {
            let field = record.get(*idx).ok_or_else(|| IngestError::MissingColumn {
                line,
                kind: "value",
                column: column.clone(),
            })?;
            let value: f64 = field
                .trim()
                .parse()
                .map_err(|_| IngestError::NonNumeric { line, column: column.clone() })?;
            if !value.is_finite() {
                return Err(IngestError::NonNumeric { line, column: column.clone() });
            }
            row.values.insert(column.clone(), value);
        }
        ds.units.entry(row.unit_id.clone()).or_default().push(row);
    }
    ds.canonicalize();
    if ds.units.is_empty() {
        return Err(IngestError::NoUnits);
    }
    Ok(ds)
}

/// Sums one unit's values within each group, for all aggregations at once.
/// Returns group key tuple → per-aggregation subtotal vector.
pub fn group_subtotals(
    unit_id: &str,
    rows: &[UploadRow],
    plan: &QueryPlan,
) -> Result<BTreeMap<Vec<String>, Vec<f64>>, ScalarError> {
    let mut groups: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
    for row in rows {
        let mut key = Vec::with_capacity(plan.group_keys.len());
        for col in &plan.group_keys {
            let part = row.keys.get(col).ok_or_else(|| ScalarError::MissingColumn {
                unit: unit_id.to_owned(),
                kind: "key",
                column: col.clone(),
            })?;
            key.push(part.clone());
        }
        let slots = groups.entry(key).or_insert_with(|| vec![0.0; plan.aggregations.len()]);
        for (i, agg) in plan.aggregations.iter().enumerate() {
            let v = row.values.get(&agg.input_column).ok_or_else(|| ScalarError::MissingColumn {
                unit: unit_id.to_owned(),
                kind: "value",
                column: agg.input_column.clone(),
            })?;
            slots[i] += v;
        }
    }
    Ok(groups)
}

/// Derives the per-unit scalar series for one tunable parameter. Each unit's
/// values are first summed within groups; the scalar is then the group count
/// (MaxGroupsContributed), the largest absolute subtotal (LInf), or the L1/L2
/// norm of the subtotal vector.
pub fn derive_scalars(
    ds: &Dataset,
    plan: &QueryPlan,
    param: TunableParameter,
) -> Result<ScalarSeries, ScalarError> {
    let agg_index = match param {
        TunableParameter::MaxGroupsContributed => None,
        TunableParameter::LInf { aggregation }
        | TunableParameter::L1 { aggregation }
        | TunableParameter::L2 { aggregation } => {
            if aggregation >= plan.aggregations.len() {
                return Err(ScalarError::Inapplicable(param));
            }
            Some(aggregation)
        }
    };
    let mut values = Vec::with_capacity(ds.units.len());
    for (unit_id, rows) in ds.units() {
        let groups = group_subtotals(unit_id, rows, plan)?;
        let scalar = match (param, agg_index) {
            (TunableParameter::MaxGroupsContributed, _) => groups.len() as f64,
            (TunableParameter::LInf { .. }, Some(i)) => {
                groups.values().map(|v| v[i].abs()).fold(0.0, f64::max)
            }
            (TunableParameter::L1 { .. }, Some(i)) => groups.values().map(|v| v[i].abs()).sum(),
            (TunableParameter::L2 { .. }, Some(i)) => {
                groups.values().map(|v| v[i] * v[i]).sum::<f64>().sqrt()
            }
            _ => unreachable!("agg_index resolved above"),
        };
        values.push(scalar);
    }
    Ok(ScalarSeries { parameter: param, values })
}

/// Splits units into sample and remainder with independent per-unit draws
/// keyed by `(master_seed, unit_id)`, so the outcome is order-independent.
pub fn bernoulli_partition(
    ds: &Dataset,
    q: f64,
    master_seed: u64,
) -> Result<Partition, PartitionError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(PartitionError::BiasOutOfRange(q));
    }
    // q == 1 maps to 2^64, above every draw, so all units land in the sample.
    let threshold = (q * 2f64.powi(64)) as u128;
    let mut sample_units = BTreeSet::new();
    let mut remainder_units = BTreeSet::new();
    for id in ds.unit_ids() {
        let draw = rng::unit_draw(master_seed, rng::DOMAIN_PARTITION, id) as u128;
        if draw < threshold {
            sample_units.insert(id.to_owned());
        } else {
            remainder_units.insert(id.to_owned());
        }
    }
    Ok(Partition { sample_units, remainder_units, q })
}
