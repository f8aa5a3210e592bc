//! Access-policy authorization and per-unit budget tracking.
//!
//! The policy document is a JSON mirror of the deployment-side pipeline
//! policy: logical pipeline names map to variant lists, each variant holds
//! transforms with an application digest and config constraints. The budget
//! ledger records, per upload unit, how often and in which stage it was
//! consumed; committing a release is a ledger mutation, and the CLI refuses
//! to write output without the resulting token.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigConstraints {
    pub epsilon_max: f64,
    pub delta_max: f64,
    pub algorithm_ids: BTreeSet<String>,
    pub max_uses_per_upload: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub src_node_ids: Vec<u32>,
    pub dst_node_ids: Vec<u32>,
    pub application_digest: String,
    pub config_constraints: ConfigConstraints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineVariant {
    pub transforms: Vec<Transform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicalPipeline {
    /// Authorized variants; listing several decouples policy updates from
    /// binary rollouts.
    pub instances: Vec<PipelineVariant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub pipelines: BTreeMap<String, LogicalPipeline>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("policy JSON: {0}")]
    Json(String),
    #[error("policy declares no pipelines")]
    EmptyPipelines,
    #[error("pipeline {pipeline:?} has no variants")]
    NoVariants { pipeline: String },
    #[error("pipeline {pipeline:?} has a variant with no transforms")]
    NoTransforms { pipeline: String },
    #[error("pipeline {pipeline:?} has a transform with an empty node id list")]
    EmptyNodeList { pipeline: String },
    #[error("pipeline {pipeline:?} sets max_uses_per_upload below 1")]
    MaxUsesZero { pipeline: String },
}

/// Parses and validates a policy document.
pub fn load_policy(source: &str) -> Result<PolicyDocument, PolicyError> {
    let doc: PolicyDocument =
        serde_json::from_str(source).map_err(|e| PolicyError::Json(e.to_string()))?;
    doc.validate()?;
    Ok(doc)
}

impl PolicyDocument {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.pipelines.is_empty() {
            return Err(PolicyError::EmptyPipelines);
        }
        for (name, pipeline) in &self.pipelines {
            let pipeline_err = |f: fn(String) -> PolicyError| f(name.clone());
            if pipeline.instances.is_empty() {
                return Err(pipeline_err(|pipeline| PolicyError::NoVariants { pipeline }));
            }
            for variant in &pipeline.instances {
                if variant.transforms.is_empty() {
                    return Err(pipeline_err(|pipeline| PolicyError::NoTransforms { pipeline }));
                }
                for t in &variant.transforms {
                    if t.src_node_ids.is_empty() || t.dst_node_ids.is_empty() {
                        return Err(pipeline_err(|pipeline| PolicyError::EmptyNodeList {
                            pipeline,
                        }));
                    }
                    if t.config_constraints.max_uses_per_upload < 1 {
                        return Err(pipeline_err(|pipeline| PolicyError::MaxUsesZero { pipeline }));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccessRequest {
    pub epsilon: f64,
    pub delta: f64,
    pub algorithm_id: String,
    pub application_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Decision {
    Grant { pipeline: String, max_uses_per_upload: u32 },
    Deny { reason: String },
}

impl Decision {
    pub fn is_grant(&self) -> bool {
        matches!(self, Decision::Grant { .. })
    }
}

/// Pure policy check: grants when some variant transform matches the
/// request's digest, lists its algorithm, and admits its (epsilon, delta)
/// inclusively. Deny reasons report the first gate every candidate failed,
/// in the order digest, algorithm, epsilon, delta.
pub fn authorize(policy: &PolicyDocument, request: &AccessRequest) -> Decision {
    let mut digest_matched = false;
    let mut algorithm_matched = false;
    let mut epsilon_matched = false;
    for (name, pipeline) in &policy.pipelines {
        for variant in &pipeline.instances {
            for t in &variant.transforms {
                if t.application_digest != request.application_digest {
                    continue;
                }
                digest_matched = true;
                if !t.config_constraints.algorithm_ids.contains(&request.algorithm_id) {
                    continue;
                }
                algorithm_matched = true;
                if request.epsilon > t.config_constraints.epsilon_max {
                    continue;
                }
                epsilon_matched = true;
                if request.delta > t.config_constraints.delta_max {
                    continue;
                }
                return Decision::Grant {
                    pipeline: name.clone(),
                    max_uses_per_upload: t.config_constraints.max_uses_per_upload,
                };
            }
        }
    }
    let reason = if !digest_matched {
        "application digest not authorized"
    } else if !algorithm_matched {
        "algorithm not permitted"
    } else if !epsilon_matched {
        "epsilon exceeds policy"
    } else {
        "delta exceeds policy"
    };
    Decision::Deny { reason: reason.to_string() }
}

/// Pipeline stage that consumed a unit. A unit absent from the ledger is
/// unused; the single tag per unit makes cross-stage reuse unrepresentable
/// once charge() has rejected it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Quantile,
    Aggregation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Quantile => write!(f, "quantile"),
            Stage::Aggregation => write!(f, "aggregation"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitUsage {
    pub uses: u32,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseRecord {
    pub digest: String,
    pub version: u64,
}

/// Proof that the budget mutation for a run was committed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReleaseToken {
    pub digest: String,
    pub version: u64,
}

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unit {unit_id:?} already consumed by the {charged} stage, cannot charge for {requested}")]
    CrossStageUse { unit_id: String, charged: Stage, requested: Stage },
    #[error("unit {unit_id:?} exhausted its budget of {max_uses} use(s)")]
    MaxUsesExceeded { unit_id: String, max_uses: u32 },
    #[error("no charges pending; commit requires the run's charges first")]
    NoChargesPending,
    #[error("ledger changed on disk: snapshot version {expected}, found {found}")]
    ConcurrentModification { expected: u64, found: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub version: u64,
    pub units: BTreeMap<String, UnitUsage>,
    pub releases: Vec<ReleaseRecord>,
    /// Version seen at load time, for the save-time compare-and-swap.
    #[serde(skip)]
    snapshot_version: u64,
    /// True between a successful charge and the commit that releases it.
    #[serde(skip)]
    pending_charges: bool,
}

impl BudgetLedger {
    /// Reads the ledger at `path`, or starts a fresh one if no file exists.
    pub fn load_or_create(path: &Path) -> Result<Self, LedgerError> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Ok(BudgetLedger::default())
            }
            Err(e) => return Err(e.into()),
        };
        let mut ledger: BudgetLedger = serde_json::from_str(&text)?;
        ledger.snapshot_version = ledger.version;
        ledger.pending_charges = false;
        Ok(ledger)
    }

    /// Persists atomically (temp file + rename), refusing to clobber a file
    /// whose version moved since this ledger was loaded.
    pub fn save(&mut self, path: &Path) -> Result<(), LedgerError> {
        match std::fs::read_to_string(path) {
            Ok(text) => {
                let on_disk: BudgetLedger = serde_json::from_str(&text)?;
                if on_disk.version != self.snapshot_version {
                    return Err(LedgerError::ConcurrentModification {
                        expected: self.snapshot_version,
                        found: on_disk.version,
                    });
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer_pretty(&tmp, self)?;
        tmp.persist(path).map_err(|e| LedgerError::Io(e.error))?;
        self.snapshot_version = self.version;
        Ok(())
    }

    /// Charges every unit one use in `stage`, or nothing at all: the whole
    /// batch is validated against cross-stage reuse and the use cap before
    /// any entry is written.
    pub fn charge(
        &mut self,
        unit_ids: &BTreeSet<String>,
        stage: Stage,
        max_uses_per_upload: u32,
    ) -> Result<(), LedgerError> {
        for id in unit_ids {
            if let Some(usage) = self.units.get(id) {
                if usage.stage != stage {
                    return Err(LedgerError::CrossStageUse {
                        unit_id: id.clone(),
                        charged: usage.stage,
                        requested: stage,
                    });
                }
                if usage.uses >= max_uses_per_upload {
                    return Err(LedgerError::MaxUsesExceeded {
                        unit_id: id.clone(),
                        max_uses: max_uses_per_upload,
                    });
                }
            }
        }
        for id in unit_ids {
            self.units
                .entry(id.clone())
                .and_modify(|u| u.uses += 1)
                .or_insert(UnitUsage { uses: 1, stage });
        }
        if !unit_ids.is_empty() {
            self.pending_charges = true;
        }
        Ok(())
    }

    /// Records the result digest and bumps the version. The returned token
    /// is the precondition for writing any output.
    pub fn commit_release(&mut self, digest: &str) -> Result<ReleaseToken, LedgerError> {
        if !self.pending_charges {
            return Err(LedgerError::NoChargesPending);
        }
        self.version += 1;
        self.releases.push(ReleaseRecord { digest: digest.to_string(), version: self.version });
        self.pending_charges = false;
        Ok(ReleaseToken { digest: digest.to_string(), version: self.version })
    }

    /// Unit ids currently tagged with `stage`.
    pub fn units_in_stage(&self, stage: Stage) -> BTreeSet<&str> {
        self.units
            .iter()
            .filter(|(_, u)| u.stage == stage)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SINGLE_VARIANT_POLICY: &str = r#"{
      "pipelines": {
        "dp_group_by_with_autotune": {
          "instances": [
            {
              "transforms": [
                {
                  "src_node_ids": [0, 1],
                  "dst_node_ids": [1, 2],
                  "application_digest": "sha256:aggregator-v1",
                  "config_constraints": {
                    "epsilon_max": 1.0,
                    "delta_max": 1e-6,
                    "algorithm_ids": ["dp_quantile", "dp_group_by"],
                    "max_uses_per_upload": 1
                  }
                }
              ]
            }
          ]
        }
      }
    }"#;

    fn policy() -> PolicyDocument {
        load_policy(SINGLE_VARIANT_POLICY).unwrap()
    }

    fn request(epsilon: f64, delta: f64) -> AccessRequest {
        AccessRequest {
            epsilon,
            delta,
            algorithm_id: "dp_group_by".into(),
            application_digest: "sha256:aggregator-v1".into(),
        }
    }

    fn ids(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_variant_policy_loads() {
        let doc = policy();
        assert_eq!(doc.pipelines.len(), 1);
        let variant = &doc.pipelines["dp_group_by_with_autotune"].instances[0];
        assert_eq!(variant.transforms[0].src_node_ids, vec![0, 1]);
        assert_eq!(variant.transforms[0].config_constraints.max_uses_per_upload, 1);
    }

    #[test]
    fn multiple_variants_are_admissible() {
        let mut doc = policy();
        let pipeline = doc.pipelines.get_mut("dp_group_by_with_autotune").unwrap();
        let mut v2 = pipeline.instances[0].clone();
        v2.transforms[0].application_digest = "sha256:aggregator-v2".into();
        pipeline.instances.push(v2);
        doc.validate().unwrap();
        let mut req = request(1.0, 1e-6);
        req.application_digest = "sha256:aggregator-v2".into();
        assert!(authorize(&doc, &req).is_grant());
        req.application_digest = "sha256:aggregator-v1".into();
        assert!(authorize(&doc, &req).is_grant());
    }

    #[test]
    fn malformed_policies_are_rejected() {
        assert_eq!(load_policy(r#"{"pipelines": {}}"#).unwrap_err(), PolicyError::EmptyPipelines);
        let no_variants = r#"{"pipelines": {"p": {"instances": []}}}"#;
        assert_eq!(
            load_policy(no_variants).unwrap_err(),
            PolicyError::NoVariants { pipeline: "p".into() }
        );
        let zero_uses = SINGLE_VARIANT_POLICY.replace("\"max_uses_per_upload\": 1", "\"max_uses_per_upload\": 0");
        assert_eq!(
            load_policy(&zero_uses).unwrap_err(),
            PolicyError::MaxUsesZero { pipeline: "dp_group_by_with_autotune".into() }
        );
        let empty_nodes = SINGLE_VARIANT_POLICY.replace("\"src_node_ids\": [0, 1]", "\"src_node_ids\": []");
        assert_eq!(
            load_policy(&empty_nodes).unwrap_err(),
            PolicyError::EmptyNodeList { pipeline: "dp_group_by_with_autotune".into() }
        );
        assert!(matches!(load_policy("not json"), Err(PolicyError::Json(_))));
    }

    #[test]
    fn authorize_grants_at_the_boundary() {
        let doc = policy();
        match authorize(&doc, &request(1.0, 1e-6)) {
            Decision::Grant { pipeline, max_uses_per_upload } => {
                assert_eq!(pipeline, "dp_group_by_with_autotune");
                assert_eq!(max_uses_per_upload, 1);
            }
            d => panic!("expected grant, got {d:?}"),
        }
    }

    #[test]
    fn authorize_denies_with_ordered_reasons() {
        let doc = policy();
        assert_eq!(
            authorize(&doc, &request(2.0, 1e-6)),
            Decision::Deny { reason: "epsilon exceeds policy".into() }
        );
        assert_eq!(
            authorize(&doc, &request(1.0, 1e-3)),
            Decision::Deny { reason: "delta exceeds policy".into() }
        );
        let mut req = request(2.0, 1.0);
        req.application_digest = "sha256:unknown".into();
        assert_eq!(
            authorize(&doc, &req),
            Decision::Deny { reason: "application digest not authorized".into() }
        );
        let mut req = request(2.0, 1.0);
        req.algorithm_id = "dp_median".into();
        assert_eq!(
            authorize(&doc, &req),
            Decision::Deny { reason: "algorithm not permitted".into() }
        );
    }

    #[test]
    fn quantile_bundle_is_permitted() {
        let doc = policy();
        let mut req = request(0.5, 1e-7);
        req.algorithm_id = "dp_quantile".into();
        assert!(authorize(&doc, &req).is_grant());
    }

    #[test]
    fn authorize_is_pure() {
        let doc = policy();
        let req = request(1.0, 1e-6);
        assert_eq!(authorize(&doc, &req), authorize(&doc, &req));
    }

    #[test]
    fn disjoint_stage_charges_succeed() {
        let mut ledger = BudgetLedger::default();
        ledger.charge(&ids(&["a", "b"]), Stage::Quantile, 1).unwrap();
        ledger.charge(&ids(&["c", "d"]), Stage::Aggregation, 1).unwrap();
        assert_eq!(ledger.units_in_stage(Stage::Quantile), ["a", "b"].into());
        assert_eq!(ledger.units_in_stage(Stage::Aggregation), ["c", "d"].into());
        assert!(ledger
            .units_in_stage(Stage::Quantile)
            .is_disjoint(&ledger.units_in_stage(Stage::Aggregation)));
    }

    #[test]
    fn cross_stage_reuse_is_rejected() {
        let mut ledger = BudgetLedger::default();
        ledger.charge(&ids(&["a"]), Stage::Quantile, 2).unwrap();
        let err = ledger.charge(&ids(&["a"]), Stage::Aggregation, 2).unwrap_err();
        assert!(matches!(
            err,
            LedgerError::CrossStageUse { ref unit_id, charged: Stage::Quantile, requested: Stage::Aggregation }
                if unit_id == "a"
        ));
    }

    #[test]
    fn max_uses_is_enforced() {
        let mut ledger = BudgetLedger::default();
        ledger.charge(&ids(&["a"]), Stage::Aggregation, 1).unwrap();
        let err = ledger.charge(&ids(&["a"]), Stage::Aggregation, 1).unwrap_err();
        assert!(matches!(err, LedgerError::MaxUsesExceeded { ref unit_id, max_uses: 1 } if unit_id == "a"));
        // A cap of 2 admits a second use in the same stage.
        let mut ledger = BudgetLedger::default();
        ledger.charge(&ids(&["a"]), Stage::Aggregation, 2).unwrap();
        ledger.charge(&ids(&["a"]), Stage::Aggregation, 2).unwrap();
        assert_eq!(ledger.units["a"].uses, 2);
    }

    #[test]
    fn failed_batches_charge_nothing() {
        let mut ledger = BudgetLedger::default();
        ledger.charge(&ids(&["c"]), Stage::Quantile, 1).unwrap();
        let before = ledger.clone();
        let err = ledger.charge(&ids(&["a", "b", "c"]), Stage::Aggregation, 1).unwrap_err();
        assert!(matches!(err, LedgerError::CrossStageUse { .. }));
        assert_eq!(ledger, before, "partial charges must not persist");
    }

    #[test]
    fn commit_requires_charges_and_bumps_version() {
        let mut ledger = BudgetLedger::default();
        assert!(matches!(ledger.commit_release("d0"), Err(LedgerError::NoChargesPending)));
        ledger.charge(&ids(&["a"]), Stage::Aggregation, 1).unwrap();
        let t1 = ledger.commit_release("d1").unwrap();
        assert_eq!((t1.digest.as_str(), t1.version), ("d1", 1));
        assert!(matches!(ledger.commit_release("d2"), Err(LedgerError::NoChargesPending)));
        ledger.charge(&ids(&["b"]), Stage::Aggregation, 1).unwrap();
        let t2 = ledger.commit_release("d2").unwrap();
        assert_eq!(t2.version, 2);
        assert_eq!(ledger.releases.len(), 2);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.json");
        let mut ledger = BudgetLedger::load_or_create(&path).unwrap();
        ledger.charge(&ids(&["a", "b"]), Stage::Aggregation, 1).unwrap();
        ledger.commit_release("digest-1").unwrap();
        ledger.save(&path).unwrap();

        let reloaded = BudgetLedger::load_or_create(&path).unwrap();
        assert_eq!(reloaded.version, 1);
        assert_eq!(reloaded.units, ledger.units);
        assert_eq!(reloaded.releases, ledger.releases);
    }

    #[test]
    fn concurrent_writers_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.json");
        let mut first = BudgetLedger::load_or_create(&path).unwrap();
        let mut second = BudgetLedger::load_or_create(&path).unwrap();

        first.charge(&ids(&["a"]), Stage::Aggregation, 1).unwrap();
        first.commit_release("d1").unwrap();
        first.save(&path).unwrap();

        second.charge(&ids(&["b"]), Stage::Aggregation, 1).unwrap();
        second.commit_release("d2").unwrap();
        let err = second.save(&path).unwrap_err();
        assert!(matches!(err, LedgerError::ConcurrentModification { expected: 0, found: 1 }));

        // Reloading picks up the winner's state and the retry succeeds.
        let mut retried = BudgetLedger::load_or_create(&path).unwrap();
        retried.charge(&ids(&["b"]), Stage::Aggregation, 1).unwrap();
        retried.commit_release("d2").unwrap();
        retried.save(&path).unwrap();
        assert_eq!(BudgetLedger::load_or_create(&path).unwrap().version, 2);
    }

    #[test]
    fn replaying_a_run_fails_at_charge() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.json");
        let run = |path: &Path| -> Result<(), LedgerError> {
            let mut ledger = BudgetLedger::load_or_create(path)?;
            ledger.charge(&ids(&["u1", "u2"]), Stage::Aggregation, 1)?;
            ledger.commit_release("digest")?;
            ledger.save(path)
        };
        run(&path).unwrap();
        let err = run(&path).unwrap_err();
        assert!(matches!(err, LedgerError::MaxUsesExceeded { .. }));
    }
}
