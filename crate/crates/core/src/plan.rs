//! Partition planning: pick the model variant and split point that minimize
//! end-to-end latency, subject to an accuracy floor.
//!
//! The latency model is built entirely from *server-side* layer timings
//! (`f`, the cumulative per-layer curve) plus two system constants:
//!
//! * the device runs layers `1..=p` a factor `gamma` slower than the server:
//!   `t_device = gamma * f(L_p)`;
//! * the link moves the boundary payload at `rate` bytes/second:
//!   `t_link = bytes / rate`;
//! * the server finishes the rest: `t_server = T - f(L_p)`.
//!
//! A partition point `p` is the number of layers computed on the device:
//! `p = 0` ships the raw input (pure edge), `p = M` runs everything on the
//! device and ships only the small result message. For `p < M` the result
//! message also travels back over the same link, so both directions are
//! charged; the reported uplink bytes stay distinct so the `p = 0` / `p = M`
//! payloads remain the raw-input and result-message sizes exactly.
//!
//! The search scans every candidate model at every partition its policy and
//! family restriction allow, keeps the strict-accuracy-feasible ones, and
//! returns the latency argmin (ties: smaller `p`, then earlier catalog
//! ordinal). No feasible candidate yields `Ok(None)` — a planner answer, not
//! an error.

use rayon::prelude::*;
use std::collections::BTreeMap;

use crate::catalog::{Catalog, Lineage};
use crate::error::{Error, Result};
use crate::profile::ModelProfile;

/// Device latency for the first `p` layers (server prefix seconds scaled by
/// the device slowdown factor).
pub fn device_latency(gamma: f64, server_prefix_seconds: f64) -> f64 {
    gamma * server_prefix_seconds
}

/// Link latency for `bytes` at `rate` bytes per second.
pub fn transmission_latency(bytes: u64, rate_bytes_per_second: f64) -> f64 {
    bytes as f64 / rate_bytes_per_second
}

/// Server latency for the suffix after `p` layers.
pub fn server_latency(total_seconds: f64, server_prefix_seconds: f64) -> f64 {
    total_seconds - server_prefix_seconds
}

/// Accuracy requirement, either absolute or relative to the baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AccuracyFloor {
    Absolute(f64),
    /// Percentage points below the unpruned baseline (4.0 = four points).
    DropPoints(f64),
}

impl AccuracyFloor {
    pub fn resolve(&self, baseline_accuracy: f64) -> f64 {
        match *self {
            AccuracyFloor::Absolute(a) => a,
            AccuracyFloor::DropPoints(d) => baseline_accuracy - d / 100.0,
        }
    }
}

/// Which partition points are eligible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidatePolicy {
    /// Every internal layer boundary (`1..=M-1`).
    AllLayers,
    /// Only boundaries right after a pooling layer — where data is smallest.
    PoolingOnly,
    /// All internal boundaries plus the pure-edge (`0`) and pure-device
    /// (`M`) endpoints.
    EndpointsIncluded,
}

impl CandidatePolicy {
    /// Eligible partition points for a model of `layer_count` layers with
    /// the given per-layer pooling flags.
    pub fn partitions(&self, layer_count: usize, is_pool: &[bool]) -> Vec<usize> {
        match self {
            CandidatePolicy::AllLayers => (1..layer_count).collect(),
            CandidatePolicy::PoolingOnly => (1..=layer_count)
                .filter(|&p| is_pool[p - 1])
                .collect(),
            CandidatePolicy::EndpointsIncluded => (0..=layer_count).collect(),
        }
    }
}

/// System constants a plan is computed against.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    /// Device slowdown factor relative to the server.
    pub gamma: f64,
    /// Link rate in bytes per second.
    pub rate_bytes_per_second: f64,
    pub floor: AccuracyFloor,
    pub policy: CandidatePolicy,
    /// Charge codec costs and use encoded feature sizes for the payload.
    pub use_codec: bool,
    /// Size of the final classification message; `None` means
    /// `classes * 4` bytes.
    pub result_message_bytes: Option<u64>,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::invalid(format!(
                "device slowdown factor must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.rate_bytes_per_second.is_finite() && self.rate_bytes_per_second > 0.0) {
            return Err(Error::invalid(format!(
                "link rate must be positive, got {}",
                self.rate_bytes_per_second
            )));
        }
        let floor = match self.floor {
            AccuracyFloor::Absolute(a) => a,
            AccuracyFloor::DropPoints(d) => d,
        };
        if !floor.is_finite() {
            return Err(Error::invalid("accuracy floor must be finite"));
        }
        Ok(())
    }

    pub fn result_bytes(&self, classes: usize) -> u64 {
        self.result_message_bytes.unwrap_or(classes as u64 * 4)
    }
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            gamma: 5.0,
            rate_bytes_per_second: 137_500.0,
            floor: AccuracyFloor::DropPoints(4.0),
            policy: CandidatePolicy::EndpointsIncluded,
            use_codec: false,
            result_message_bytes: None,
        }
    }
}

/// Which partitions a candidate may be planned at (step-2 records are only
/// meaningful at the boundary they were pruned for).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AllowedPartitions {
    All,
    Only(Vec<usize>),
}

impl AllowedPartitions {
    fn contains(&self, p: usize) -> bool {
        match self {
            AllowedPartitions::All => true,
            AllowedPartitions::Only(set) => set.contains(&p),
        }
    }
}

/// A plannable model: metadata plus its profile. Deliberately plain data so
/// planner behavior can be exercised on synthetic catalogs.
#[derive(Clone, Debug)]
pub struct CandidateModel {
    pub id: String,
    /// Catalog insertion order; the final tie-break.
    pub ordinal: usize,
    pub accuracy: f64,
    pub classes: usize,
    /// `is_pool[i]` marks layer `i` as a pooling layer (for the policy).
    pub is_pool: Vec<bool>,
    pub allowed: AllowedPartitions,
    pub profile: ModelProfile,
}

/// The planner's answer: one (model, partition) pair with its predicted
/// latency breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub record_id: String,
    /// Layers computed on the device.
    pub partition: usize,
    pub accuracy: f64,
    pub device_seconds: f64,
    pub transmission_seconds: f64,
    pub server_seconds: f64,
    pub total_seconds: f64,
    /// Device-to-server payload (raw input at `p=0`, features otherwise,
    /// result message at `p=M`).
    pub uplink_bytes: u64,
    /// Result message returned for `p < M`, zero at `p = M`.
    pub downlink_bytes: u64,
    pub used_codec: bool,
}

/// Latency breakdown of one candidate at one partition.
pub fn assemble_plan(cand: &CandidateModel, p: usize, cfg: &SystemConfig) -> Result<PartitionPlan> {
    let m = cand.profile.layer_count();
    if p > m {
        return Err(Error::invalid(format!(
            "partition {p} out of range for {m} layers"
        )));
    }
    let result_bytes = cfg.result_bytes(cand.classes);
    let uplink_bytes = if p == 0 {
        cand.profile.input_bytes
    } else if p == m {
        result_bytes
    } else if cfg.use_codec {
        cand.profile.layers[p - 1].encoded_bytes
    } else {
        cand.profile.layers[p - 1].output_bytes
    };
    let downlink_bytes = if p < m { result_bytes } else { 0 };

    let f_p = cand.profile.cumulative_seconds(p);
    let total = cand.profile.total_seconds();
    let mut device_seconds = device_latency(cfg.gamma, f_p);
    let mut server_seconds = server_latency(total, f_p);
    let codec_active = cfg.use_codec && p > 0 && p < m;
    if codec_active {
        device_seconds += cfg.gamma * cand.profile.layers[p - 1].encode_seconds;
        server_seconds += cand.profile.layers[p - 1].decode_seconds;
    }
    let transmission_seconds =
        transmission_latency(uplink_bytes + downlink_bytes, cfg.rate_bytes_per_second);
    Ok(PartitionPlan {
        record_id: cand.id.clone(),
        partition: p,
        accuracy: cand.accuracy,
        device_seconds,
        transmission_seconds,
        server_seconds,
        total_seconds: device_seconds + transmission_seconds + server_seconds,
        uplink_bytes,
        downlink_bytes,
        used_codec: codec_active,
    })
}

/// Selects the latency-minimal feasible (model, partition) pair.
///
/// Feasible means `accuracy > floor` *strictly*. Ties on total latency go to
/// the smaller partition index, then the smaller catalog ordinal. Returns
/// `Ok(None)` when nothing is feasible.
pub fn select_plan(
    candidates: &[CandidateModel],
    cfg: &SystemConfig,
    baseline_accuracy: f64,
) -> Result<Option<PartitionPlan>> {
    cfg.validate()?;
    let floor = cfg.floor.resolve(baseline_accuracy);
    let mut best: Option<(PartitionPlan, usize)> = None;
    for cand in candidates {
        if !(cand.accuracy > floor) {
            continue;
        }
        for p in cfg.policy.partitions(cand.profile.layer_count(), &cand.is_pool) {
            if !cand.allowed.contains(p) {
                continue;
            }
            let plan = assemble_plan(cand, p, cfg)?;
            let better = match &best {
                None => true,
                Some((b, b_ord)) => {
                    plan.total_seconds < b.total_seconds
                        || (plan.total_seconds == b.total_seconds
                            && (plan.partition, cand.ordinal) < (b.partition, *b_ord))
                }
            };
            if better {
                best = Some((plan, cand.ordinal));
            }
        }
    }
    Ok(best.map(|(plan, _)| plan))
}

/// Builds the candidate list from a pruned catalog and its profiles.
///
/// The original and the *selected* step-1 model are everywhere-candidates;
/// step-2 records are restricted to the boundary after their pruned layer
/// (and the pooling layer immediately following it, where the shrunken
/// channel count still applies). Unselected step-1 snapshots are curve data,
/// not candidates. Below-floor records stay in the list — the plan-time
/// accuracy floor decides feasibility.
pub fn candidates_from_catalog(
    catalog: &Catalog,
    profiles: &BTreeMap<String, ModelProfile>,
) -> Result<Vec<CandidateModel>> {
    let mut out = Vec::new();
    let selected_step1 = catalog.step1_selected();
    for record in catalog.records() {
        let allowed = match record.lineage {
            Lineage::Original => AllowedPartitions::All,
            Lineage::Step1 { .. } => {
                if Some(record.id.as_str()) != selected_step1 {
                    continue;
                }
                AllowedPartitions::All
            }
            Lineage::Step2 { layer, .. } => {
                let model = catalog.model(&record.id).expect("record has a model");
                let mut set = vec![layer + 1];
                if model
                    .spec
                    .layers
                    .get(layer + 1)
                    .is_some_and(|l| l.is_pool())
                {
                    set.push(layer + 2);
                }
                AllowedPartitions::Only(set)
            }
        };
        let profile = profiles.get(&record.id).ok_or_else(|| {
            Error::MissingPrerequisite(format!(
                "no profile for catalog record {:?}; profile the catalog first",
                record.id
            ))
        })?;
        let model = catalog.model(&record.id).expect("record has a model");
        if profile.layer_count() != model.spec.layer_count() {
            return Err(Error::invalid(format!(
                "profile for {:?} has {} layers, model has {}",
                record.id,
                profile.layer_count(),
                model.spec.layer_count()
            )));
        }
        out.push(CandidateModel {
            id: record.id.clone(),
            ordinal: record.ordinal,
            accuracy: record.accuracy,
            classes: model.spec.classes,
            is_pool: model.spec.layers.iter().map(|l| l.is_pool()).collect(),
            allowed,
            profile: profile.clone(),
        });
    }
    Ok(out)
}

/// Plans over a rate x gamma grid (cells independent, computed in parallel,
/// deterministic result).
#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub rates_bytes_per_second: Vec<f64>,
    pub gammas: Vec<f64>,
    /// `plans[i][j]` is the best plan at `(rates[i], gammas[j])`.
    pub plans: Vec<Vec<Option<PartitionPlan>>>,
}

pub fn sweep(
    candidates: &[CandidateModel],
    rates_bytes_per_second: &[f64],
    gammas: &[f64],
    cfg: &SystemConfig,
    baseline_accuracy: f64,
) -> Result<SweepGrid> {
    cfg.validate()?;
    if rates_bytes_per_second.is_empty() || gammas.is_empty() {
        return Err(Error::invalid("sweep needs at least one rate and one gamma"));
    }
    for &r in rates_bytes_per_second {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::invalid(format!("sweep rate must be positive, got {r}")));
        }
    }
    for &g in gammas {
        if !(g.is_finite() && g > 0.0) {
            return Err(Error::invalid(format!("sweep gamma must be positive, got {g}")));
        }
    }
    let plans = rates_bytes_per_second
        .par_iter()
        .map(|&rate| {
            gammas
                .iter()
                .map(|&gamma| {
                    let cell = SystemConfig {
                        gamma,
                        rate_bytes_per_second: rate,
                        ..cfg.clone()
                    };
                    select_plan(candidates, &cell, baseline_accuracy)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepGrid {
        rates_bytes_per_second: rates_bytes_per_second.to_vec(),
        gammas: gammas.to_vec(),
        plans,
    })
}
