//! The eight pipeline stages. Each returns its artifact list (paths relative
//! to the run directory) for the manifest; skip/prerequisite logic lives in
//! [`run`], shared by all of them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use prunepart::catalog::Catalog;
use prunepart::data::DataSplit;
use prunepart::plan::{self, CandidateModel, PartitionPlan, SystemConfig};
use prunepart::profile::{self, probe_input, ModelProfile};
use prunepart::pruning;
use prunepart::sim;
use prunepart::train;
use prunepart::zoo;

use crate::config::Config;
use crate::manifest::{RunManifest, Stage};
use crate::{report, CliError};

pub const CATALOG_DIR: &str = "catalog";
pub const PROFILE_DIR: &str = "profiles";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const PLAN_FILE: &str = "plan.toml";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_MD: &str = "sweep.md";
pub const TRACE_CSV: &str = "trace.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

/// Runs `stage` unless it is already up to date; enforces that its parent
/// stage completed under the current configuration.
pub fn run(stage: Stage, cfg: &Config, dir: &Path) -> Result<Outcome, CliError> {
    let mut manifest = RunManifest::load_or_new(dir)?;
    // Prerequisites come first: a stage may only claim "up to date" while its
    // parent still matches this configuration. Otherwise re-running the parent
    // with flag overrides would leave a child skipping against a plan it never
    // saw.
    manifest.check_prerequisites(cfg, stage, dir)?;
    if manifest.is_current(cfg, stage, dir) {
        let digest = &manifest.record(stage).expect("current record exists").digest;
        println!("{stage}: up to date under digest {}, nothing to do", &digest[..12]);
        return Ok(Outcome::Skipped);
    }
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let artifacts = match stage {
        Stage::Train => stage_train(cfg, dir)?,
        Stage::Prune1 => stage_prune1(cfg, dir)?,
        Stage::Prune2 => stage_prune2(cfg, dir)?,
        Stage::Profile => stage_profile(cfg, dir)?,
        Stage::Plan => stage_plan(cfg, dir)?,
        Stage::Sweep => stage_sweep(cfg, dir)?,
        Stage::Simulate => stage_simulate(cfg, dir)?,
        Stage::Report => report::stage_report(cfg, dir, &manifest)?,
    };
    manifest.complete(cfg, stage, dir, artifacts)?;
    Ok(Outcome::Ran)
}

// --- shared plumbing -----------------------------------------------------------

pub fn write_artifact(dir: &Path, name: &str, body: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    std::fs::write(&path, body)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// CSV artifact with the provenance comment every table carries.
pub fn write_table(cfg: &Config, dir: &Path, name: &str, header: &str, rows: &[String]) -> Result<(), CliError> {
    let mut body = format!("# config {}\n{header}\n", cfg.source_digest);
    for row in rows {
        body.push_str(row);
        body.push('\n');
    }
    write_artifact(dir, name, &body)
}

pub fn load_catalog(dir: &Path) -> Result<Catalog, CliError> {
    Catalog::load(&dir.join(CATALOG_DIR)).map_err(CliError::from)
}

pub fn load_profiles(dir: &Path, catalog: &Catalog) -> Result<BTreeMap<String, ModelProfile>, CliError> {
    let mut profiles = BTreeMap::new();
    for record in catalog.records() {
        let path = dir.join(PROFILE_DIR).join(format!("{}.tsv", record.id));
        if !path.exists() {
            return Err(CliError::Prerequisite(format!(
                "no profile for {:?}; run `prunepart profile` first",
                record.id
            )));
        }
        profiles.insert(record.id.clone(), ModelProfile::load_tsv(&path)?);
    }
    Ok(profiles)
}

fn make_data(cfg: &Config) -> Result<DataSplit, CliError> {
    zoo::synthetic(&cfg.data.to_synthetic()).map_err(CliError::from)
}

fn candidates(dir: &Path, cfg: &Config) -> Result<(Catalog, Vec<CandidateModel>), CliError> {
    let catalog = load_catalog(dir)?;
    let profiles = load_profiles(dir, &catalog)?;
    let cands = plan::candidates_from_catalog(&catalog, &profiles)?;
    let _ = cfg; // config participates via the caller's SystemConfig
    Ok((catalog, cands))
}

fn kept_fraction(catalog: &Catalog, id: &str) -> f64 {
    let original: usize = catalog.records()[0].filter_counts.iter().sum();
    let kept: usize = catalog
        .record(id)
        .map(|r| r.filter_counts.iter().sum())
        .unwrap_or(original);
    kept as f64 / original as f64
}

// --- plan document -------------------------------------------------------------

/// `plan.toml`: the selected plan plus the system settings it was made under.
#[derive(Debug, Deserialize, Serialize)]
pub struct PlanDoc {
    pub config_digest: String,
    pub record: String,
    pub partition: usize,
    pub accuracy: f64,
    pub gamma: f64,
    pub rate: String,
    pub rate_bytes_per_second: f64,
    pub use_codec: bool,
    pub device_seconds: f64,
    pub transmission_seconds: f64,
    pub server_seconds: f64,
    pub total_seconds: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
}

impl PlanDoc {
    fn new(cfg: &Config, plan: &PartitionPlan) -> PlanDoc {
        PlanDoc {
            config_digest: cfg.source_digest.clone(),
            record: plan.record_id.clone(),
            partition: plan.partition,
            accuracy: plan.accuracy,
            gamma: cfg.system.gamma,
            rate: cfg.system.rate.label.clone(),
            rate_bytes_per_second: cfg.system.rate.bytes_per_second,
            use_codec: plan.used_codec,
            device_seconds: plan.device_seconds,
            transmission_seconds: plan.transmission_seconds,
            server_seconds: plan.server_seconds,
            total_seconds: plan.total_seconds,
            uplink_bytes: plan.uplink_bytes,
            downlink_bytes: plan.downlink_bytes,
        }
    }

    fn to_plan(&self) -> PartitionPlan {
        PartitionPlan {
            record_id: self.record.clone(),
            partition: self.partition,
            accuracy: self.accuracy,
            device_seconds: self.device_seconds,
            transmission_seconds: self.transmission_seconds,
            server_seconds: self.server_seconds,
            total_seconds: self.total_seconds,
            uplink_bytes: self.uplink_bytes,
            downlink_bytes: self.downlink_bytes,
            used_codec: self.use_codec,
        }
    }

    pub fn load(dir: &Path) -> Result<PlanDoc, CliError> {
        let path = dir.join(PLAN_FILE);
        if !path.exists() {
            return Err(CliError::Prerequisite(format!(
                "no plan at {}; run `prunepart plan` first",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("corrupt plan {}: {e}", path.display())))
    }
}

// --- stages ----------------------------------------------------------------------

fn stage_train(cfg: &Config, dir: &Path) -> Result<Vec<String>, CliError> {
    let split = make_data(cfg)?;
    let mut model = cfg.model.init(&cfg.data)?;
    let layer_count = model.spec.layer_count();
    let stats = train::train(&mut model, &split.train, &cfg.train.to_train())?;
    let accuracy = train::evaluate(&model, &split.test)?;
    let catalog = Catalog::new(model, accuracy)?;
    catalog.save(&dir.join(CATALOG_DIR))?;

    let rows: Vec<String> = stats
        .iter()
        .map(|s| format!("{},{:.6}", s.epoch, s.mean_loss))
        .collect();
    write_table(cfg, dir, TRAIN_LOG, "epoch,mean_loss", &rows)?;
    println!(
        "train: baseline accuracy {accuracy:.3} after {} epochs ({layer_count} layers, {} train samples)",
        cfg.train.epochs,
        split.train.len()
    );
    Ok(vec![format!("{CATALOG_DIR}/index.toml"), TRAIN_LOG.to_string()])
}

fn stage_prune1(cfg: &Config, dir: &Path) -> Result<Vec<String>, CliError> {
    let mut catalog = load_catalog(dir)?;
    catalog.reset_to_original();
    let split = make_data(cfg)?;
    let sched = cfg.prune.step1.to_schedule(catalog.baseline_accuracy(), &cfg.train);
    sched.validate().map_err(|e| CliError::Config(format!("[prune.step1] {e}")))?;
    let selected = pruning::run_step1(&mut catalog, &split, &sched)?;
    catalog.save(&dir.join(CATALOG_DIR))?;
    let kept = kept_fraction(&catalog, &selected);
    println!(
        "prune1: selected {selected} — keeps {:.0}% of filters at accuracy {:.3} (floor {:.3})",
        kept * 100.0,
        catalog.record(&selected).expect("selected exists").accuracy,
        sched.accuracy_floor
    );
    Ok(vec![format!("{CATALOG_DIR}/index.toml")])
}

fn stage_prune2(cfg: &Config, dir: &Path) -> Result<Vec<String>, CliError> {
    let mut catalog = load_catalog(dir)?;
    catalog.drop_step2();
    let split = make_data(cfg)?;
    let sched = cfg.prune.step2.to_schedule(catalog.baseline_accuracy(), &cfg.train);
    sched.validate().map_err(|e| CliError::Config(format!("[prune.step2] {e}")))?;
    pruning::run_step2(&mut catalog, &split, &sched)?;
    catalog.save(&dir.join(CATALOG_DIR))?;
    let families = catalog.step2_families();
    let snapshots: usize = families.values().map(Vec::len).sum();
    println!(
        "prune2: {snapshots} snapshots across {} boundary families (floor {:.3})",
        families.len(),
        sched.accuracy_floor
    );
    Ok(vec![format!("{CATALOG_DIR}/index.toml")])
}

fn stage_profile(cfg: &Config, dir: &Path) -> Result<Vec<String>, CliError> {
    let catalog = load_catalog(dir)?;
    let profiles = profile::profile_catalog(&catalog, &cfg.profile.to_profile()?)?;
    let mut artifacts = Vec::with_capacity(profiles.len());
    for (id, model_profile) in &profiles {
        let rel = format!("{PROFILE_DIR}/{id}.tsv");
        let path = dir.join(&rel);
        std::fs::create_dir_all(path.parent().expect("profile dir has a parent"))
            .map_err(|e| CliError::Runtime(format!("cannot create profile dir: {e}")))?;
        model_profile.save_tsv(&path)?;
        artifacts.push(rel);
    }
    let original = &profiles["original"];
    println!(
        "profile: {} records; original runs {:.1} ms on the server rate model",
        profiles.len(),
        original.total_seconds() * 1e3
    );
    Ok(artifacts)
}

fn stage_plan(cfg: &Config, dir: &Path) -> Result<Vec<String>, CliError> {
    let (catalog, cands) = candidates(dir, cfg)?;
    let system = cfg.system.to_system()?;
    let floor = system.floor.resolve(catalog.baseline_accuracy());
    let best = plan::select_plan(&cands, &system, catalog.baseline_accuracy())?;
    let Some(best) = best else {
        return Err(CliError::Infeasible(format!(
            "no (record, partition) choice clears the accuracy floor {floor:.3} under \
             gamma={} rate={}",
            cfg.system.gamma, cfg.system.rate
        )));
    };
    let doc = PlanDoc::new(cfg, &best);
    write_artifact(dir, PLAN_FILE, &toml::to_string_pretty(&doc).expect("plan serializes"))?;
    println!(
        "plan: {} at partition {} — {:.2} ms total ({:.2} device + {:.2} link + {:.2} server), \
         accuracy {:.3}",
        best.record_id,
        best.partition,
        best.total_seconds * 1e3,
        best.device_seconds * 1e3,
        best.transmission_seconds * 1e3,
        best.server_seconds * 1e3,
        best.accuracy
    );
    Ok(vec![PLAN_FILE.to_string()])
}

fn stage_sweep(cfg: &Config, dir: &Path) -> Result<Vec<String>, CliError> {
    if cfg.sweep.rates.is_empty() || cfg.sweep.gammas.is_empty() {
        return Err(CliError::Config(
            "[sweep] needs at least one rate and one gamma".into(),
        ));
    }
    let (catalog, cands) = candidates(dir, cfg)?;
    let system = cfg.system.to_system()?;
    let baseline = catalog.baseline_accuracy();
    let rates: Vec<f64> = cfg.sweep.rates.iter().map(|r| r.bytes_per_second).collect();
    let grid = plan::sweep(&cands, &rates, &cfg.sweep.gammas, &system, baseline)?;

    let mut rows = Vec::new();
    for (i, rate) in cfg.sweep.rates.iter().enumerate() {
        for (j, &gamma) in cfg.sweep.gammas.iter().enumerate() {
            match &grid.plans[i][j] {
                Some(p) => rows.push(format!(
                    "{},{},{gamma},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    rate.label,
                    rate.bytes_per_second,
                    p.record_id,
                    p.partition,
                    p.accuracy,
                    p.device_seconds,
                    p.transmission_seconds,
                    p.server_seconds,
                    p.total_seconds
                )),
                None => rows.push(format!(
                    "{},{},{gamma},-,-,-,-,-,-,-",
                    rate.label, rate.bytes_per_second
                )),
            }
        }
    }
    write_table(
        cfg,
        dir,
        SWEEP_CSV,
        "rate,rate_bytes_per_second,gamma,record,partition,accuracy,device_seconds,transmission_seconds,server_seconds,total_seconds",
        &rows,
    )?;

    // Markdown summary: best split of the original network vs best split over
    // the full pruned catalog, per link rate.
    let originals: Vec<CandidateModel> =
        cands.iter().filter(|c| c.id == "original").cloned().collect();
    let mut md = format!(
        "# Link-rate sweep\n\nconfig {}\n",
        cfg.source_digest
    );
    for &gamma in &cfg.sweep.gammas {
        md.push_str(&format!(
            "\n## Device slowdown gamma = {gamma}\n\n\
             | link rate | original best (s) | pruned best (s) | improvement | chosen |\n\
             |---|---|---|---|---|\n"
        ));
        for rate in &cfg.sweep.rates {
            let sys = SystemConfig {
                gamma,
                rate_bytes_per_second: rate.bytes_per_second,
                ..system.clone()
            };
            let orig = plan::select_plan(&originals, &sys, baseline)?;
            let full = plan::select_plan(&cands, &sys, baseline)?;
            let row = match (orig, full) {
                (Some(o), Some(f)) => format!(
                    "| {rate} | {:.4} | {:.4} | {:.2}x | {} @ p={} |\n",
                    o.total_seconds,
                    f.total_seconds,
                    o.total_seconds / f.total_seconds,
                    f.record_id,
                    f.partition
                ),
                (Some(o), None) => {
                    format!("| {rate} | {:.4} | - | - | - |\n", o.total_seconds)
                }
                (None, Some(f)) => format!(
                    "| {rate} | - | {:.4} | - | {} @ p={} |\n",
                    f.total_seconds, f.record_id, f.partition
                ),
                (None, None) => format!("| {rate} | - | - | - | - |\n"),
            };
            md.push_str(&row);
        }
    }
    write_artifact(dir, SWEEP_MD, &md)?;
    println!(
        "sweep: {} rates x {} gammas written to {SWEEP_CSV} and {SWEEP_MD}",
        cfg.sweep.rates.len(),
        cfg.sweep.gammas.len()
    );
    Ok(vec![SWEEP_CSV.to_string(), SWEEP_MD.to_string()])
}

fn stage_simulate(cfg: &Config, dir: &Path) -> Result<Vec<String>, CliError> {
    let doc = PlanDoc::load(dir)?;
    let catalog = load_catalog(dir)?;
    let model = catalog.model(&doc.record).ok_or_else(|| {
        CliError::Prerequisite(format!(
            "plan names record {:?} which is not in the catalog; re-run `prunepart plan`",
            doc.record
        ))
    })?;
    let profiles = load_profiles(dir, &catalog)?;
    let probe_seed = profiles[&doc.record].probe_seed;
    let input = probe_input(&model.spec, 1, probe_seed);
    let sim_cfg = cfg.to_sim()?;
    let deterministic = cfg.simulate.is_deterministic()?;

    let (trace, note) = if deterministic {
        let trace =
            sim::validate_plan(model, &input, &doc.to_plan(), &sim_cfg, cfg.simulate.tolerance)?;
        (trace, format!("validated: every component within {:.1}% of the plan", cfg.simulate.tolerance * 100.0))
    } else {
        let trace = sim::run_partitioned(model, &input, doc.partition, &sim_cfg)?;
        (trace, "stochastic settings (jitter/overhead); plan comparison skipped".to_string())
    };

    let mut body = format!(
        "# config {}\n# record {} partition {}\n# {note}\n\
         # device_seconds {:.9}\n# transmission_seconds {:.9}\n# server_seconds {:.9}\n# total_seconds {:.9}\n\
         host,label,seconds,bytes\n",
        cfg.source_digest,
        doc.record,
        doc.partition,
        trace.device_seconds,
        trace.transmission_seconds,
        trace.server_seconds,
        trace.total_seconds
    );
    for event in &trace.events {
        let bytes = event.bytes.map(|b| b.to_string()).unwrap_or_default();
        body.push_str(&format!(
            "{:?},{},{:.9},{bytes}\n",
            event.host, event.label, event.seconds
        ));
    }
    write_artifact(dir, TRACE_CSV, &body)?;
    println!(
        "simulate: {} events, total {:.2} ms — {note}",
        trace.events.len(),
        trace.total_seconds * 1e3
    );
    Ok(vec![TRACE_CSV.to_string()])
}
