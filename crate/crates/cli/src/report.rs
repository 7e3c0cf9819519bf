//! The `report` stage: renders every result table as CSV (full data) plus a
//! single `report.md` overview. Tables are recomputed from the catalog and
//! profiles; plan/sweep/simulate sections appear when those stages are
//! current.

use std::path::Path;

use prunepart::catalog::Lineage;
use prunepart::plan::{self, CandidateModel};

use crate::config::Config;
use crate::manifest::{RunManifest, Stage};
use crate::stages::{
    self, load_catalog, load_profiles, write_artifact, write_table, PlanDoc, SWEEP_MD,
};
use crate::CliError;

pub const REPORT_MD: &str = "report.md";
pub const LAYER_DATA_CSV: &str = "layer_data.csv";
pub const LATENCY_CSV: &str = "latency_breakdown.csv";
pub const STEP1_CSV: &str = "accuracy_vs_fraction.csv";
pub const STEP2_CSV: &str = "transmission_vs_accuracy.csv";

pub fn stage_report(cfg: &Config, dir: &Path, manifest: &RunManifest) -> Result<Vec<String>, CliError> {
    let catalog = load_catalog(dir)?;
    let profiles = load_profiles(dir, &catalog)?;
    let cands = plan::candidates_from_catalog(&catalog, &profiles)?;
    let system = cfg.system.to_system()?;
    let baseline = catalog.baseline_accuracy();

    let original = candidate(&cands, "original")?;
    let selected_id = catalog
        .step1_selected()
        .expect("profile stage requires completed pruning")
        .to_string();
    let selected = candidate(&cands, &selected_id)?;

    // 1. Per-layer data volume, codec size, and cumulative prefix latency.
    let mut layer_rows = Vec::new();
    for cand in [&original, &selected] {
        let model = catalog.model(&cand.id).expect("candidate comes from catalog");
        for (layer, spec) in cand.profile.layers.iter().zip(&model.spec.layers) {
            layer_rows.push(format!(
                "{},{},{},{},{},{},{:.3},{:.9}",
                cand.id,
                layer.index,
                layer.name,
                spec.is_pool(),
                layer.output_bytes,
                layer.encoded_bytes,
                layer.output_bytes as f64 / layer.encoded_bytes.max(1) as f64,
                layer.cumulative_seconds
            ));
        }
    }
    write_table(
        cfg,
        dir,
        LAYER_DATA_CSV,
        "model,layer,name,is_pool,output_bytes,encoded_bytes,compression_ratio,cumulative_server_seconds",
        &layer_rows,
    )?;

    // 2. Latency breakdown at every partition point.
    let mut breakdown_rows = Vec::new();
    for cand in [&original, &selected] {
        for p in 0..=cand.profile.layer_count() {
            let plan = plan::assemble_plan(cand, p, &system)?;
            let boundary = if p == 0 { "input" } else { &cand.profile.layers[p - 1].name };
            breakdown_rows.push(format!(
                "{},{p},{boundary},{:.9},{:.9},{:.9},{:.9},{}",
                cand.id,
                plan.device_seconds,
                plan.transmission_seconds,
                plan.server_seconds,
                plan.total_seconds,
                plan.uplink_bytes
            ));
        }
    }
    write_table(
        cfg,
        dir,
        LATENCY_CSV,
        "model,partition,boundary,device_seconds,transmission_seconds,server_seconds,total_seconds,uplink_bytes",
        &breakdown_rows,
    )?;

    // 3. Step-1 pruning curve: accuracy vs fraction of filters removed.
    let original_filters: usize = catalog.records()[0].filter_counts.iter().sum();
    let mut step1_rows = Vec::new();
    for rec in catalog.records() {
        let iteration = match rec.lineage {
            Lineage::Original => 0,
            Lineage::Step1 { iteration } => iteration,
            Lineage::Step2 { .. } => continue,
        };
        let kept: usize = rec.filter_counts.iter().sum();
        step1_rows.push(format!(
            "{},{iteration},{kept},{:.4},{:.4},{}",
            rec.id,
            1.0 - kept as f64 / original_filters as f64,
            rec.accuracy,
            rec.below_floor
        ));
    }
    write_table(
        cfg,
        dir,
        STEP1_CSV,
        "record,iteration,kept_filters,removed_fraction,accuracy,below_floor",
        &step1_rows,
    )?;

    // 4. Step-2 families: transferred bytes at each allowed boundary.
    let mut step2_rows = Vec::new();
    for cand in &cands {
        let Some(rec) = catalog.record(&cand.id) else { continue };
        let Lineage::Step2 { layer, iteration } = rec.lineage else { continue };
        let plan::AllowedPartitions::Only(allowed) = &cand.allowed else { continue };
        for &p in allowed {
            let at = &cand.profile.layers[p - 1];
            step2_rows.push(format!(
                "{},{layer},{iteration},{p},{},{},{:.4},{}",
                cand.id, at.output_bytes, at.encoded_bytes, rec.accuracy, rec.below_floor
            ));
        }
    }
    write_table(
        cfg,
        dir,
        STEP2_CSV,
        "record,family_layer,iteration,partition,output_bytes,encoded_bytes,accuracy,below_floor",
        &step2_rows,
    )?;

    // 5. The overview document.
    let mut md = String::new();
    md.push_str(&format!(
        "# Split-inference run report\n\n\
         - tool: prunepart {}\n- config digest: `{}`\n- baseline accuracy: {baseline:.3}\n\
         - model: {} ({} layers, {} filters)\n- system: gamma={} rate={} codec={}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.source_digest,
        cfg.model.family,
        original.profile.layer_count(),
        original_filters,
        cfg.system.gamma,
        cfg.system.rate,
        cfg.system.use_codec,
    ));

    if manifest.is_current(cfg, Stage::Plan, dir) {
        let doc = PlanDoc::load(dir)?;
        let device_only = plan::assemble_plan(&original, original.profile.layer_count(), &system)?;
        let edge_only = plan::assemble_plan(&original, 0, &system)?;
        md.push_str(&format!(
            "\n## Selected plan\n\n\
             | choice | total (s) | device (s) | link (s) | server (s) | uplink bytes |\n\
             |---|---|---|---|---|---|\n\
             | {} @ p={} | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n\
             | original, device-only | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n\
             | original, edge-only | {:.4} | {:.4} | {:.4} | {:.4} | {} |\n\n\
             Speedup vs device-only: {:.2}x; vs edge-only: {:.2}x.\n",
            doc.record,
            doc.partition,
            doc.total_seconds,
            doc.device_seconds,
            doc.transmission_seconds,
            doc.server_seconds,
            doc.uplink_bytes,
            device_only.total_seconds,
            device_only.device_seconds,
            device_only.transmission_seconds,
            device_only.server_seconds,
            device_only.uplink_bytes,
            edge_only.total_seconds,
            edge_only.device_seconds,
            edge_only.transmission_seconds,
            edge_only.server_seconds,
            edge_only.uplink_bytes,
            device_only.total_seconds / doc.total_seconds,
            edge_only.total_seconds / doc.total_seconds,
        ));
    }

    md.push_str(&format!(
        "\n## Per-layer data volume ({selected_id})\n\nFull data: `{LAYER_DATA_CSV}`.\n\n\
         | layer | name | output bytes | encoded bytes | ratio | cumulative server s |\n\
         |---|---|---|---|---|---|\n"
    ));
    for layer in &selected.profile.layers {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {:.2} | {:.6} |\n",
            layer.index,
            layer.name,
            layer.output_bytes,
            layer.encoded_bytes,
            layer.output_bytes as f64 / layer.encoded_bytes.max(1) as f64,
            layer.cumulative_seconds
        ));
    }

    md.push_str(&format!(
        "\n## Latency breakdown per partition (original)\n\nFull data: `{LATENCY_CSV}`.\n\n\
         | partition | boundary | device (s) | link (s) | server (s) | total (s) |\n\
         |---|---|---|---|---|---|\n"
    ));
    for p in 0..=original.profile.layer_count() {
        let row = plan::assemble_plan(&original, p, &system)?;
        let boundary = if p == 0 { "input" } else { &original.profile.layers[p - 1].name };
        md.push_str(&format!(
            "| {p} | {boundary} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            row.device_seconds, row.transmission_seconds, row.server_seconds, row.total_seconds
        ));
    }

    md.push_str(&format!(
        "\n## Step-1 pruning curve\n\nFull data: `{STEP1_CSV}`.\n\n\
         | record | removed | accuracy | below floor |\n|---|---|---|---|\n"
    ));
    for row in &step1_rows {
        let f: Vec<&str> = row.split(',').collect();
        md.push_str(&format!("| {} | {:.0}% | {} | {} |\n", f[0], f[3].parse::<f64>().unwrap_or(0.0) * 100.0, f[4], f[5]));
    }

    md.push_str(&format!(
        "\n## Step-2 boundary compression\n\nFull data: `{STEP2_CSV}`. Best within-budget \
         record per pooling boundary, against the step-1 model:\n\n\
         | boundary | step-1 bytes | best record | bytes | reduction | accuracy |\n\
         |---|---|---|---|---|---|\n"
    ));
    let floor = system.floor.resolve(baseline);
    for p in 1..=selected.profile.layer_count() {
        if !selected.is_pool[p - 1] {
            continue;
        }
        let step1_bytes = selected.profile.layers[p - 1].output_bytes;
        let best = cands
            .iter()
            .filter(|c| {
                matches!(&c.allowed, plan::AllowedPartitions::Only(a) if a.contains(&p))
                    && c.accuracy > floor
            })
            .min_by_key(|c| c.profile.layers[p - 1].output_bytes);
        match best {
            Some(c) => {
                let bytes = c.profile.layers[p - 1].output_bytes;
                md.push_str(&format!(
                    "| p={p} | {step1_bytes} | {} | {bytes} | {:.2}x | {:.3} |\n",
                    c.id,
                    step1_bytes as f64 / bytes.max(1) as f64,
                    c.accuracy
                ));
            }
            None => md.push_str(&format!("| p={p} | {step1_bytes} | - | - | - | - |\n")),
        }
    }

    if manifest.is_current(cfg, Stage::Sweep, dir) {
        let sweep = std::fs::read_to_string(dir.join(SWEEP_MD))
            .map_err(|e| CliError::Runtime(format!("cannot read {SWEEP_MD}: {e}")))?;
        md.push_str("\n## Link-rate sweep\n");
        if let Some(body) = sweep.find("\n##") {
            // Demote the file's own sections under this one.
            md.push_str(&sweep[body..].replace("\n## ", "\n### "));
        }
        md.push('\n');
    }

    if manifest.is_current(cfg, Stage::Simulate, dir) {
        md.push_str(&format!(
            "\n## Simulation\n\nTrace in `{}` (see its header for the plan comparison).\n",
            stages::TRACE_CSV
        ));
    }

    write_artifact(dir, REPORT_MD, &md)?;
    println!(
        "report: {REPORT_MD} plus {LAYER_DATA_CSV}, {LATENCY_CSV}, {STEP1_CSV}, {STEP2_CSV}"
    );
    Ok(vec![
        REPORT_MD.to_string(),
        LAYER_DATA_CSV.to_string(),
        LATENCY_CSV.to_string(),
        STEP1_CSV.to_string(),
        STEP2_CSV.to_string(),
    ])
}

fn candidate(cands: &[CandidateModel], id: &str) -> Result<CandidateModel, CliError> {
    cands
        .iter()
        .find(|c| c.id == id)
        .cloned()
        .ok_or_else(|| CliError::Runtime(format!("catalog record {id:?} has no candidate")))
}
