//! The run manifest: which stages completed, under which configuration.
//!
//! Every stage gets a digest chaining the tool version, the config sections
//! it reads, and its parent stage's digest. Re-running a stage whose recorded
//! digest still matches (and whose artifacts still exist) is a no-op;
//! running a stage whose parent is missing or was produced under a different
//! configuration is refused with the stage to run first.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Train,
    Prune1,
    Prune2,
    Profile,
    Plan,
    Sweep,
    Simulate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Prune1 => "prune1",
            Stage::Prune2 => "prune2",
            Stage::Profile => "profile",
            Stage::Plan => "plan",
            Stage::Sweep => "sweep",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        }
    }

    pub fn parent(self) -> Option<Stage> {
        match self {
            Stage::Train => None,
            Stage::Prune1 => Some(Stage::Train),
            Stage::Prune2 => Some(Stage::Prune1),
            Stage::Profile => Some(Stage::Prune2),
            Stage::Plan | Stage::Sweep | Stage::Report => Some(Stage::Profile),
            Stage::Simulate => Some(Stage::Plan),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Seeds actually used by the run, mirrored here so a manifest alone
/// documents how to reproduce the artifacts.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
pub struct Seeds {
    pub data: u64,
    pub model_init: u64,
    pub train: u64,
    pub prune_step1: u64,
    pub prune_step2: u64,
    pub probe: u64,
}

impl Seeds {
    pub fn from_config(cfg: &Config) -> Seeds {
        Seeds {
            data: cfg.data.seed,
            model_init: cfg.model.init_seed,
            train: cfg.train.seed,
            prune_step1: cfg.prune.step1.seed,
            prune_step2: cfg.prune.step2.seed,
            probe: cfg.profile.probe_seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct StageRecord {
    pub digest: String,
    /// Artifact paths relative to the run directory.
    pub artifacts: Vec<String>,
}

/// Stage slots in dependency order (serialization preserves field order, so
/// the file reads top-to-bottom as the pipeline runs).
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default)]
pub struct Stages {
    pub train: Option<StageRecord>,
    pub prune1: Option<StageRecord>,
    pub prune2: Option<StageRecord>,
    pub profile: Option<StageRecord>,
    pub plan: Option<StageRecord>,
    pub sweep: Option<StageRecord>,
    pub simulate: Option<StageRecord>,
    pub report: Option<StageRecord>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(default)]
pub struct RunManifest {
    pub tool_version: String,
    /// SHA-256 of the config file that most recently ran a stage here.
    pub config_digest: String,
    pub catalog_path: String,
    pub seeds: Seeds,
    pub stages: Stages,
}

impl RunManifest {
    pub fn load_or_new(dir: &Path) -> Result<RunManifest, CliError> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("corrupt manifest {}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_FILE), text)
            .map_err(|e| CliError::Runtime(format!("cannot write manifest: {e}")))?;
        Ok(())
    }

    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        match stage {
            Stage::Train => self.stages.train.as_ref(),
            Stage::Prune1 => self.stages.prune1.as_ref(),
            Stage::Prune2 => self.stages.prune2.as_ref(),
            Stage::Profile => self.stages.profile.as_ref(),
            Stage::Plan => self.stages.plan.as_ref(),
            Stage::Sweep => self.stages.sweep.as_ref(),
            Stage::Simulate => self.stages.simulate.as_ref(),
            Stage::Report => self.stages.report.as_ref(),
        }
    }

    pub fn set_record(&mut self, stage: Stage, record: StageRecord) {
        let slot = match stage {
            Stage::Train => &mut self.stages.train,
            Stage::Prune1 => &mut self.stages.prune1,
            Stage::Prune2 => &mut self.stages.prune2,
            Stage::Profile => &mut self.stages.profile,
            Stage::Plan => &mut self.stages.plan,
            Stage::Sweep => &mut self.stages.sweep,
            Stage::Simulate => &mut self.stages.simulate,
            Stage::Report => &mut self.stages.report,
        };
        *slot = Some(record);
    }

    /// Expected digest for `stage` under `cfg`, chaining through parents.
    pub fn expected_digest(&self, cfg: &Config, stage: Stage) -> String {
        let version = env!("CARGO_PKG_VERSION");
        let parent = stage
            .parent()
            .map(|p| self.expected_digest(cfg, p))
            .unwrap_or_default();
        let sections: Vec<String> = match stage {
            Stage::Train => vec![
                Config::section_toml(&cfg.data),
                Config::section_toml(&cfg.model),
                Config::section_toml(&cfg.train),
            ],
            Stage::Prune1 => vec![Config::section_toml(&cfg.prune.step1)],
            Stage::Prune2 => vec![Config::section_toml(&cfg.prune.step2)],
            Stage::Profile => vec![Config::section_toml(&cfg.profile)],
            Stage::Plan => vec![Config::section_toml(&cfg.system)],
            Stage::Sweep => vec![
                Config::section_toml(&cfg.system),
                Config::section_toml(&cfg.sweep),
            ],
            Stage::Simulate => vec![
                Config::section_toml(&cfg.system),
                Config::section_toml(&cfg.simulate),
            ],
            // The report also folds in which optional stages it could read,
            // so completing plan/sweep/simulate later makes it stale.
            Stage::Report => vec![
                Config::section_toml(&cfg.system),
                optional_input(self, cfg, Stage::Plan),
                optional_input(self, cfg, Stage::Sweep),
                optional_input(self, cfg, Stage::Simulate),
            ],
        };
        let mut parts: Vec<&[u8]> = vec![version.as_bytes(), stage.name().as_bytes(), parent.as_bytes()];
        for s in &sections {
            parts.push(s.as_bytes());
        }
        sha256_hex(&parts)
    }

    /// Up to date means: recorded digest matches the expected one and every
    /// artifact still exists.
    pub fn is_current(&self, cfg: &Config, stage: Stage, dir: &Path) -> bool {
        match self.record(stage) {
            Some(rec) => {
                rec.digest == self.expected_digest(cfg, stage)
                    && rec.artifacts.iter().all(|a| dir.join(a).exists())
            }
            None => false,
        }
    }

    /// Refuses to run `stage` unless its parent completed under the current
    /// configuration.
    pub fn check_prerequisites(&self, cfg: &Config, stage: Stage, dir: &Path) -> Result<(), CliError> {
        let Some(parent) = stage.parent() else { return Ok(()) };
        match self.record(parent) {
            None => Err(CliError::Prerequisite(format!(
                "stage `{stage}` needs `{parent}`; run `prunepart {parent}` first"
            ))),
            Some(_) if !self.is_current(cfg, parent, dir) => Err(CliError::Prerequisite(format!(
                "stage `{parent}` is stale (its configuration or inputs changed); \
                 re-run `prunepart {parent}` first"
            ))),
            Some(_) => Ok(()),
        }
    }

    /// Marks `stage` complete and persists the manifest.
    pub fn complete(
        &mut self,
        cfg: &Config,
        stage: Stage,
        dir: &Path,
        artifacts: Vec<String>,
    ) -> Result<(), CliError> {
        self.tool_version = env!("CARGO_PKG_VERSION").to_string();
        self.config_digest = cfg.source_digest.clone();
        self.catalog_path = crate::stages::CATALOG_DIR.to_string();
        self.seeds = Seeds::from_config(cfg);
        let digest = self.expected_digest(cfg, stage);
        self.set_record(stage, StageRecord { digest, artifacts });
        self.save(dir)
    }
}

fn optional_input(manifest: &RunManifest, cfg: &Config, stage: Stage) -> String {
    if manifest.is_current_shallow(cfg, stage) {
        manifest.expected_digest(cfg, stage)
    } else {
        String::from("-")
    }
}

impl RunManifest {
    /// `is_current` without the filesystem check (for digest computation).
    fn is_current_shallow(&self, cfg: &Config, stage: Stage) -> bool {
        self.record(stage)
            .is_some_and(|rec| rec.digest == self.expected_digest(cfg, stage))
    }
}

/// Resolves the run directory: `--output` wins, then `$PRUNEPART_OUT` as the
/// root for the configured directory, then the configured directory itself.
pub fn resolve_output(cli_output: Option<PathBuf>, cfg: &Config) -> PathBuf {
    if let Some(out) = cli_output {
        return out;
    }
    match std::env::var_os("PRUNEPART_OUT") {
        Some(root) => PathBuf::from(root).join(&cfg.run.output_dir),
        None => PathBuf::from(&cfg.run.output_dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_only_react_to_the_sections_a_stage_reads() {
        let manifest = RunManifest::default();
        let base: Config = toml::from_str("").unwrap();
        let mut edited = base.clone();
        edited.system.gamma = 9.0;

        // [system] feeds plan/sweep/simulate/report, not the earlier stages.
        for stage in [Stage::Train, Stage::Prune1, Stage::Prune2, Stage::Profile] {
            assert_eq!(
                manifest.expected_digest(&base, stage),
                manifest.expected_digest(&edited, stage),
                "{stage} must ignore [system]"
            );
        }
        for stage in [Stage::Plan, Stage::Sweep, Stage::Simulate, Stage::Report] {
            assert_ne!(
                manifest.expected_digest(&base, stage),
                manifest.expected_digest(&edited, stage),
                "{stage} must react to [system]"
            );
        }

        // A data edit invalidates everything downstream through the chain.
        let mut retrained = base.clone();
        retrained.data.seed = 99;
        for stage in [Stage::Train, Stage::Prune1, Stage::Profile, Stage::Plan, Stage::Simulate] {
            assert_ne!(
                manifest.expected_digest(&base, stage),
                manifest.expected_digest(&retrained, stage),
                "{stage} must chain to the training inputs"
            );
        }
    }

    #[test]
    fn completing_an_optional_stage_makes_the_report_stale() {
        let cfg: Config = toml::from_str("").unwrap();
        let mut manifest = RunManifest::default();
        let before = manifest.expected_digest(&cfg, Stage::Report);
        let digest = manifest.expected_digest(&cfg, Stage::Sweep);
        manifest.set_record(Stage::Sweep, StageRecord { digest, artifacts: vec![] });
        let after = manifest.expected_digest(&cfg, Stage::Report);
        assert_ne!(before, after, "a completed sweep must re-render the report");
    }

    #[test]
    fn stage_parents_follow_the_pipeline_order() {
        assert_eq!(Stage::Train.parent(), None);
        assert_eq!(Stage::Prune1.parent(), Some(Stage::Train));
        assert_eq!(Stage::Prune2.parent(), Some(Stage::Prune1));
        assert_eq!(Stage::Profile.parent(), Some(Stage::Prune2));
        assert_eq!(Stage::Plan.parent(), Some(Stage::Profile));
        assert_eq!(Stage::Sweep.parent(), Some(Stage::Profile));
        assert_eq!(Stage::Simulate.parent(), Some(Stage::Plan));
        assert_eq!(Stage::Report.parent(), Some(Stage::Profile));
    }

    #[test]
    fn sha256_matches_the_known_empty_and_abc_vectors() {
        // Single-part hashes include an 8-byte length prefix, so compare the
        // underlying primitive directly on the classic vectors.
        use sha2::{Digest, Sha256};
        let abc = Sha256::digest(b"abc");
        assert_eq!(
            format!("{abc:x}"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        // And the framed helper is stable and collision-framed: ("ab","c")
        // differs from ("a","bc").
        assert_ne!(
            sha256_hex(&[b"ab", b"c"]),
            sha256_hex(&[b"a", b"bc"]),
            "length framing must separate part boundaries"
        );
    }
}
