//! Run configuration: a TOML file with one section per pipeline concern.
//!
//! Every rate field carries an explicit unit (`"1.1 Mbps"`, `"137.5 kB/s"`);
//! bare numbers are rejected so nobody has to guess. Each section
//! re-serializes canonically for the stage digests in [`crate::manifest`],
//! which means formatting and comments never invalidate completed stages —
//! only value changes do.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use prunepart::model::{ModelSpec, ModelState};
use prunepart::plan::{AccuracyFloor, CandidatePolicy, SystemConfig};
use prunepart::profile::{CodecTiming, ProfileConfig, TimingMode};
use prunepart::pruning::PruneSchedule;
use prunepart::sim::{Jitter, SimConfig, SimMode};
use prunepart::train::TrainConfig;
use prunepart::zoo::{self, SyntheticConfig, VggConfig};

use crate::CliError;

// --- link rates with explicit units -------------------------------------------

/// A link rate parsed from `"<value> <unit>"`. The original label is kept for
/// table output.
#[derive(Clone, Debug, PartialEq)]
pub struct Rate {
    pub label: String,
    pub bytes_per_second: f64,
}

const RATE_UNITS: &[(&str, f64)] = &[
    ("B/s", 1.0),
    ("kB/s", 1e3),
    ("MB/s", 1e6),
    ("kbps", 125.0),
    ("Mbps", 125e3),
];

impl FromStr for Rate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let split = trimmed
            .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+'))
            .ok_or_else(|| format!("rate {trimmed:?} has no unit; write e.g. \"1.1 Mbps\""))?;
        let (number, unit) = trimmed.split_at(split);
        let unit = unit.trim();
        let value: f64 = number
            .trim()
            .parse()
            .map_err(|_| format!("rate {trimmed:?} has no numeric value"))?;
        let scale = RATE_UNITS
            .iter()
            .find(|(name, _)| *name == unit)
            .map(|(_, scale)| *scale)
            .ok_or_else(|| {
                let known: Vec<&str> = RATE_UNITS.iter().map(|(n, _)| *n).collect();
                format!("unknown rate unit {unit:?}; use one of {known:?}")
            })?;
        let bytes_per_second = value * scale;
        if !(bytes_per_second.is_finite() && bytes_per_second > 0.0) {
            return Err(format!("rate {trimmed:?} must be positive"));
        }
        Ok(Rate { label: trimmed.to_string(), bytes_per_second })
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

impl<'de> Deserialize<'de> for Rate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(D::Error::custom)
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.label)
    }
}

// --- sections ------------------------------------------------------------------

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Run directory, relative to the working directory (or to
    /// `$PRUNEPART_OUT` when that is set; `--output` overrides both).
    pub output_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { output_dir: "runs/default".into() }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        DataSection {
            classes: d.classes,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
            channels: d.channels,
            height: d.height,
            width: d.width,
            noise: d.noise,
            seed: d.seed,
        }
    }
}

impl DataSection {
    pub fn to_synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            classes: self.classes,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            channels: self.channels,
            height: self.height,
            width: self.width,
            noise: self.noise,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `"vgg-mini"`, `"vgg16"`, or `"custom"` (which reads the fields below).
    pub family: String,
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    pub fc_hidden: Vec<usize>,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            family: "vgg-mini".into(),
            stage_widths: Vec::new(),
            convs_per_stage: Vec::new(),
            fc_hidden: Vec::new(),
            init_seed: 1,
        }
    }
}

impl ModelSection {
    pub fn build_spec(&self, data: &DataSection) -> Result<ModelSpec, CliError> {
        let input = (data.channels, data.height, data.width);
        let spec = match self.family.as_str() {
            "vgg-mini" => zoo::vgg_mini(data.classes),
            "vgg16" => zoo::vgg16(input, data.classes),
            "custom" => zoo::vgg(&VggConfig {
                input,
                classes: data.classes,
                stage_widths: self.stage_widths.clone(),
                convs_per_stage: self.convs_per_stage.clone(),
                fc_hidden: self.fc_hidden.clone(),
            }),
            other => {
                return Err(CliError::Config(format!(
                    "[model] family {other:?} unknown; use \"vgg-mini\", \"vgg16\", or \"custom\""
                )))
            }
        }
        .map_err(|e| CliError::Config(format!("[model] {e}")))?;
        if spec.input != input {
            return Err(CliError::Config(format!(
                "[model] family {:?} expects input {:?} but [data] provides {:?}",
                self.family, spec.input, input
            )));
        }
        Ok(spec)
    }

    pub fn init(&self, data: &DataSection) -> Result<ModelState, CliError> {
        let spec = self.build_spec(data)?;
        ModelState::init(spec, self.init_seed).map_err(CliError::from)
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: 6,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            seed: 1,
        }
    }
}

impl TrainSection {
    pub fn to_train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub fraction_per_iteration: f64,
    pub finetune_epochs: usize,
    /// Accuracy budget in points below the baseline; the floor is
    /// `baseline - budget/100`.
    pub budget_points: f64,
    pub min_filters: usize,
    pub max_iterations: Option<usize>,
    pub seed: u64,
}

impl Default for PruneSection {
    fn default() -> Self {
        PruneSection {
            fraction_per_iteration: 0.1,
            finetune_epochs: 2,
            budget_points: 2.0,
            min_filters: 4,
            max_iterations: None,
            seed: 1000,
        }
    }
}

impl PruneSection {
    pub fn to_schedule(&self, baseline: f64, train: &TrainSection) -> PruneSchedule {
        PruneSchedule {
            fraction_per_iteration: self.fraction_per_iteration,
            finetune: TrainConfig {
                epochs: self.finetune_epochs,
                seed: self.seed,
                ..train.to_train()
            },
            accuracy_floor: (baseline - self.budget_points / 100.0).clamp(0.0, 1.0),
            min_filters: self.min_filters,
            scoring_batches: 4,
            scoring_batch_size: train.batch_size,
            max_iterations: self.max_iterations,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSteps {
    pub step1: PruneSection,
    pub step2: PruneSection,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    /// Server-side compute throughput assumed by the analytic timing model.
    pub flops_per_second: f64,
    pub encode_bytes_per_second: f64,
    pub decode_bytes_per_second: f64,
    /// Feature container: `"packed"` (zero-RLE + DEFLATE) or `"png"`.
    pub container: String,
    pub probe_seed: u64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        let d = ProfileConfig::default();
        let timing = d.codec_timing;
        let flops_per_second = match d.mode {
            TimingMode::Analytic { flops_per_second } => flops_per_second,
            TimingMode::Wallclock { .. } => 2.0e9,
        };
        ProfileSection {
            flops_per_second,
            encode_bytes_per_second: timing.encode_bytes_per_second,
            decode_bytes_per_second: timing.decode_bytes_per_second,
            container: "packed".into(),
            probe_seed: d.probe_seed,
        }
    }
}

impl ProfileSection {
    pub fn container(&self) -> Result<prunepart::codec::Container, CliError> {
        match self.container.as_str() {
            "packed" => Ok(prunepart::codec::Container::Packed),
            "png" => Ok(prunepart::codec::Container::Png),
            other => Err(CliError::Config(format!(
                "[profile] container {other:?} unknown; use \"packed\" or \"png\""
            ))),
        }
    }

    pub fn codec_timing(&self) -> CodecTiming {
        CodecTiming {
            encode_bytes_per_second: self.encode_bytes_per_second,
            decode_bytes_per_second: self.decode_bytes_per_second,
        }
    }

    pub fn to_profile(&self) -> Result<ProfileConfig, CliError> {
        Ok(ProfileConfig {
            mode: TimingMode::Analytic { flops_per_second: self.flops_per_second },
            codec: prunepart::codec::CodecConfig { container: self.container()? },
            codec_timing: self.codec_timing(),
            probe_seed: self.probe_seed,
        })
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    /// Device slowdown relative to the server.
    pub gamma: f64,
    pub rate: Rate,
    /// Accuracy budget in points below baseline for plan feasibility.
    pub budget_points: f64,
    /// Absolute accuracy floor; overrides `budget_points` when set.
    pub floor_absolute: Option<f64>,
    /// Partition candidates: `"endpoints"` (device-only and edge-only
    /// included), `"all-layers"`, or `"pooling-only"`.
    pub partitions: String,
    pub use_codec: bool,
    pub result_message_bytes: Option<u64>,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection {
            gamma: 5.0,
            rate: "1.1 Mbps".parse().expect("static rate parses"),
            budget_points: 4.0,
            floor_absolute: None,
            partitions: "endpoints".into(),
            use_codec: false,
            result_message_bytes: None,
        }
    }
}

impl SystemSection {
    pub fn policy(&self) -> Result<CandidatePolicy, CliError> {
        match self.partitions.as_str() {
            "endpoints" => Ok(CandidatePolicy::EndpointsIncluded),
            "all-layers" => Ok(CandidatePolicy::AllLayers),
            "pooling-only" => Ok(CandidatePolicy::PoolingOnly),
            other => Err(CliError::Config(format!(
                "[system] partitions {other:?} unknown; use \"endpoints\", \"all-layers\", or \
                 \"pooling-only\""
            ))),
        }
    }

    pub fn to_system(&self) -> Result<SystemConfig, CliError> {
        let cfg = SystemConfig {
            gamma: self.gamma,
            rate_bytes_per_second: self.rate.bytes_per_second,
            floor: match self.floor_absolute {
                Some(a) => AccuracyFloor::Absolute(a),
                None => AccuracyFloor::DropPoints(self.budget_points),
            },
            policy: self.policy()?,
            use_codec: self.use_codec,
            result_message_bytes: self.result_message_bytes,
        };
        cfg.validate().map_err(|e| CliError::Config(format!("[system] {e}")))?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub rates: Vec<Rate>,
    pub gammas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            rates: ["1.1 Mbps", "5.85 Mbps", "18.88 Mbps"]
                .iter()
                .map(|s| s.parse().expect("static rate parses"))
                .collect(),
            gammas: vec![5.0],
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    /// Relative tolerance for the plan-vs-trace comparison.
    pub tolerance: f64,
    /// `"off"`, `"fixed:<factor>"`, or `"lognormal:<sigma>:<seed>"`. Anything
    /// but `"off"` makes the trace stochastic, so the plan comparison is
    /// skipped for it.
    pub jitter: String,
    /// Fixed per-transfer overhead added to every payload.
    pub overhead_bytes: u64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { tolerance: 0.01, jitter: "off".into(), overhead_bytes: 0 }
    }
}

impl SimulateSection {
    pub fn jitter(&self) -> Result<Jitter, CliError> {
        let parts: Vec<&str> = self.jitter.split(':').collect();
        let bad = || {
            CliError::Config(format!(
                "[simulate] jitter {:?} unknown; use \"off\", \"fixed:<factor>\", or \
                 \"lognormal:<sigma>:<seed>\"",
                self.jitter
            ))
        };
        match parts.as_slice() {
            ["off"] => Ok(Jitter::Off),
            ["fixed", f] => Ok(Jitter::Fixed(f.parse().map_err(|_| bad())?)),
            ["lognormal", sigma, seed] => Ok(Jitter::LogNormal {
                sigma: sigma.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }

    /// True when the trace is deterministic and comparable against a plan.
    pub fn is_deterministic(&self) -> Result<bool, CliError> {
        Ok(self.jitter()? == Jitter::Off && self.overhead_bytes == 0)
    }
}

// --- the whole file -------------------------------------------------------------

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub prune: PruneSteps,
    pub profile: ProfileSection,
    pub system: SystemSection,
    pub sweep: SweepSection,
    pub simulate: SimulateSection,
    /// SHA-256 of the raw config file; stamped on every artifact.
    #[serde(skip)]
    pub source_digest: String,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: Config = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.source_digest = crate::manifest::sha256_hex(&[text.as_bytes()]);
        Ok(cfg)
    }

    /// Simulator settings consistent with the profile and system sections, so
    /// deterministic traces land exactly on planned numbers.
    pub fn to_sim(&self) -> Result<SimConfig, CliError> {
        Ok(SimConfig {
            gamma: self.system.gamma,
            rate_bytes_per_second: self.system.rate.bytes_per_second,
            use_codec: self.system.use_codec,
            codec: prunepart::codec::CodecConfig { container: self.profile.container()? },
            result_message_bytes: self.system.result_message_bytes,
            overhead_bytes: self.simulate.overhead_bytes,
            mode: SimMode::Analytic {
                flops_per_second: self.profile.flops_per_second,
                codec_timing: self.profile.codec_timing(),
            },
            jitter: self.simulate.jitter()?,
        })
    }

    /// Canonical serialization of one section for digesting. Panics only on
    /// serializer bugs, never on user input.
    pub fn section_toml<T: Serialize>(section: &T) -> String {
        toml::to_string(section).expect("config sections serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_convert_units_exactly() {
        let cases = [
            ("137500 B/s", 137_500.0),
            ("137.5 kB/s", 137_500.0),
            ("2 MB/s", 2e6),
            ("1.1 Mbps", 137_500.0),
            ("1100 kbps", 137_500.0),
            ("1.1Mbps", 137_500.0), // space optional
        ];
        for (text, expected) in cases {
            let rate: Rate = text.parse().unwrap_or_else(|e| panic!("{text}: {e}"));
            assert_eq!(rate.bytes_per_second, expected, "{text}");
            assert_eq!(rate.label, text);
        }
    }

    #[test]
    fn rates_without_a_unit_or_with_nonsense_are_rejected() {
        for text in ["137500", "fast", "1.1 furlongs", "-2 Mbps", "Mbps"] {
            let parsed: Result<Rate, _> = text.parse();
            assert!(parsed.is_err(), "{text:?} should not parse");
        }
    }

    #[test]
    fn defaults_parse_back_from_an_empty_file() {
        let cfg: Config = toml::from_str("").expect("all sections have defaults");
        assert_eq!(cfg.system.rate.bytes_per_second, 137_500.0);
        assert_eq!(cfg.sweep.rates.len(), 3);
        assert!(cfg.simulate.is_deterministic().expect("default jitter parses"));
    }

    #[test]
    fn jitter_strings_parse_to_simulator_settings() {
        let mut sim = SimulateSection::default();
        assert_eq!(sim.jitter().unwrap(), Jitter::Off);
        sim.jitter = "fixed:1.5".into();
        assert_eq!(sim.jitter().unwrap(), Jitter::Fixed(1.5));
        sim.jitter = "lognormal:0.2:9".into();
        assert_eq!(sim.jitter().unwrap(), Jitter::LogNormal { sigma: 0.2, seed: 9 });
        assert!(!sim.is_deterministic().unwrap());
        sim.jitter = "gaussian:1".into();
        assert!(sim.jitter().is_err());
    }
}
