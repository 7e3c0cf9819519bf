//! Deterministic device/link/server execution of a partitioned model.
//!
//! Where the planner predicts latency from a profile, the simulator actually
//! *runs* the network: layers `1..=p` execute on the simulated device, the
//! boundary features (optionally encoded) cross the link, and the server
//! finishes the suffix and returns the result message. Every step appends a
//! timed [`TraceEvent`] to a virtual clock; no real sleeping happens.
//!
//! The same degrees of freedom as the planner apply — device slowdown
//! `gamma`, link rate, codec on/off — plus two the planner deliberately
//! ignores: per-transfer `overhead_bytes` and multiplicative [`Jitter`] on
//! every event. With analytic timing, jitter off, and zero overhead the
//! simulator is exactly the planner's model executed step by step, which is
//! what [`validate_plan`] exploits; with jitter or wallclock timing it shows
//! how a plan degrades under variability.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{self, CodecConfig};
use crate::engine;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::plan::PartitionPlan;
use crate::profile::{analytic_flops, CodecTiming, BYTES_PER_ELEMENT};
use crate::tensor::Tensor;

/// Multiplicative noise applied to each event's duration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Jitter {
    Off,
    /// Every event scaled by the same factor (total scales by it exactly).
    Fixed(f64),
    /// Independent log-normal factors `exp(sigma * z)`, seeded.
    LogNormal { sigma: f64, seed: u64 },
}

impl Jitter {
    fn validate(&self) -> Result<()> {
        match *self {
            Jitter::Off => Ok(()),
            Jitter::Fixed(f) if f.is_finite() && f > 0.0 => Ok(()),
            Jitter::Fixed(f) => Err(Error::invalid(format!(
                "jitter factor must be positive, got {f}"
            ))),
            Jitter::LogNormal { sigma, .. } if sigma.is_finite() && sigma >= 0.0 => Ok(()),
            Jitter::LogNormal { sigma, .. } => Err(Error::invalid(format!(
                "jitter sigma must be nonnegative, got {sigma}"
            ))),
        }
    }
}

/// Draws one jitter factor per event.
enum JitterState {
    Off,
    Fixed(f64),
    LogNormal { sigma: f64, rng: ChaCha8Rng },
}

impl JitterState {
    fn new(jitter: Jitter) -> Self {
        match jitter {
            Jitter::Off => JitterState::Off,
            Jitter::Fixed(f) => JitterState::Fixed(f),
            Jitter::LogNormal { sigma, seed } => JitterState::LogNormal {
                sigma,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        }
    }

    fn factor(&mut self) -> f64 {
        match self {
            JitterState::Off => 1.0,
            JitterState::Fixed(f) => *f,
            JitterState::LogNormal { sigma, rng } => {
                let z: f64 = rng.sample(StandardNormal);
                (*sigma * z).exp()
            }
        }
    }
}

/// Where event durations come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SimMode {
    /// Durations from the FLOPs/throughput model — reproducible anywhere.
    Analytic {
        flops_per_second: f64,
        codec_timing: CodecTiming,
    },
    /// Durations measured on this host while the simulation runs.
    Wallclock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    /// Device slowdown factor relative to the server.
    pub gamma: f64,
    /// Link rate in bytes per second.
    pub rate_bytes_per_second: f64,
    /// Encode boundary features instead of sending raw planes.
    pub use_codec: bool,
    pub codec: CodecConfig,
    /// Size of the final classification message; `None` means
    /// `classes * 4` bytes.
    pub result_message_bytes: Option<u64>,
    /// Extra bytes charged on every transfer (framing, headers).
    pub overhead_bytes: u64,
    pub mode: SimMode,
    pub jitter: Jitter,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            gamma: 5.0,
            rate_bytes_per_second: 137_500.0,
            use_codec: false,
            codec: CodecConfig::default(),
            result_message_bytes: None,
            overhead_bytes: 0,
            mode: SimMode::Analytic {
                flops_per_second: 2.0e9,
                codec_timing: CodecTiming::default(),
            },
            jitter: Jitter::Off,
        }
    }
}

impl SimConfig {
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
        if let SimMode::Analytic { flops_per_second, codec_timing } = self.mode {
            if !(flops_per_second.is_finite() && flops_per_second > 0.0) {
                return Err(Error::invalid(format!(
                    "throughput must be positive, got {flops_per_second}"
                )));
            }
            if !(codec_timing.encode_bytes_per_second > 0.0
                && codec_timing.decode_bytes_per_second > 0.0)
            {
                return Err(Error::invalid("codec throughputs must be positive"));
            }
        }
        self.jitter.validate()
    }

    fn result_bytes(&self, classes: usize) -> u64 {
        self.result_message_bytes.unwrap_or(classes as u64 * 4)
    }
}

/// Which side of the system an event ran on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Host {
    Device,
    Link,
    Server,
}

/// One timed step of a simulated request.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceEvent {
    pub host: Host,
    /// What happened: a layer name, `"encode"`, `"decode"`, `"uplink"`, or
    /// `"downlink"`.
    pub label: String,
    pub seconds: f64,
    /// Bytes moved, for link events.
    pub bytes: Option<u64>,
}

/// Full record of one simulated request.
#[derive(Clone, Debug)]
pub struct Trace {
    pub record_id: String,
    /// Layers that ran on the device.
    pub partition: usize,
    pub events: Vec<TraceEvent>,
    pub device_seconds: f64,
    pub transmission_seconds: f64,
    pub server_seconds: f64,
    pub total_seconds: f64,
    /// Device-to-server payload, excluding per-transfer overhead.
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// Network logits (post-codec if the boundary was encoded).
    pub output: Tensor,
}

impl Trace {
    fn push(&mut self, host: Host, label: impl Into<String>, seconds: f64, bytes: Option<u64>) {
        match host {
            Host::Device => self.device_seconds += seconds,
            Host::Link => self.transmission_seconds += seconds,
            Host::Server => self.server_seconds += seconds,
        }
        self.total_seconds += seconds;
        self.events.push(TraceEvent { host, label: label.into(), seconds, bytes });
    }
}

/// Runs one single-sample request with layers `1..=partition` on the device.
///
/// The data path is real: the boundary tensor produced on the device is what
/// crosses the link (through the codec when enabled; quantization error then
/// flows into the logits), and the server continues from exactly the bytes it
/// received.
pub fn run_partitioned(
    model: &ModelState,
    input: &Tensor,
    partition: usize,
    cfg: &SimConfig,
) -> Result<Trace> {
    cfg.validate()?;
    let m = model.spec.layer_count();
    if partition > m {
        return Err(Error::invalid(format!(
            "partition {partition} out of range for {m} layers"
        )));
    }
    if input.batch() != 1 {
        return Err(Error::invalid(format!(
            "simulation runs one request at a time; got batch {}",
            input.batch()
        )));
    }

    let layer_seconds = server_layer_seconds(model, cfg)?;
    let names = model.spec.layer_names();
    let result_bytes = cfg.result_bytes(model.spec.classes);
    let mut jitter = JitterState::new(cfg.jitter);
    let mut trace = Trace {
        record_id: String::new(),
        partition,
        events: Vec::new(),
        device_seconds: 0.0,
        transmission_seconds: 0.0,
        server_seconds: 0.0,
        total_seconds: 0.0,
        uplink_bytes: 0,
        downlink_bytes: 0,
        output: Tensor::zeros([1, 1, 1, 1]),
    };

    // Device prefix.
    let mut activation = input.clone();
    for i in 0..partition {
        let (next, base) = run_layer(model, &activation, i, layer_seconds.as_deref())?;
        trace.push(Host::Device, &names[i], cfg.gamma * base * jitter.factor(), None);
        activation = next;
    }

    // Boundary crossing. For `partition == m` the device already finished,
    // so the uplink carries only the result message and the tensor passes
    // straight through.
    let codec_active = cfg.use_codec && partition > 0 && partition < m;
    let mut activation = if codec_active {
        let raw = raw_bytes(&activation);
        let (blob, encode_base, decode_base) = run_codec(&activation, cfg)?;
        trace.push(Host::Device, "encode", cfg.gamma * encode_base * jitter.factor(), None);
        let blob_len = blob.len() as u64;
        trace.push(
            Host::Link,
            "uplink",
            transfer_seconds(blob_len, cfg) * jitter.factor(),
            Some(blob_len),
        );
        trace.uplink_bytes = blob_len;
        let (decoded, _) = codec::decode(&blob)?;
        trace.push(Host::Server, "decode", decode_base * jitter.factor(), None);
        debug_assert_eq!(raw_bytes(&decoded), raw);
        decoded
    } else {
        let payload = if partition == m { result_bytes } else { raw_bytes(&activation) };
        trace.push(
            Host::Link,
            "uplink",
            transfer_seconds(payload, cfg) * jitter.factor(),
            Some(payload),
        );
        trace.uplink_bytes = payload;
        activation
    };

    // Server suffix and result return.
    for i in partition..m {
        let (next, base) = run_layer(model, &activation, i, layer_seconds.as_deref())?;
        trace.push(Host::Server, &names[i], base * jitter.factor(), None);
        activation = next;
    }
    if partition < m {
        trace.push(
            Host::Link,
            "downlink",
            transfer_seconds(result_bytes, cfg) * jitter.factor(),
            Some(result_bytes),
        );
        trace.downlink_bytes = result_bytes;
    }

    trace.output = activation;
    Ok(trace)
}

/// Per-layer base seconds in analytic mode; `None` means wallclock.
fn server_layer_seconds(model: &ModelState, cfg: &SimConfig) -> Result<Option<Vec<f64>>> {
    match cfg.mode {
        SimMode::Analytic { flops_per_second, .. } => Ok(Some(
            analytic_flops(&model.spec)?
                .into_iter()
                .map(|f| f as f64 / flops_per_second)
                .collect(),
        )),
        SimMode::Wallclock => Ok(None),
    }
}

/// Executes layer `i`, returning its output and base (server) duration.
fn run_layer(
    model: &ModelState,
    activation: &Tensor,
    i: usize,
    analytic: Option<&[f64]>,
) -> Result<(Tensor, f64)> {
    match analytic {
        Some(seconds) => {
            let out = engine::forward_slice(model, activation, i, i + 1)?;
            Ok((out, seconds[i]))
        }
        None => {
            let start = Instant::now();
            let out = engine::forward_slice(model, activation, i, i + 1)?;
            Ok((out, start.elapsed().as_secs_f64()))
        }
    }
}

/// Encodes the boundary tensor, returning the blob and base encode/decode
/// durations (analytic: raw bytes over throughput; wallclock: measured).
fn run_codec(features: &Tensor, cfg: &SimConfig) -> Result<(Vec<u8>, f64, f64)> {
    match cfg.mode {
        SimMode::Analytic { codec_timing, .. } => {
            let raw = raw_bytes(features) as f64;
            let blob = codec::encode(features, &cfg.codec)?;
            Ok((
                blob,
                raw / codec_timing.encode_bytes_per_second,
                raw / codec_timing.decode_bytes_per_second,
            ))
        }
        SimMode::Wallclock => {
            let start = Instant::now();
            let blob = codec::encode(features, &cfg.codec)?;
            let encode = start.elapsed().as_secs_f64();
            let start = Instant::now();
            codec::decode(&blob)?;
            let decode = start.elapsed().as_secs_f64();
            Ok((blob, encode, decode))
        }
    }
}

fn raw_bytes(t: &Tensor) -> u64 {
    t.len() as u64 * BYTES_PER_ELEMENT
}

fn transfer_seconds(payload: u64, cfg: &SimConfig) -> f64 {
    (payload + cfg.overhead_bytes) as f64 / cfg.rate_bytes_per_second
}

/// Checks a plan against an actual simulated run of the same model.
///
/// The simulation must be configured deterministically (analytic timing,
/// jitter off, zero overhead) — otherwise the comparison would measure noise,
/// and this returns an invalid-input error. Each latency component and the
/// total must match the plan within `tolerance` relative error; the first
/// component out of bounds produces [`Error::Validation`]. On success the
/// trace is returned for inspection.
pub fn validate_plan(
    model: &ModelState,
    input: &Tensor,
    plan: &PartitionPlan,
    cfg: &SimConfig,
    tolerance: f64,
) -> Result<Trace> {
    if !(tolerance.is_finite() && tolerance > 0.0) {
        return Err(Error::invalid(format!(
            "tolerance must be positive, got {tolerance}"
        )));
    }
    if !matches!(cfg.mode, SimMode::Analytic { .. }) {
        return Err(Error::invalid(
            "plan validation requires analytic timing; wallclock runs measure host noise",
        ));
    }
    if cfg.jitter != Jitter::Off {
        return Err(Error::invalid("plan validation requires jitter off"));
    }
    if cfg.overhead_bytes != 0 {
        return Err(Error::invalid(
            "plan validation requires zero transfer overhead; the plan does not model it",
        ));
    }
    if cfg.use_codec != plan.used_codec && plan.partition > 0 && plan.partition < model.spec.layer_count()
    {
        return Err(Error::invalid(format!(
            "plan {} codec but simulation {} it",
            if plan.used_codec { "used the" } else { "did not use the" },
            if cfg.use_codec { "enables" } else { "disables" },
        )));
    }

    let mut trace = run_partitioned(model, input, plan.partition, cfg)?;
    trace.record_id = plan.record_id.clone();
    let checks = [
        ("device", plan.device_seconds, trace.device_seconds),
        ("transmission", plan.transmission_seconds, trace.transmission_seconds),
        ("server", plan.server_seconds, trace.server_seconds),
        ("total", plan.total_seconds, trace.total_seconds),
    ];
    for (component, planned, simulated) in checks {
        let relative = (simulated - planned).abs() / planned.abs().max(1e-12);
        if relative > tolerance {
            return Err(Error::Validation {
                component,
                planned,
                simulated,
                relative,
                tolerance,
            });
        }
    }
    Ok(trace)
}
