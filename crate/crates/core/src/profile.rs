//! Per-layer cost profiles: compute, output volume, and codec overhead.
//!
//! A profile answers, for one model, the questions a partition decision
//! needs: how long does the *server* take to run layers `1..=i` (the
//! cumulative curve `f`), and how many bytes leave layer `i` (raw and
//! encoded)? Timing comes either from wallclock medians on this host or from
//! a deterministic FLOPs/throughput model; data volumes are pure model
//! properties and never depend on the mode.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::Catalog;
use crate::codec::{self, CodecConfig};
use crate::engine;
use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::model::{ModelSpec, ModelState};
use crate::tensor::Tensor;

/// Bytes per activation element (32-bit reals everywhere).
pub const BYTES_PER_ELEMENT: u64 = 4;

/// Floating-point operations per layer, counting one multiply-add as two.
///
/// Convolution: `2 * k^2 * C_in * C_out * H_out * W_out`; dense:
/// `2 * in * out`; max pooling: `window^2` comparisons per output element;
/// flatten: zero.
pub fn analytic_flops(spec: &ModelSpec) -> Result<Vec<u64>> {
    let shapes = spec.output_shapes()?;
    let mut flops = Vec::with_capacity(spec.layer_count());
    let mut input = spec.input;
    for (layer, &out) in spec.layers.iter().zip(&shapes) {
        let (in_c, _, _) = input;
        let (out_c, oh, ow) = out;
        flops.push(match *layer {
            LayerKind::Conv { kernel, .. } => {
                2 * (kernel * kernel * in_c * out_c * oh * ow) as u64
            }
            LayerKind::MaxPool { window, .. } => (window * window * out_c * oh * ow) as u64,
            LayerKind::Flatten => 0,
            LayerKind::FullyConnected { out_features, .. } => 2 * (in_c * out_features) as u64,
        });
        input = out;
    }
    Ok(flops)
}

/// How layer seconds are obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimingMode {
    /// Median wallclock over `measured_runs` forward passes (after
    /// `warmup_runs` unrecorded ones), divided by the timing batch size.
    Wallclock {
        warmup_runs: usize,
        measured_runs: usize,
        batch: usize,
    },
    /// `flops / flops_per_second`; fully deterministic.
    Analytic { flops_per_second: f64 },
}

/// Throughput constants for codec timing in analytic mode (bytes of *raw*
/// feature data per second).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecTiming {
    pub encode_bytes_per_second: f64,
    pub decode_bytes_per_second: f64,
}

impl Default for CodecTiming {
    fn default() -> Self {
        CodecTiming {
            encode_bytes_per_second: 2.0e8,
            decode_bytes_per_second: 4.0e8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileConfig {
    pub mode: TimingMode,
    /// Codec used for the encoded-bytes column.
    pub codec: CodecConfig,
    pub codec_timing: CodecTiming,
    /// Seeds the uniform probe input; recorded in the profile so simulations
    /// can regenerate the identical probe.
    pub probe_seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            mode: TimingMode::Analytic { flops_per_second: 2.0e9 },
            codec: CodecConfig::default(),
            codec_timing: CodecTiming::default(),
            probe_seed: 0xBEEF,
        }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            TimingMode::Wallclock { measured_runs, batch, .. } => {
                if measured_runs < 3 {
                    return Err(Error::invalid(format!(
                        "wallclock timing needs at least 3 measured runs, got {measured_runs}"
                    )));
                }
                if batch == 0 {
                    return Err(Error::invalid("timing batch must be positive"));
                }
            }
            TimingMode::Analytic { flops_per_second } => {
                if !(flops_per_second.is_finite() && flops_per_second > 0.0) {
                    return Err(Error::invalid(format!(
                        "throughput must be positive, got {flops_per_second}"
                    )));
                }
            }
        }
        let t = self.codec_timing;
        if !(t.encode_bytes_per_second > 0.0 && t.decode_bytes_per_second > 0.0) {
            return Err(Error::invalid("codec throughputs must be positive"));
        }
        Ok(())
    }
}

/// One row of a profile.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerProfile {
    pub index: usize,
    pub name: String,
    pub flops: u64,
    /// Output elements per sample.
    pub output_elements: u64,
    /// Raw output bytes per sample (`elements * 4`).
    pub output_bytes: u64,
    /// Per-sample server seconds for this layer.
    pub seconds: f64,
    /// Server seconds for layers `0..=index` (the curve `f`).
    pub cumulative_seconds: f64,
    /// Blob size after encoding this layer's probe features.
    pub encoded_bytes: u64,
    pub encode_seconds: f64,
    pub decode_seconds: f64,
}

/// Complete per-layer profile of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelProfile {
    pub record_id: String,
    pub input_elements: u64,
    pub input_bytes: u64,
    pub layers: Vec<LayerProfile>,
    pub probe_seed: u64,
}

impl ModelProfile {
    /// Server seconds for the first `p` layers: `f(L_0) = 0`,
    /// `f(L_M) = ` [`ModelProfile::total_seconds`].
    pub fn cumulative_seconds(&self, p: usize) -> f64 {
        if p == 0 {
            0.0
        } else {
            self.layers[p - 1].cumulative_seconds
        }
    }

    /// Full-network server seconds `T`.
    pub fn total_seconds(&self) -> f64 {
        self.layers.last().map_or(0.0, |l| l.cumulative_seconds)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Writes the profile as a tab-separated table with `#`-prefixed header
    /// metadata. Floats round-trip exactly.
    pub fn write_tsv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "# layer profile v1")?;
        writeln!(w, "# record_id\t{}", self.record_id)?;
        writeln!(w, "# probe_seed\t{}", self.probe_seed)?;
        writeln!(w, "# input_elements\t{}", self.input_elements)?;
        writeln!(w, "# input_bytes\t{}", self.input_bytes)?;
        writeln!(
            w,
            "index\tname\tflops\toutput_elements\toutput_bytes\tseconds\t\
             cumulative_seconds\tencoded_bytes\tencode_seconds\tdecode_seconds"
        )?;
        for l in &self.layers {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                l.index,
                l.name,
                l.flops,
                l.output_elements,
                l.output_bytes,
                l.seconds,
                l.cumulative_seconds,
                l.encoded_bytes,
                l.encode_seconds,
                l.decode_seconds
            )?;
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_tsv(r: &mut impl BufRead) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "layer profile", detail };
        let mut record_id = None;
        let mut probe_seed = None;
        let mut input_elements = None;
        let mut input_bytes = None;
        let mut layers = Vec::new();
        let mut saw_version = false;
        let mut saw_columns = false;
        for (ln, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix("# ") {
                if meta == "layer profile v1" {
                    saw_version = true;
                    continue;
                }
                let (key, value) = meta
                    .split_once('\t')
                    .ok_or_else(|| bad(format!("line {}: bad metadata {meta:?}", ln + 1)))?;
                match key {
                    "record_id" => record_id = Some(value.to_string()),
                    "probe_seed" => probe_seed = Some(parse(value, ln)?),
                    "input_elements" => input_elements = Some(parse(value, ln)?),
                    "input_bytes" => input_bytes = Some(parse(value, ln)?),
                    _ => return Err(bad(format!("line {}: unknown key {key:?}", ln + 1))),
                }
                continue;
            }
            if line.starts_with("index\t") {
                saw_columns = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 10 {
                return Err(bad(format!("line {}: expected 10 columns, got {}", ln + 1, f.len())));
            }
            layers.push(LayerProfile {
                index: parse(f[0], ln)?,
                name: f[1].to_string(),
                flops: parse(f[2], ln)?,
                output_elements: parse(f[3], ln)?,
                output_bytes: parse(f[4], ln)?,
                seconds: parse(f[5], ln)?,
                cumulative_seconds: parse(f[6], ln)?,
                encoded_bytes: parse(f[7], ln)?,
                encode_seconds: parse(f[8], ln)?,
                decode_seconds: parse(f[9], ln)?,
            });
        }
        if !saw_version {
            return Err(bad("missing version line".into()));
        }
        if !saw_columns || layers.is_empty() {
            return Err(bad("no layer rows".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.index != i {
                return Err(bad(format!("row {i} has index {}", l.index)));
            }
        }
        Ok(ModelProfile {
            record_id: record_id.ok_or_else(|| bad("missing record_id".into()))?,
            probe_seed: probe_seed.ok_or_else(|| bad("missing probe_seed".into()))?,
            input_elements: input_elements.ok_or_else(|| bad("missing input_elements".into()))?,
            input_bytes: input_bytes.ok_or_else(|| bad("missing input_bytes".into()))?,
            layers,
        })
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        ModelProfile::read_tsv(&mut std::io::BufReader::new(file))
    }
}

fn parse<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Format {
        what: "layer profile",
        detail: format!("line {}: cannot parse {s:?}", line + 1),
    })
}

/// Seeded uniform `[0, 1)` probe input. Values are drawn sample-major, so the
/// first sample of any batch size equals the whole batch-1 probe.
pub fn probe_input(spec: &ModelSpec, batch: usize, seed: u64) -> Tensor {
    let (c, h, w) = spec.input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * c * h * w).map(|_| rng.gen::<f32>()).collect();
    Tensor::from_vec([batch, c, h, w], data).expect("probe shape is consistent")
}

/// Profiles one model: per-layer seconds (mode-dependent), cumulative curve,
/// raw data volumes, and codec columns measured on the seeded probe.
pub fn profile_model(model: &ModelState, record_id: &str, cfg: &ProfileConfig) -> Result<ModelProfile> {
    cfg.validate()?;
    let spec = &model.spec;
    let flops = analytic_flops(spec)?;
    let shapes = spec.output_shapes()?;
    let names = spec.layer_names();
    let m = spec.layer_count();

    let seconds = match cfg.mode {
        TimingMode::Analytic { flops_per_second } => {
            flops.iter().map(|&f| f as f64 / flops_per_second).collect::<Vec<f64>>()
        }
        TimingMode::Wallclock { warmup_runs, measured_runs, batch } => {
            measure_layer_seconds(model, cfg.probe_seed, warmup_runs, measured_runs, batch)?
        }
    };

    // Codec columns: encode each layer's batch-1 probe features.
    let probe = probe_input(spec, 1, cfg.probe_seed);
    let mut activation = probe;
    let mut layers = Vec::with_capacity(m);
    let mut cumulative = 0.0f64;
    for i in 0..m {
        activation = engine::forward_slice(model, &activation, i, i + 1)?;
        let (c, h, w) = shapes[i];
        let elements = (c * h * w) as u64;
        let raw_bytes = elements * BYTES_PER_ELEMENT;
        let blob = codec::encode(&activation, &cfg.codec)?;
        let (encode_seconds, decode_seconds) = match cfg.mode {
            TimingMode::Analytic { .. } => (
                raw_bytes as f64 / cfg.codec_timing.encode_bytes_per_second,
                raw_bytes as f64 / cfg.codec_timing.decode_bytes_per_second,
            ),
            TimingMode::Wallclock { measured_runs, .. } => {
                measure_codec_seconds(&activation, &cfg.codec, measured_runs)?
            }
        };
        cumulative += seconds[i];
        layers.push(LayerProfile {
            index: i,
            name: names[i].clone(),
            flops: flops[i],
            output_elements: elements,
            output_bytes: raw_bytes,
            seconds: seconds[i],
            cumulative_seconds: cumulative,
            encoded_bytes: blob.len() as u64,
            encode_seconds,
            decode_seconds,
        });
    }

    let (c, h, w) = spec.input;
    let input_elements = (c * h * w) as u64;
    Ok(ModelProfile {
        record_id: record_id.to_string(),
        input_elements,
        input_bytes: input_elements * BYTES_PER_ELEMENT,
        layers,
        probe_seed: cfg.probe_seed,
    })
}

fn measure_layer_seconds(
    model: &ModelState,
    probe_seed: u64,
    warmup_runs: usize,
    measured_runs: usize,
    batch: usize,
) -> Result<Vec<f64>> {
    let m = model.spec.layer_count();
    let probe = probe_input(&model.spec, batch, probe_seed);
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(measured_runs); m];
    for run in 0..warmup_runs + measured_runs {
        let mut activation = probe.clone();
        for i in 0..m {
            let start = Instant::now();
            let next = engine::forward_slice(model, &activation, i, i + 1)?;
            let dt = start.elapsed().as_secs_f64();
            if run >= warmup_runs {
                samples[i].push(dt / batch as f64);
            }
            activation = next;
        }
    }
    samples
        .into_iter()
        .map(|s| crate::stats::median(&s))
        .collect()
}

fn measure_codec_seconds(
    features: &Tensor,
    codec_cfg: &CodecConfig,
    measured_runs: usize,
) -> Result<(f64, f64)> {
    let mut enc = Vec::with_capacity(measured_runs);
    let mut dec = Vec::with_capacity(measured_runs);
    for _ in 0..measured_runs {
        let start = Instant::now();
        let b = codec::encode(features, codec_cfg)?;
        enc.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        codec::decode(&b)?;
        dec.push(start.elapsed().as_secs_f64());
    }
    Ok((crate::stats::median(&enc)?, crate::stats::median(&dec)?))
}

/// Profiles every record in the catalog, keyed by record id.
pub fn profile_catalog(
    catalog: &Catalog,
    cfg: &ProfileConfig,
) -> Result<BTreeMap<String, ModelProfile>> {
    let mut out = BTreeMap::new();
    for record in catalog.records() {
        let model = catalog.model(&record.id).expect("records and models align");
        out.insert(record.id.clone(), profile_model(model, &record.id, cfg)?);
    }
    Ok(out)
}
