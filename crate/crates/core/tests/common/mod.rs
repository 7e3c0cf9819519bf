//! Shared test oracles, written independently of the library internals.
//!
//! * [`NaiveNet`] re-implements the forward pass and loss in 64-bit floats
//!   with direct nested loops — no im2col, no GEMM, no shared helpers — so it
//!   can serve as a reference for outputs and for finite-difference
//!   gradients.
//! * [`oracle_select`] re-implements plan selection as a flat
//!   enumerate-sort-take-first, the simplest possible argmin.
//! * [`random_candidates`] / [`random_system`] generate arbitrary planning
//!   inputs for oracle comparison.

#![allow(dead_code)]

use rand::Rng;

use prunepart::layer::LayerKind;
use prunepart::model::ModelState;
use prunepart::plan::{
    AccuracyFloor, AllowedPartitions, CandidateModel, CandidatePolicy, PartitionPlan,
    SystemConfig,
};
use prunepart::profile::{LayerProfile, ModelProfile};
use prunepart::tensor::Tensor;

// --- Independent f64 reference network -------------------------------------

enum NaiveLayer {
    Conv {
        out_c: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        out_f: usize,
        in_f: usize,
        relu: bool,
    },
}

/// Plain-loop f64 re-implementation of the network math, with its own copy
/// of the parameters (flat per layer, weights then bias — the same order the
/// library exposes through flat indexing).
pub struct NaiveNet {
    input: (usize, usize, usize),
    layers: Vec<NaiveLayer>,
    /// Per-layer flat parameters, `[]` for parameterless layers.
    pub params: Vec<Vec<f64>>,
}

impl NaiveNet {
    pub fn from_model(model: &ModelState) -> NaiveNet {
        let mut layers = Vec::new();
        let mut shape = model.spec.input;
        for kind in &model.spec.layers {
            let (c, h, w) = shape;
            match *kind {
                LayerKind::Conv { out_channels, kernel, stride, padding, relu } => {
                    layers.push(NaiveLayer::Conv {
                        out_c: out_channels,
                        in_c: c,
                        kernel,
                        stride,
                        padding,
                        relu,
                    });
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    shape = (out_channels, oh, ow);
                }
                LayerKind::MaxPool { window, stride } => {
                    layers.push(NaiveLayer::MaxPool { window, stride });
                    shape = (c, (h - window) / stride + 1, (w - window) / stride + 1);
                }
                LayerKind::Flatten => {
                    layers.push(NaiveLayer::Flatten);
                    shape = (c * h * w, 1, 1);
                }
                LayerKind::FullyConnected { out_features, relu } => {
                    layers.push(NaiveLayer::Dense { out_f: out_features, in_f: c * h * w, relu });
                    shape = (out_features, 1, 1);
                }
            }
        }
        let params = model
            .params
            .iter()
            .map(|p| p.flat().iter().map(|&v| f64::from(v)).collect())
            .collect();
        NaiveNet { input: model.spec.input, layers, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    /// Mutable access by the same flat index the library uses.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for layer in &mut self.params {
            if i < layer.len() {
                return &mut layer[i];
            }
            i -= layer.len();
        }
        panic!("parameter index out of range");
    }

    /// Forward pass to logits: one `Vec<f64>` of `classes` values per sample.
    pub fn logits(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let [batch, c0, h0, w0] = x.shape();
        assert_eq!((c0, h0, w0), self.input, "input shape mismatch");
        (0..batch)
            .map(|b| {
                let plane = c0 * h0 * w0;
                let mut act: Vec<f64> = x.data()[b * plane..(b + 1) * plane]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect();
                let mut shape = self.input;
                for (layer, params) in self.layers.iter().zip(&self.params) {
                    let (c, h, w) = shape;
                    match *layer {
                        NaiveLayer::Conv { out_c, in_c, kernel, stride, padding, relu } => {
                            assert_eq!(in_c, c);
                            let oh = (h + 2 * padding - kernel) / stride + 1;
                            let ow = (w + 2 * padding - kernel) / stride + 1;
                            let weights = &params[..out_c * in_c * kernel * kernel];
                            let bias = &params[out_c * in_c * kernel * kernel..];
                            let mut out = vec![0.0f64; out_c * oh * ow];
                            for o in 0..out_c {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let mut acc = bias[o];
                                        for i in 0..in_c {
                                            for kh in 0..kernel {
                                                for kw in 0..kernel {
                                                    let y = (oy * stride + kh) as isize
                                                        - padding as isize;
                                                    let xx = (ox * stride + kw) as isize
                                                        - padding as isize;
                                                    if y < 0
                                                        || xx < 0
                                                        || y >= h as isize
                                                        || xx >= w as isize
                                                    {
                                                        continue;
                                                    }
                                                    let v = act
                                                        [(i * h + y as usize) * w + xx as usize];
                                                    let wv = weights[((o * in_c + i) * kernel
                                                        + kh)
                                                        * kernel
                                                        + kw];
                                                    acc += v * wv;
                                                }
                                            }
                                        }
                                        if relu && acc < 0.0 {
                                            acc = 0.0;
                                        }
                                        out[(o * oh + oy) * ow + ox] = acc;
                                    }
                                }
                            }
                            act = out;
                            shape = (out_c, oh, ow);
                        }
                        NaiveLayer::MaxPool { window, stride } => {
                            let oh = (h - window) / stride + 1;
                            let ow = (w - window) / stride + 1;
                            let mut out = vec![0.0f64; c * oh * ow];
                            for ch in 0..c {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let mut best = f64::NEG_INFINITY;
                                        for ky in 0..window {
                                            for kx in 0..window {
                                                let v = act[(ch * h + oy * stride + ky) * w
                                                    + ox * stride
                                                    + kx];
                                                if v > best {
                                                    best = v;
                                                }
                                            }
                                        }
                                        out[(ch * oh + oy) * ow + ox] = best;
                                    }
                                }
                            }
                            act = out;
                            shape = (c, oh, ow);
                        }
                        NaiveLayer::Flatten => {
                            shape = (c * h * w, 1, 1);
                        }
                        NaiveLayer::Dense { out_f, in_f, relu } => {
                            assert_eq!(in_f, c * h * w);
                            let weights = &params[..out_f * in_f];
                            let bias = &params[out_f * in_f..];
                            let mut out = vec![0.0f64; out_f];
                            for (o, slot) in out.iter_mut().enumerate() {
                                let mut acc = bias[o];
                                for (i, &v) in act.iter().enumerate() {
                                    acc += weights[o * in_f + i] * v;
                                }
                                if relu && acc < 0.0 {
                                    acc = 0.0;
                                }
                                *slot = acc;
                            }
                            act = out;
                            shape = (out_f, 1, 1);
                        }
                    }
                }
                act
            })
            .collect()
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> f64 {
        let logits = self.logits(x);
        assert_eq!(logits.len(), labels.len());
        let mut total = 0.0;
        for (z, &label) in logits.iter().zip(labels) {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
            total += denom.ln() - (z[label] - max);
        }
        total / labels.len() as f64
    }

    /// Central finite difference of the loss with respect to flat parameter
    /// `i`.
    pub fn fd_gradient(&mut self, i: usize, x: &Tensor, labels: &[usize]) -> f64 {
        let original = *self.param_mut(i);
        // Small enough that the secant rarely straddles a ReLU kink (the
        // dominant error source here); the f64 forward pass keeps the
        // difference quotient well above cancellation noise at this scale.
        let h = 1e-6 * (1.0 + original.abs());
        *self.param_mut(i) = original + h;
        let plus = self.loss(x, labels);
        *self.param_mut(i) = original - h;
        let minus = self.loss(x, labels);
        *self.param_mut(i) = original;
        (plus - minus) / (2.0 * h)
    }
}

// --- Brute-force plan selection oracle --------------------------------------

/// Every partition the policy admits — re-derived here, not shared.
fn oracle_partitions(policy: CandidatePolicy, m: usize, is_pool: &[bool]) -> Vec<usize> {
    let mut out = Vec::new();
    match policy {
        CandidatePolicy::AllLayers => out.extend(1..m),
        CandidatePolicy::PoolingOnly => {
            for p in 1..=m {
                if is_pool[p - 1] {
                    out.push(p);
                }
            }
        }
        CandidatePolicy::EndpointsIncluded => out.extend(0..=m),
    }
    out
}

/// Total latency of one (candidate, partition) cell, assembled longhand.
fn oracle_total(cand: &CandidateModel, p: usize, cfg: &SystemConfig) -> f64 {
    let m = cand.profile.layer_count();
    let result = cfg
        .result_message_bytes
        .unwrap_or(cand.classes as u64 * 4);
    let f_p = cand.profile.cumulative_seconds(p);
    let codec = cfg.use_codec && p > 0 && p < m;

    let mut device = cfg.gamma * f_p;
    let mut server = cand.profile.total_seconds() - f_p;
    if codec {
        device += cfg.gamma * cand.profile.layers[p - 1].encode_seconds;
        server += cand.profile.layers[p - 1].decode_seconds;
    }
    let up = if p == 0 {
        cand.profile.input_bytes
    } else if p == m {
        result
    } else if cfg.use_codec {
        cand.profile.layers[p - 1].encoded_bytes
    } else {
        cand.profile.layers[p - 1].output_bytes
    };
    let down = if p < m { result } else { 0 };
    let transmission = (up + down) as f64 / cfg.rate_bytes_per_second;
    device + transmission + server
}

/// Enumerate every feasible cell, sort, take the first. Returns
/// `(record id, partition, total seconds)`.
pub fn oracle_select(
    candidates: &[CandidateModel],
    cfg: &SystemConfig,
    baseline_accuracy: f64,
) -> Option<(String, usize, f64)> {
    let floor = match cfg.floor {
        AccuracyFloor::Absolute(a) => a,
        AccuracyFloor::DropPoints(d) => baseline_accuracy - d / 100.0,
    };
    let mut cells: Vec<(f64, usize, usize, String)> = Vec::new();
    for cand in candidates {
        if cand.accuracy <= floor {
            continue;
        }
        for p in oracle_partitions(cfg.policy, cand.profile.layer_count(), &cand.is_pool) {
            let allowed = match &cand.allowed {
                AllowedPartitions::All => true,
                AllowedPartitions::Only(set) => set.contains(&p),
            };
            if !allowed {
                continue;
            }
            cells.push((oracle_total(cand, p, cfg), p, cand.ordinal, cand.id.clone()));
        }
    }
    cells.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite totals")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    cells.into_iter().next().map(|(total, p, _, id)| (id, p, total))
}

/// Convenience: checks a library plan against the oracle's pick.
pub fn agrees_with_oracle(
    plan: &Option<PartitionPlan>,
    oracle: &Option<(String, usize, f64)>,
) -> bool {
    match (plan, oracle) {
        (None, None) => true,
        (Some(p), Some((id, part, total))) => {
            p.record_id == *id
                && p.partition == *part
                && (p.total_seconds - total).abs() <= 1e-12 * total.abs().max(1.0)
        }
        _ => false,
    }
}

// --- Random planning inputs --------------------------------------------------

/// A random profile: arbitrary per-layer seconds, byte volumes, codec columns.
pub fn random_profile(rng: &mut impl Rng, id: &str, layers: usize) -> ModelProfile {
    let mut cumulative = 0.0;
    let rows = (0..layers)
        .map(|i| {
            let seconds = rng.gen_range(0.0..5e-3);
            cumulative += seconds;
            let elements = rng.gen_range(1u64..50_000);
            let raw = elements * 4;
            LayerProfile {
                index: i,
                name: format!("layer{i}"),
                flops: rng.gen_range(0..10_000_000),
                output_elements: elements,
                output_bytes: raw,
                seconds,
                cumulative_seconds: cumulative,
                encoded_bytes: rng.gen_range(1..=raw),
                encode_seconds: rng.gen_range(0.0..1e-3),
                decode_seconds: rng.gen_range(0.0..1e-3),
            }
        })
        .collect();
    let input_elements = rng.gen_range(1u64..10_000);
    ModelProfile {
        record_id: id.to_string(),
        input_elements,
        input_bytes: input_elements * 4,
        layers: rows,
        probe_seed: 0,
    }
}

/// Up to `max_records` candidates sharing one layer count (like records of a
/// catalog), with arbitrary accuracies and partition restrictions.
pub fn random_candidates(
    rng: &mut impl Rng,
    max_layers: usize,
    max_records: usize,
) -> Vec<CandidateModel> {
    let layers = rng.gen_range(1..=max_layers);
    let records = rng.gen_range(1..=max_records);
    let classes = rng.gen_range(2usize..=100);
    let is_pool: Vec<bool> = (0..layers).map(|_| rng.gen_bool(0.3)).collect();
    (0..records)
        .map(|ordinal| {
            let allowed = if rng.gen_bool(0.7) {
                AllowedPartitions::All
            } else {
                let set: Vec<usize> =
                    (0..=layers).filter(|_| rng.gen_bool(0.3)).collect();
                AllowedPartitions::Only(set)
            };
            CandidateModel {
                id: format!("record{ordinal}"),
                ordinal,
                accuracy: rng.gen_range(0.0..1.0),
                classes,
                is_pool: is_pool.clone(),
                allowed,
                profile: random_profile(rng, &format!("record{ordinal}"), layers),
            }
        })
        .collect()
}

pub fn random_system(rng: &mut impl Rng) -> SystemConfig {
    let floor = if rng.gen_bool(0.5) {
        AccuracyFloor::Absolute(rng.gen_range(0.0..1.0))
    } else {
        AccuracyFloor::DropPoints(rng.gen_range(0.0..50.0))
    };
    let policy = match rng.gen_range(0..3) {
        0 => CandidatePolicy::AllLayers,
        1 => CandidatePolicy::PoolingOnly,
        _ => CandidatePolicy::EndpointsIncluded,
    };
    SystemConfig {
        gamma: rng.gen_range(0.2..20.0),
        rate_bytes_per_second: rng.gen_range(1e3..1e8),
        floor,
        policy,
        use_codec: rng.gen_bool(0.5),
        result_message_bytes: if rng.gen_bool(0.5) {
            None
        } else {
            Some(rng.gen_range(0..4096))
        },
    }
}
