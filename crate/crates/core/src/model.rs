//! Model architecture ([`ModelSpec`]) and parameter state ([`ModelState`]).
//!
//! A spec is a validated sequential layer list plus the single-sample input
//! shape and class count. State adds one parameter block per layer and can be
//! saved to / loaded from a versioned little-endian binary file (layout
//! documented in `docs/formats.md`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::tensor::Tensor;

const MODEL_MAGIC: &[u8; 8] = b"PPMODEL\0";
const MODEL_VERSION: u32 = 1;

/// Architecture description: input shape, class count, and layer list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    /// Single-sample input shape `(channels, height, width)`.
    pub input: (usize, usize, usize),
    /// Number of classes; the final layer must emit exactly this many logits.
    pub classes: usize,
    pub layers: Vec<LayerKind>,
}

impl ModelSpec {
    /// Number of layers `M`. Partition points run `0..=M`.
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Output shape of every layer, in order (`shapes()[i]` leaves layer `i`).
    pub fn output_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.output_shape(cur).map_err(|e| {
                Error::invalid(format!("layer {i} ({layer:?}): {e}"))
            })?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Checks that shapes chain, the network is non-empty, and the last layer
    /// is a fully-connected layer emitting `classes` logits.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        let shapes = self.output_shapes()?;
        match self.layers.last() {
            Some(LayerKind::FullyConnected { relu: false, .. }) => {}
            Some(LayerKind::FullyConnected { relu: true, .. }) => {
                return Err(Error::invalid("final layer must emit raw logits, not ReLU"));
            }
            _ => return Err(Error::invalid("final layer must be fully-connected")),
        }
        let last = shapes[shapes.len() - 1];
        if last != (self.classes, 1, 1) {
            return Err(Error::invalid(format!(
                "final layer emits {last:?}, expected ({}, 1, 1)",
                self.classes
            )));
        }
        Ok(())
    }

    /// Indices of convolution layers, in network order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_conv())
            .map(|(i, _)| i)
            .collect()
    }

    /// Current filter count of each convolution layer, aligned with
    /// [`ModelSpec::conv_layers`].
    pub fn filter_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerKind::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect()
    }

    /// Short human-readable name per layer (`conv1`, `pool1`, `flatten`, `fc1`).
    pub fn layer_names(&self) -> Vec<String> {
        let (mut conv, mut pool, mut fc) = (0usize, 0usize, 0usize);
        self.layers
            .iter()
            .map(|l| match l {
                LayerKind::Conv { .. } => {
                    conv += 1;
                    format!("conv{conv}")
                }
                LayerKind::MaxPool { .. } => {
                    pool += 1;
                    format!("pool{pool}")
                }
                LayerKind::Flatten => "flatten".to_string(),
                LayerKind::FullyConnected { .. } => {
                    fc += 1;
                    format!("fc{fc}")
                }
            })
            .collect()
    }

    /// Input shape seen by layer `i`.
    pub fn input_shape_of(&self, i: usize) -> Result<(usize, usize, usize)> {
        if i >= self.layers.len() {
            return Err(Error::invalid(format!(
                "layer index {i} out of range for {} layers",
                self.layers.len()
            )));
        }
        if i == 0 {
            Ok(self.input)
        } else {
            Ok(self.output_shapes()?[i - 1])
        }
    }
}

/// Parameters of one layer. Layers without parameters use [`LayerParams::None`].
/// The same container carries gradients, velocity, and weights — they share
/// shapes by construction.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    /// Kernel tensor `(out_channels, in_channels, kernel, kernel)` plus bias.
    Conv { weights: Tensor, bias: Vec<f32> },
    /// Row-major `(out_features, in_features)` weight matrix plus bias.
    Dense {
        weights: Vec<f32>,
        in_features: usize,
        out_features: usize,
        bias: Vec<f32>,
    },
}

impl LayerParams {
    pub fn count(&self) -> usize {
        match self {
            LayerParams::None => 0,
            LayerParams::Conv { weights, bias } => weights.len() + bias.len(),
            LayerParams::Dense { weights, bias, .. } => weights.len() + bias.len(),
        }
    }

    /// Flat view: weights first, then bias.
    pub fn flat(&self) -> Vec<f32> {
        match self {
            LayerParams::None => Vec::new(),
            LayerParams::Conv { weights, bias } => {
                let mut v = weights.data().to_vec();
                v.extend_from_slice(bias);
                v
            }
            LayerParams::Dense { weights, bias, .. } => {
                let mut v = weights.clone();
                v.extend_from_slice(bias);
                v
            }
        }
    }

    fn get(&self, i: usize) -> f32 {
        match self {
            LayerParams::None => unreachable!("indexed into empty layer params"),
            LayerParams::Conv { weights, bias } => {
                if i < weights.len() {
                    weights.data()[i]
                } else {
                    bias[i - weights.len()]
                }
            }
            LayerParams::Dense { weights, bias, .. } => {
                if i < weights.len() {
                    weights[i]
                } else {
                    bias[i - weights.len()]
                }
            }
        }
    }

    fn get_mut(&mut self, i: usize) -> &mut f32 {
        match self {
            LayerParams::None => unreachable!("indexed into empty layer params"),
            LayerParams::Conv { weights, bias } => {
                let nw = weights.len();
                if i < nw {
                    &mut weights.data_mut()[i]
                } else {
                    &mut bias[i - nw]
                }
            }
            LayerParams::Dense { weights, bias, .. } => {
                let nw = weights.len();
                if i < nw {
                    &mut weights[i]
                } else {
                    &mut bias[i - nw]
                }
            }
        }
    }
}

/// A spec plus its trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Vec<LayerParams>,
}

impl ModelState {
    /// Seeded uniform init: weights drawn from `±sqrt(6 / fan_in)` per layer,
    /// biases zero. The same seed always yields the same parameters.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut cur = spec.input;
        for layer in &spec.layers {
            let next = layer.output_shape(cur)?;
            params.push(match *layer {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = cur.0 * kernel * kernel;
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    let n = out_channels * cur.0 * kernel * kernel;
                    let data = (0..n)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect::<Vec<f32>>();
                    LayerParams::Conv {
                        weights: Tensor::from_vec([out_channels, cur.0, kernel, kernel], data)?,
                        bias: vec![0.0; out_channels],
                    }
                }
                LayerKind::FullyConnected { out_features, .. } => {
                    let in_features = cur.0;
                    let bound = (6.0 / in_features as f64).sqrt() as f32;
                    let weights = (0..out_features * in_features)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect();
                    LayerParams::Dense {
                        weights,
                        in_features,
                        out_features,
                        bias: vec![0.0; out_features],
                    }
                }
                LayerKind::MaxPool { .. } | LayerKind::Flatten => LayerParams::None,
            });
            cur = next;
        }
        Ok(ModelState { spec, params })
    }

    /// All-zero parameters; useful as a reference point (the cross-entropy of
    /// a zero network is exactly `ln(classes)`).
    pub fn zeroed(spec: ModelSpec) -> Result<Self> {
        let mut state = ModelState::init(spec, 0)?;
        for p in &mut state.params {
            match p {
                LayerParams::None => {}
                LayerParams::Conv { weights, bias } => {
                    weights.data_mut().fill(0.0);
                    bias.fill(0.0);
                }
                LayerParams::Dense { weights, bias, .. } => {
                    weights.fill(0.0);
                    bias.fill(0.0);
                }
            }
        }
        Ok(state)
    }

    /// Gradient/velocity container with the same shapes, all zero.
    pub fn zeros_like(&self) -> Vec<LayerParams> {
        self.params
            .iter()
            .map(|p| match p {
                LayerParams::None => LayerParams::None,
                LayerParams::Conv { weights, bias } => LayerParams::Conv {
                    weights: Tensor::zeros(weights.shape()),
                    bias: vec![0.0; bias.len()],
                },
                LayerParams::Dense {
                    weights,
                    in_features,
                    out_features,
                    bias,
                } => LayerParams::Dense {
                    weights: vec![0.0; weights.len()],
                    in_features: *in_features,
                    out_features: *out_features,
                    bias: vec![0.0; bias.len()],
                },
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.count()).sum()
    }

    /// Reads parameter `i` in the flat layer-order enumeration
    /// (per layer: weights row-major, then bias).
    pub fn param(&self, i: usize) -> f32 {
        let (layer, within) = self.locate(i);
        self.params[layer].get(within)
    }

    /// Mutable access to parameter `i`; see [`ModelState::param`] for ordering.
    pub fn param_mut(&mut self, i: usize) -> &mut f32 {
        let (layer, within) = self.locate(i);
        self.params[layer].get_mut(within)
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (l, p) in self.params.iter().enumerate() {
            let n = p.count();
            if i < n {
                return (l, i);
            }
            i -= n;
        }
        panic!("parameter index out of range");
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        ModelState::read_from(&mut BufReader::new(file))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        for dim in [self.spec.input.0, self.spec.input.1, self.spec.input.2] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        w.write_all(&(self.spec.classes as u32).to_le_bytes())?;
        w.write_all(&(self.spec.layers.len() as u32).to_le_bytes())?;
        for layer in &self.spec.layers {
            match *layer {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    relu,
                } => {
                    w.write_all(&[0u8, relu as u8])?;
                    for v in [out_channels, kernel, stride, padding] {
                        w.write_all(&(v as u32).to_le_bytes())?;
                    }
                }
                LayerKind::MaxPool { window, stride } => {
                    w.write_all(&[1u8, 0])?;
                    for v in [window, stride] {
                        w.write_all(&(v as u32).to_le_bytes())?;
                    }
                }
                LayerKind::Flatten => w.write_all(&[2u8, 0])?,
                LayerKind::FullyConnected { out_features, relu } => {
                    w.write_all(&[3u8, relu as u8])?;
                    w.write_all(&(out_features as u32).to_le_bytes())?;
                }
            }
        }
        for p in &self.params {
            let flat = p.flat();
            for v in flat {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |detail: String| Error::Format { what: "model file", detail };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| bad("file too short for header".into()))?;
        if &magic != MODEL_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(bad(format!(
                "unsupported version {version} (expected {MODEL_VERSION})"
            )));
        }
        let input = (
            read_u32(r)? as usize,
            read_u32(r)? as usize,
            read_u32(r)? as usize,
        );
        let classes = read_u32(r)? as usize;
        let layer_count = read_u32(r)? as usize;
        if layer_count > 10_000 {
            return Err(bad(format!("implausible layer count {layer_count}")));
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let mut tag = [0u8; 2];
            r.read_exact(&mut tag)
                .map_err(|_| bad("truncated layer table".into()))?;
            layers.push(match tag[0] {
                0 => LayerKind::Conv {
                    out_channels: read_u32(r)? as usize,
                    kernel: read_u32(r)? as usize,
                    stride: read_u32(r)? as usize,
                    padding: read_u32(r)? as usize,
                    relu: tag[1] != 0,
                },
                1 => LayerKind::MaxPool {
                    window: read_u32(r)? as usize,
                    stride: read_u32(r)? as usize,
                },
                2 => LayerKind::Flatten,
                3 => LayerKind::FullyConnected {
                    out_features: read_u32(r)? as usize,
                    relu: tag[1] != 0,
                },
                t => return Err(bad(format!("unknown layer tag {t}"))),
            });
        }
        let spec = ModelSpec { input, classes, layers };
        spec.validate()
            .map_err(|e| bad(format!("stored spec invalid: {e}")))?;

        let mut params = Vec::with_capacity(spec.layers.len());
        let mut cur = spec.input;
        for layer in &spec.layers {
            let next = layer.output_shape(cur)?;
            params.push(match *layer {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let n = out_channels * cur.0 * kernel * kernel;
                    let weights = Tensor::from_vec(
                        [out_channels, cur.0, kernel, kernel],
                        read_f32s(r, n)?,
                    )?;
                    LayerParams::Conv {
                        weights,
                        bias: read_f32s(r, out_channels)?,
                    }
                }
                LayerKind::FullyConnected { out_features, .. } => LayerParams::Dense {
                    weights: read_f32s(r, out_features * cur.0)?,
                    in_features: cur.0,
                    out_features,
                    bias: read_f32s(r, out_features)?,
                },
                LayerKind::MaxPool { .. } | LayerKind::Flatten => LayerParams::None,
            });
            cur = next;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after parameters".into()));
        }
        Ok(ModelState { spec, params })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Format {
        what: "model file",
        detail: "truncated while reading u32".into(),
    })?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| Error::Format {
        what: "model file",
        detail: format!("truncated while reading {n} parameters"),
    })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
