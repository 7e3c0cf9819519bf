//! Model constructors and dataset sources.
//!
//! The VGG-style builder assembles stages of 3x3 same-padding convolutions
//! followed by 2x2 max pooling, then a small dense head. Data comes either
//! from the CIFAR-10 binary files (path supplied by the caller; never
//! downloaded) or from a seeded synthetic grating task that trains in seconds
//! and is fully reproducible.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::model::ModelSpec;
use crate::tensor::Tensor;

/// Parameters of the VGG-style family: per-stage widths and depths plus the
/// hidden sizes of the dense head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VggConfig {
    /// Single-sample input shape `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub classes: usize,
    /// Filter count of every convolution in stage `i`.
    pub stage_widths: Vec<usize>,
    /// Number of back-to-back convolutions in stage `i`.
    pub convs_per_stage: Vec<usize>,
    /// Hidden dense layers between flatten and the classifier.
    pub fc_hidden: Vec<usize>,
}

/// Builds the layer list for `cfg`: per stage, `convs_per_stage[i]`
/// convolutions (3x3, stride 1, padding 1, fused ReLU) at width
/// `stage_widths[i]`, then a 2x2/stride-2 max pool; afterwards flatten, the
/// hidden dense layers (ReLU), and the classifier.
pub fn vgg(cfg: &VggConfig) -> Result<ModelSpec> {
    if cfg.stage_widths.len() != cfg.convs_per_stage.len() {
        return Err(Error::invalid(format!(
            "{} stage widths but {} stage depths",
            cfg.stage_widths.len(),
            cfg.convs_per_stage.len()
        )));
    }
    if cfg.stage_widths.is_empty() {
        return Err(Error::invalid("need at least one stage"));
    }
    if cfg.convs_per_stage.iter().any(|&n| n == 0) {
        return Err(Error::invalid("every stage needs at least one convolution"));
    }
    let mut layers = Vec::new();
    for (&width, &convs) in cfg.stage_widths.iter().zip(&cfg.convs_per_stage) {
        for _ in 0..convs {
            layers.push(LayerKind::Conv {
                out_channels: width,
                kernel: 3,
                stride: 1,
                padding: 1,
                relu: true,
            });
        }
        layers.push(LayerKind::MaxPool { window: 2, stride: 2 });
    }
    layers.push(LayerKind::Flatten);
    for &hidden in &cfg.fc_hidden {
        layers.push(LayerKind::FullyConnected { out_features: hidden, relu: true });
    }
    layers.push(LayerKind::FullyConnected { out_features: cfg.classes, relu: false });
    let spec = ModelSpec {
        input: cfg.input,
        classes: cfg.classes,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Desk-scale reference model: 3 stages of widths 16/32/64 with depths
/// 2/2/1 on 3x32x32 input, one hidden dense layer of 64 (11 layers total).
pub fn vgg_mini(classes: usize) -> Result<ModelSpec> {
    vgg(&VggConfig {
        input: (3, 32, 32),
        classes,
        stage_widths: vec![16, 32, 64],
        convs_per_stage: vec![2, 2, 1],
        fc_hidden: vec![64],
    })
}

/// Full-depth configuration (13 convolutions in 5 stages, as in the classic
/// 16-layer VGG). Useful for analytic profiling and planning demos; training
/// it is outside the desk-scale budget.
pub fn vgg16(input: (usize, usize, usize), classes: usize) -> Result<ModelSpec> {
    vgg(&VggConfig {
        input,
        classes,
        stage_widths: vec![64, 128, 256, 512, 512],
        convs_per_stage: vec![2, 2, 3, 3, 3],
        fc_hidden: vec![512, 256],
    })
}

// --- synthetic grating task --------------------------------------------------

/// Configuration of the synthetic dataset: each class is a fixed oriented
/// sinusoidal grating plus seeded Gaussian pixel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the additive Gaussian noise (0 = pure templates).
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            train_per_class: 100,
            test_per_class: 60,
            channels: 3,
            height: 32,
            width: 32,
            noise: 0.35,
            seed: 7,
        }
    }
}

/// Noise-free template for `class`: an oriented grating whose angle and
/// frequency are functions of the class index, shifted per channel.
pub fn grating_template(cfg: &SyntheticConfig, class: usize) -> Tensor {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let theta = PI * class as f64 / cfg.classes as f64;
    let freq = 2.0 + (class % 3) as f64;
    let (dy, dx) = (theta.cos(), theta.sin());
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let phase = ch as f64 * PI / 5.0;
        for y in 0..h {
            for x in 0..w {
                let t = (y as f64 * dy + x as f64 * dx) / h as f64;
                let v = 0.5 + 0.5 * (2.0 * PI * freq * t + phase).sin();
                data.push(v as f32);
            }
        }
    }
    Tensor::from_vec([1, c, h, w], data).expect("template shape is consistent")
}

/// Generates the synthetic split. Deterministic in `cfg.seed`; train and test
/// use disjoint draws from the same stream.
pub fn synthetic(cfg: &SyntheticConfig) -> Result<DataSplit> {
    if cfg.classes < 2 {
        return Err(Error::invalid("synthetic task needs at least 2 classes"));
    }
    if cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(Error::invalid("synthetic task needs samples in both splits"));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0) {
        return Err(Error::invalid(format!("noise must be >= 0, got {}", cfg.noise)));
    }
    let templates: Vec<Tensor> = (0..cfg.classes).map(|c| grating_template(cfg, c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = synth_split(cfg, &templates, cfg.train_per_class, &mut rng)?;
    let test = synth_split(cfg, &templates, cfg.test_per_class, &mut rng)?;
    Ok(DataSplit { train, test })
}

fn synth_split(
    cfg: &SyntheticConfig,
    templates: &[Tensor],
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let per = cfg.channels * cfg.height * cfg.width;
    let n = cfg.classes * per_class;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for class in 0..cfg.classes {
        let template = templates[class].data();
        for _ in 0..per_class {
            for &t in template {
                let z: f64 = rng.sample(StandardNormal);
                data.push(t + (cfg.noise * z) as f32);
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Tensor::from_vec([n, cfg.channels, cfg.height, cfg.width], data)?,
        labels,
        cfg.classes,
    )
}

// --- CIFAR-10 loader ----------------------------------------------------------

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_PER_FILE: usize = 10_000;

/// Loads the CIFAR-10 binary batches from `dir` (`data_batch_1..5.bin` plus
/// `test_batch.bin`). Pixels are scaled to `[0, 1]`. The files are never
/// fetched: a missing directory produces an error telling the caller what to
/// place there.
pub fn load_cifar10(dir: &Path) -> Result<DataSplit> {
    let train_files: Vec<_> = (1..=5)
        .map(|i| dir.join(format!("data_batch_{i}.bin")))
        .collect();
    let test_file = dir.join("test_batch.bin");
    for path in train_files.iter().chain(std::iter::once(&test_file)) {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "CIFAR-10 file {} not found; download the binary version \
                 (cifar-10-binary.tar.gz) and extract data_batch_1..5.bin and \
                 test_batch.bin into {}",
                path.display(),
                dir.display()
            )));
        }
    }
    let mut train_images = Vec::new();
    let mut train_labels = Vec::new();
    for path in &train_files {
        read_cifar_file(path, &mut train_images, &mut train_labels)?;
    }
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    read_cifar_file(&test_file, &mut test_images, &mut test_labels)?;
    Ok(DataSplit {
        train: Dataset::new(
            Tensor::from_vec([train_labels.len(), 3, 32, 32], train_images)?,
            train_labels,
            10,
        )?,
        test: Dataset::new(
            Tensor::from_vec([test_labels.len(), 3, 32, 32], test_images)?,
            test_labels,
            10,
        )?,
    })
}

fn read_cifar_file(path: &Path, images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != CIFAR_RECORD * CIFAR_PER_FILE {
        return Err(Error::Format {
            what: "CIFAR-10 batch",
            detail: format!(
                "{} is {} bytes, expected {}",
                path.display(),
                bytes.len(),
                CIFAR_RECORD * CIFAR_PER_FILE
            ),
        });
    }
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label > 9 {
            return Err(Error::Format {
                what: "CIFAR-10 batch",
                detail: format!("label byte {label} out of range in {}", path.display()),
            });
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg_mini_matches_reference_layout() {
        let spec = vgg_mini(10).unwrap();
        assert_eq!(spec.layer_count(), 11);
        assert_eq!(spec.filter_counts(), vec![16, 16, 32, 32, 64]);
        let shapes = spec.output_shapes().unwrap();
        assert_eq!(shapes[1], (16, 32, 32)); // conv2 keeps the plane
        assert_eq!(shapes[2], (16, 16, 16)); // pool1 halves it
        assert_eq!(shapes[7], (64, 4, 4)); // pool3
        assert_eq!(*shapes.last().unwrap(), (10, 1, 1));
    }

    #[test]
    fn vgg16_has_eighteen_partitionable_feature_layers() {
        let spec = vgg16((3, 224, 224), 1000).unwrap();
        let feature_layers = spec
            .layers
            .iter()
            .filter(|l| l.is_conv() || l.is_pool())
            .count();
        assert_eq!(feature_layers, 18); // 13 convolutions + 5 pools
    }

    #[test]
    fn vgg_rejects_inconsistent_stages() {
        let cfg = VggConfig {
            input: (3, 32, 32),
            classes: 10,
            stage_widths: vec![16, 32],
            convs_per_stage: vec![2],
            fc_hidden: vec![],
        };
        assert!(vgg(&cfg).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_labeled() {
        let cfg = SyntheticConfig {
            classes: 4,
            train_per_class: 3,
            test_per_class: 2,
            ..SyntheticConfig::default()
        };
        let a = synthetic(&cfg).unwrap();
        let b = synthetic(&cfg).unwrap();
        assert_eq!(a.train.len(), 12);
        assert_eq!(a.test.len(), 8);
        let (xa, la) = a.train.gather(&[0, 5, 11]).unwrap();
        let (xb, lb) = b.train.gather(&[0, 5, 11]).unwrap();
        assert_eq!(xa, xb);
        assert_eq!(la, lb);
    }

    #[test]
    fn noise_free_classes_are_nearest_template_separable() {
        let cfg = SyntheticConfig {
            classes: 5,
            train_per_class: 2,
            test_per_class: 2,
            noise: 0.0,
            ..SyntheticConfig::default()
        };
        let split = synthetic(&cfg).unwrap();
        let templates: Vec<Tensor> = (0..5).map(|c| grating_template(&cfg, c)).collect();
        for i in 0..split.test.len() {
            let x = split.test.sample(i).unwrap();
            let nearest = templates
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f32 = a.data().iter().zip(x.data()).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f32 = b.data().iter().zip(x.data()).map(|(p, q)| (p - q).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(c, _)| c)
                .unwrap();
            assert_eq!(nearest, split.test.labels()[i]);
        }
    }

    #[test]
    fn cifar_loader_reports_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        match load_cifar10(dir.path()) {
            Err(Error::MissingPrerequisite(msg)) => {
                assert!(msg.contains("data_batch_1.bin"), "unhelpful message: {msg}");
            }
            other => panic!("expected missing-prerequisite error, got {other:?}"),
        }
    }

    #[test]
    fn cifar_loader_rejects_short_files() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), [0u8; 10]).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), [0u8; 10]).unwrap();
        assert!(matches!(
            load_cifar10(dir.path()),
            Err(Error::Format { .. })
        ));
    }
}
