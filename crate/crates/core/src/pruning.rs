//! Filter saliency scoring and structural channel pruning.
//!
//! The two-step workflow lives here:
//!
//! 1. [`run_step1`] prunes across *all* convolution layers at once to shrink
//!    compute, snapshotting after every prune/fine-tune round until accuracy
//!    falls below the floor.
//! 2. [`run_step2`] starts from the selected step-1 model and prunes *one
//!    layer at a time* (one independent family per convolution layer) to
//!    shrink that layer's output — the data that would cross the network if
//!    execution were split right after it.
//!
//! Saliency is the first-order criterion: a filter's score is the mean of
//! `|activation * activation-gradient|` over samples and spatial positions,
//! averaged over a fixed number of scoring batches and l2-normalized within
//! each layer so scores are comparable across layers of different size.

use rayon::prelude::*;

use crate::catalog::{Catalog, Lineage};
use crate::data::DataSplit;
use crate::engine;
use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::model::{LayerParams, ModelState};
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig};

/// One convolution filter: layer index into `spec.layers`, filter index into
/// that layer's output channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FilterId {
    pub layer: usize,
    pub filter: usize,
}

/// Which filters an operation ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PruneRange {
    /// Every convolution layer (step 1).
    Global,
    /// One convolution layer, by index into `spec.layers` (step 2).
    SingleLayer(usize),
}

/// Knobs of the iterative prune/fine-tune/evaluate loop.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneSchedule {
    /// Fraction of the *remaining* in-range filters removed per iteration
    /// (rounded, at least one filter).
    pub fraction_per_iteration: f64,
    /// Fine-tuning run after each removal. Its seed is re-derived per
    /// iteration so repeated runs are deterministic.
    pub finetune: TrainConfig,
    /// Absolute test accuracy below which the loop stops (the final,
    /// below-floor snapshot is kept and flagged).
    pub accuracy_floor: f64,
    /// No layer is pruned below this many filters.
    pub min_filters: usize,
    /// Number of leading train-set batches used for saliency scoring.
    pub scoring_batches: usize,
    /// Samples per scoring batch.
    pub scoring_batch_size: usize,
    /// Optional cap on pruning iterations (a compute budget); `None` runs
    /// until the accuracy or filter floor stops the loop.
    pub max_iterations: Option<usize>,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            fraction_per_iteration: 0.05,
            finetune: TrainConfig { epochs: 2, ..TrainConfig::default() },
            accuracy_floor: 0.0,
            min_filters: 4,
            scoring_batches: 4,
            scoring_batch_size: 32,
            max_iterations: None,
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction_per_iteration > 0.0 && self.fraction_per_iteration <= 1.0) {
            return Err(Error::invalid(format!(
                "per-iteration fraction must be in (0, 1], got {}",
                self.fraction_per_iteration
            )));
        }
        if !(0.0..=1.0).contains(&self.accuracy_floor) {
            return Err(Error::invalid(format!(
                "accuracy floor must be in [0, 1], got {}",
                self.accuracy_floor
            )));
        }
        if self.min_filters == 0 {
            return Err(Error::invalid("min filters per layer must be at least 1"));
        }
        if self.scoring_batches == 0 || self.scoring_batch_size == 0 {
            return Err(Error::invalid("scoring needs at least one non-empty batch"));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::invalid("iteration cap must allow at least one iteration"));
        }
        self.finetune.validate()
    }
}

fn range_layers(model: &ModelState, range: &PruneRange) -> Result<Vec<usize>> {
    match *range {
        PruneRange::Global => {
            let layers = model.spec.conv_layers();
            if layers.is_empty() {
                return Err(Error::invalid("model has no convolution layers to prune"));
            }
            Ok(layers)
        }
        PruneRange::SingleLayer(l) => {
            match model.spec.layers.get(l) {
                Some(k) if k.is_conv() => Ok(vec![l]),
                Some(k) => Err(Error::invalid(format!(
                    "layer {l} is {k:?}, not a convolution"
                ))),
                None => Err(Error::invalid(format!(
                    "layer index {l} out of range for {} layers",
                    model.spec.layer_count()
                ))),
            }
        }
    }
}

/// First-order saliency for every filter in `range`, as `(filter, score)`
/// pairs ordered by layer then filter index.
///
/// Uses the first `scoring_batches` chunks of the train split in natural
/// order (fewer if the dataset is smaller), so scores are deterministic.
pub fn taylor_scores(
    model: &ModelState,
    data: &crate::data::Dataset,
    range: &PruneRange,
    sched: &PruneSchedule,
) -> Result<Vec<(FilterId, f64)>> {
    let layers = range_layers(model, range)?;
    if data.is_empty() {
        return Err(Error::invalid("cannot score filters on an empty dataset"));
    }
    let mut sums: Vec<Vec<f64>> = layers
        .iter()
        .map(|&l| match model.spec.layers[l] {
            LayerKind::Conv { out_channels, .. } => vec![0.0f64; out_channels],
            _ => unreachable!("range_layers returns convolutions only"),
        })
        .collect();

    let indices: Vec<usize> = (0..data.len()).collect();
    let mut used_batches = 0usize;
    for chunk in indices.chunks(sched.scoring_batch_size).take(sched.scoring_batches) {
        let (x, labels) = data.gather(chunk)?;
        let tape = engine::forward_with_tape(model, &x)?;
        let (_, _, capture) = engine::backward_with_capture(model, tape, &labels)?;
        for (slot, &l) in layers.iter().enumerate() {
            let act = &capture.activations[l];
            let grad = &capture.gradients[l];
            let [b, c, h, w] = act.shape();
            let plane = h * w;
            let denom = (b * plane) as f64;
            for ci in 0..c {
                let mut acc = 0.0f64;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    let a = &act.data()[base..base + plane];
                    let g = &grad.data()[base..base + plane];
                    for (av, gv) in a.iter().zip(g) {
                        acc += f64::from((av * gv).abs());
                    }
                }
                sums[slot][ci] += acc / denom;
            }
        }
        used_batches += 1;
    }
    debug_assert!(used_batches > 0, "non-empty dataset yields at least one chunk");

    // Mean over batches, then l2 normalization within each layer.
    let mut out = Vec::new();
    for (slot, &l) in layers.iter().enumerate() {
        let mut scores: Vec<f64> = sums[slot].iter().map(|s| s / used_batches as f64).collect();
        let norm = scores.iter().map(|s| s * s).sum::<f64>().sqrt();
        if norm > 0.0 {
            for s in &mut scores {
                *s /= norm;
            }
        }
        for (ci, s) in scores.into_iter().enumerate() {
            out.push((FilterId { layer: l, filter: ci }, s));
        }
    }
    Ok(out)
}

/// Removes the given filters and returns the smaller, still-valid model.
///
/// For every pruned convolution the kernel rows and bias entries of the
/// victims are dropped, and the next parameter-bearing layer downstream loses
/// the matching input slices — kernel input channels for a convolution, or
/// the per-channel column blocks for a dense layer behind a flatten. Spatial
/// layers in between (pooling) preserve channel identity and need no change.
///
/// Victims must be valid, duplicate-free, and leave at least one filter in
/// every touched layer.
pub fn apply_prune(model: &ModelState, victims: &[FilterId]) -> Result<ModelState> {
    if victims.is_empty() {
        return Err(Error::invalid("no victims given"));
    }
    let spec = &model.spec;
    let mut victims_by_layer: Vec<Vec<usize>> = vec![Vec::new(); spec.layer_count()];
    for v in victims {
        match spec.layers.get(v.layer) {
            Some(LayerKind::Conv { out_channels, .. }) => {
                if v.filter >= *out_channels {
                    return Err(Error::invalid(format!(
                        "filter {} out of range for layer {} with {out_channels} filters",
                        v.filter, v.layer
                    )));
                }
                if victims_by_layer[v.layer].contains(&v.filter) {
                    return Err(Error::invalid(format!(
                        "duplicate victim (layer {}, filter {})",
                        v.layer, v.filter
                    )));
                }
                victims_by_layer[v.layer].push(v.filter);
            }
            Some(k) => {
                return Err(Error::invalid(format!(
                    "victim targets layer {} which is {k:?}, not a convolution",
                    v.layer
                )))
            }
            None => {
                return Err(Error::invalid(format!(
                    "victim layer index {} out of range",
                    v.layer
                )))
            }
        }
    }

    // Per-layer keep lists (indices into the old channel space).
    let mut keep: Vec<Option<Vec<usize>>> = vec![None; spec.layer_count()];
    for (l, vs) in victims_by_layer.iter().enumerate() {
        if vs.is_empty() {
            continue;
        }
        let out_channels = match spec.layers[l] {
            LayerKind::Conv { out_channels, .. } => out_channels,
            _ => unreachable!(),
        };
        let kept: Vec<usize> = (0..out_channels).filter(|c| !vs.contains(c)).collect();
        if kept.is_empty() {
            return Err(Error::invalid(format!(
                "pruning all {out_channels} filters of layer {l} would leave it empty"
            )));
        }
        keep[l] = Some(kept);
    }

    let old_shapes = spec.output_shapes()?;
    let mut new_layers = spec.layers.clone();
    let mut new_params = Vec::with_capacity(spec.layer_count());
    // Channel-selection state flowing downstream: which indices of the
    // current activation survive. `None` means "all of them".
    let mut incoming: Option<Vec<usize>> = None;

    for (l, layer) in spec.layers.iter().enumerate() {
        match (layer, &model.params[l]) {
            (LayerKind::Conv { .. }, LayerParams::Conv { weights, bias }) => {
                let [out_c, in_c, k, _] = weights.shape();
                let in_keep: Vec<usize> =
                    incoming.take().unwrap_or_else(|| (0..in_c).collect());
                let out_keep: Vec<usize> =
                    keep[l].clone().unwrap_or_else(|| (0..out_c).collect());
                let mut data = Vec::with_capacity(out_keep.len() * in_keep.len() * k * k);
                for &o in &out_keep {
                    for &i in &in_keep {
                        let base = (o * in_c + i) * k * k;
                        data.extend_from_slice(&weights.data()[base..base + k * k]);
                    }
                }
                let new_weights =
                    Tensor::from_vec([out_keep.len(), in_keep.len(), k, k], data)?;
                let new_bias: Vec<f32> = out_keep.iter().map(|&o| bias[o]).collect();
                if let LayerKind::Conv { out_channels, .. } = &mut new_layers[l] {
                    *out_channels = out_keep.len();
                }
                new_params.push(LayerParams::Conv { weights: new_weights, bias: new_bias });
                incoming = keep[l].clone();
            }
            (LayerKind::MaxPool { .. }, _) => {
                new_params.push(LayerParams::None);
                // channel identity preserved; selection flows through
            }
            (LayerKind::Flatten, _) => {
                new_params.push(LayerParams::None);
                if let Some(channels) = incoming.take() {
                    // Expand channel selection into flattened feature indices.
                    let (_, h, w) = if l == 0 { spec.input } else { old_shapes[l - 1] };
                    let block = h * w;
                    let mut features = Vec::with_capacity(channels.len() * block);
                    for &c in &channels {
                        features.extend(c * block..(c + 1) * block);
                    }
                    incoming = Some(features);
                }
            }
            (
                LayerKind::FullyConnected { .. },
                LayerParams::Dense { weights, in_features, out_features, bias },
            ) => {
                let in_keep: Vec<usize> =
                    incoming.take().unwrap_or_else(|| (0..*in_features).collect());
                let mut data = Vec::with_capacity(out_features * in_keep.len());
                for o in 0..*out_features {
                    let row = &weights[o * in_features..(o + 1) * in_features];
                    data.extend(in_keep.iter().map(|&i| row[i]));
                }
                new_params.push(LayerParams::Dense {
                    weights: data,
                    in_features: in_keep.len(),
                    out_features: *out_features,
                    bias: bias.clone(),
                });
            }
            (k, p) => {
                return Err(Error::invalid(format!(
                    "layer {l} kind {k:?} does not match its params {p:?}"
                )))
            }
        }
    }

    let new_spec = crate::model::ModelSpec {
        input: spec.input,
        classes: spec.classes,
        layers: new_layers,
    };
    new_spec.validate()?;
    Ok(ModelState { spec: new_spec, params: new_params })
}

/// One prune/fine-tune/evaluate round's outcome.
#[derive(Clone, Debug)]
pub struct PruneSnapshot {
    pub model: ModelState,
    /// 0 is the untouched starting model.
    pub iteration: usize,
    /// Test accuracy after this iteration's fine-tuning.
    pub accuracy: f64,
    /// Filters removed in this iteration.
    pub removed: usize,
    /// Fraction of the starting in-range filters removed so far.
    pub cumulative_fraction: f64,
    /// True when `accuracy` fell below the schedule floor; such a snapshot is
    /// always the last one.
    pub below_floor: bool,
}

/// Iteratively prunes `start` within `range`: rank by saliency, remove the
/// lowest `fraction_per_iteration` of the remaining in-range filters
/// (respecting the per-layer minimum), fine-tune, evaluate, snapshot. Stops
/// when accuracy drops below the floor (that snapshot is kept and flagged) or
/// when the filter floor leaves nothing to remove.
pub fn prune_iteratively(
    start: &ModelState,
    data: &DataSplit,
    range: &PruneRange,
    sched: &PruneSchedule,
) -> Result<Vec<PruneSnapshot>> {
    sched.validate()?;
    let layers = range_layers(start, range)?;
    let initial_total: usize = layers
        .iter()
        .map(|&l| match start.spec.layers[l] {
            LayerKind::Conv { out_channels, .. } => out_channels,
            _ => unreachable!(),
        })
        .sum();

    let mut current = start.clone();
    let mut accuracy = train::evaluate(&current, &data.test)?;
    let mut snapshots = vec![PruneSnapshot {
        model: current.clone(),
        iteration: 0,
        accuracy,
        removed: 0,
        cumulative_fraction: 0.0,
        below_floor: accuracy < sched.accuracy_floor,
    }];

    let mut removed_total = 0usize;
    let mut iteration = 0usize;
    while !snapshots.last().expect("non-empty").below_floor {
        if sched.max_iterations.is_some_and(|cap| iteration >= cap) {
            break;
        }
        iteration += 1;
        let scores = taylor_scores(&current, &data.train, range, sched)?;
        let victims = select_victims(&current, &scores, sched);
        if victims.is_empty() {
            break; // every in-range layer is at the filter floor
        }
        let mut pruned = apply_prune(&current, &victims)?;
        let finetune = sched
            .finetune
            .reseeded(derive_seed(sched.finetune.seed, 0, iteration));
        train::train(&mut pruned, &data.train, &finetune)?;
        accuracy = train::evaluate(&pruned, &data.test)?;
        removed_total += victims.len();
        snapshots.push(PruneSnapshot {
            model: pruned.clone(),
            iteration,
            accuracy,
            removed: victims.len(),
            cumulative_fraction: removed_total as f64 / initial_total as f64,
            below_floor: accuracy < sched.accuracy_floor,
        });
        current = pruned;
    }
    Ok(snapshots)
}

/// Lowest-scored filters, up to `fraction_per_iteration` of the remaining
/// in-range total, skipping filters whose layer is already at the floor.
fn select_victims(
    model: &ModelState,
    scores: &[(FilterId, f64)],
    sched: &PruneSchedule,
) -> Vec<FilterId> {
    let remaining = scores.len();
    let target = ((sched.fraction_per_iteration * remaining as f64).round() as usize).max(1);
    let mut ranked: Vec<&(FilterId, f64)> = scores.iter().collect();
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite scores").then(a.0.cmp(&b.0)));

    let mut headroom: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for (id, _) in scores {
        headroom.entry(id.layer).or_insert_with(|| match model.spec.layers[id.layer] {
            LayerKind::Conv { out_channels, .. } => {
                out_channels.saturating_sub(sched.min_filters)
            }
            _ => unreachable!(),
        });
    }

    let mut victims = Vec::with_capacity(target);
    for (id, _) in ranked {
        if victims.len() == target {
            break;
        }
        let room = headroom.get_mut(&id.layer).expect("seen layer");
        if *room > 0 {
            *room -= 1;
            victims.push(*id);
        }
    }
    victims
}

/// Deterministic per-(family, iteration) seed derivation.
fn derive_seed(base: u64, family: usize, iteration: usize) -> u64 {
    base ^ (family as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iteration as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Step 1: global-range iterative pruning from the catalog's original model.
/// Every snapshot is inserted as a record; the last one still above the floor
/// becomes the selected step-1 model. Errors if the original is already below
/// the floor or step 1 was already run.
pub fn run_step1(catalog: &mut Catalog, data: &DataSplit, sched: &PruneSchedule) -> Result<String> {
    if catalog.records().iter().any(|r| matches!(r.lineage, Lineage::Step1 { .. })) {
        return Err(Error::invalid("catalog already contains step-1 records"));
    }
    let start = catalog.original_model().clone();
    let snapshots = prune_iteratively(&start, data, &PruneRange::Global, sched)?;
    if snapshots[0].below_floor {
        return Err(Error::invalid(format!(
            "starting accuracy {:.4} is already below the floor {:.4}",
            snapshots[0].accuracy, sched.accuracy_floor
        )));
    }
    let mut selected = None;
    for snap in &snapshots {
        let id = format!("step1-i{}", snap.iteration);
        if !snap.below_floor {
            selected = Some(id.clone());
        }
        catalog.insert(
            id,
            Lineage::Step1 { iteration: snap.iteration },
            snap.model.clone(),
            snap.accuracy,
            snap.below_floor,
        )?;
    }
    let selected = selected.expect("snapshot 0 is above the floor");
    catalog.select_step1(&selected)?;
    Ok(selected)
}

/// Step 2: from the selected step-1 model, one independent pruning family per
/// convolution layer (families run concurrently; insertion order is by layer,
/// so record ordinals are deterministic).
pub fn run_step2(catalog: &mut Catalog, data: &DataSplit, sched: &PruneSchedule) -> Result<()> {
    if catalog.records().iter().any(|r| matches!(r.lineage, Lineage::Step2 { .. })) {
        return Err(Error::invalid("catalog already contains step-2 records"));
    }
    let base = catalog.step1_model()?.clone();
    let names = base.spec.layer_names();
    let conv_layers = base.spec.conv_layers();

    let families: Vec<(usize, Result<Vec<PruneSnapshot>>)> = conv_layers
        .par_iter()
        .map(|&layer| {
            let mut family_sched = sched.clone();
            family_sched.finetune.seed = derive_seed(sched.finetune.seed, layer + 1, 0);
            let snaps =
                prune_iteratively(&base, data, &PruneRange::SingleLayer(layer), &family_sched);
            (layer, snaps)
        })
        .collect();

    for (layer, snaps) in families {
        let snaps = snaps?;
        for snap in snaps {
            catalog.insert(
                format!("step2-{}-i{}", names[layer], snap.iteration),
                Lineage::Step2 { layer, iteration: snap.iteration },
                snap.model,
                snap.accuracy,
                snap.below_floor,
            )?;
        }
    }
    Ok(())
}
