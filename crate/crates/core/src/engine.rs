//! Forward/backward execution for sequential CNN models.
//!
//! Convolutions are lowered to dense matrix products (im2col + GEMM, with the
//! inner product delegated to `matrixmultiply`); pooling and the loss head are
//! direct loops. The backward pass produces parameter gradients and, on
//! request, a per-layer capture of activations and activation gradients — the
//! raw material for filter saliency scoring.
//!
//! Everything is deterministic: same model, same input, same result, and the
//! GEMM backend runs single-threaded.

use matrixmultiply::sgemm;

use crate::error::{Error, Result};
use crate::layer::LayerKind;
use crate::model::{LayerParams, ModelState};
use crate::tensor::Tensor;

/// Intermediate state recorded by [`forward_with_tape`] for one batch.
pub struct Tape {
    pub input: Tensor,
    /// Post-activation output of every layer, in order.
    pub activations: Vec<Tensor>,
    /// im2col buffers for convolution layers (`None` elsewhere).
    cols: Vec<Option<Vec<f32>>>,
    /// Per-output argmax (flat `h*W + w` plane index) for pooling layers.
    argmax: Vec<Option<Vec<u32>>>,
}

impl Tape {
    /// Logits emitted by the final layer.
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("tape from a validated model")
    }
}

/// Per-layer activations and activation gradients from one backward pass.
///
/// `gradients[i]` is `dL/d(output of layer i)` taken at the layer's *output*
/// (after any fused ReLU), matching `activations[i]` element for element. A
/// channel nothing downstream reads gets an exactly-zero gradient.
pub struct GradCapture {
    pub activations: Vec<Tensor>,
    pub gradients: Vec<Tensor>,
    /// Batch size the capture was computed from.
    pub batch: usize,
}

/// Runs layers `from..to` (0-based, `to` exclusive) on `input`, which must be
/// the activation that *enters* layer `from`. `forward_slice(m, x, 0, M)` is
/// the full network; splitting at any `p` and chaining the two halves yields
/// bit-identical logits because layer boundaries are post-activation.
pub fn forward_slice(
    model: &ModelState,
    input: &Tensor,
    from: usize,
    to: usize,
) -> Result<Tensor> {
    let m = model.spec.layer_count();
    if from > to || to > m {
        return Err(Error::invalid(format!(
            "layer range {from}..{to} out of bounds for {m} layers"
        )));
    }
    check_boundary_shape(model, input, from)?;
    let mut cur = input.clone();
    for i in from..to {
        cur = run_layer(model, i, &cur, None, None)?;
    }
    Ok(cur)
}

/// Full forward pass; returns the logits tensor `(B, classes, 1, 1)`.
pub fn forward(model: &ModelState, input: &Tensor) -> Result<Tensor> {
    forward_slice(model, input, 0, model.spec.layer_count())
}

/// Full forward pass that records every intermediate needed by [`backward`].
pub fn forward_with_tape(model: &ModelState, input: &Tensor) -> Result<Tape> {
    check_boundary_shape(model, input, 0)?;
    let m = model.spec.layer_count();
    let mut tape = Tape {
        input: input.clone(),
        activations: Vec::with_capacity(m),
        cols: (0..m).map(|_| None).collect(),
        argmax: (0..m).map(|_| None).collect(),
    };
    for i in 0..m {
        let prev = if i == 0 {
            &tape.input
        } else {
            &tape.activations[i - 1]
        };
        let (mut col_slot, mut argmax_slot) = (None, None);
        let out = run_layer(model, i, prev, Some(&mut col_slot), Some(&mut argmax_slot))?;
        tape.cols[i] = col_slot;
        tape.argmax[i] = argmax_slot;
        tape.activations.push(out);
    }
    Ok(tape)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
///
/// Numerically stabilized by max subtraction; the returned gradient is
/// `(softmax - onehot) / batch`, so parameter gradients are batch means.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let [b, classes, h, w] = logits.shape();
    if h != 1 || w != 1 {
        return Err(Error::invalid(format!(
            "logits must be (B, classes, 1, 1), got {:?}",
            logits.shape()
        )));
    }
    if labels.len() != b || b == 0 {
        return Err(Error::invalid(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        let l = &logits.data()[row * classes..(row + 1) * classes];
        let max = l.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f32 = l.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += f64::from(log_sum - l[label]);
        let g = &mut grad.data_mut()[row * classes..(row + 1) * classes];
        for (i, v) in l.iter().enumerate() {
            let p = (v - max).exp() / sum;
            g[i] = (p - if i == label { 1.0 } else { 0.0 }) / b as f32;
        }
    }
    Ok(((loss / b as f64) as f32, grad))
}

/// Backward pass for training: loss and parameter gradients only.
pub fn backward(model: &ModelState, tape: Tape, labels: &[usize]) -> Result<(f32, Vec<LayerParams>)> {
    let (loss, grads, _) = backward_impl(model, tape, labels, false)?;
    Ok((loss, grads))
}

/// Backward pass that additionally captures per-layer activations and
/// activation gradients (consumed by filter saliency scoring).
pub fn backward_with_capture(
    model: &ModelState,
    tape: Tape,
    labels: &[usize],
) -> Result<(f32, Vec<LayerParams>, GradCapture)> {
    let (loss, grads, capture) = backward_impl(model, tape, labels, true)?;
    Ok((loss, grads, capture.expect("capture requested")))
}

fn backward_impl(
    model: &ModelState,
    tape: Tape,
    labels: &[usize],
    want_capture: bool,
) -> Result<(f32, Vec<LayerParams>, Option<GradCapture>)> {
    let m = model.spec.layer_count();
    let batch = tape.input.batch();
    let (loss, mut dout) = softmax_cross_entropy(tape.logits(), labels)?;
    let mut grads = model.zeros_like();
    let mut captured: Vec<Option<Tensor>> = (0..m).map(|_| None).collect();

    for i in (0..m).rev() {
        if want_capture {
            captured[i] = Some(dout.clone());
        }
        let input = if i == 0 { &tape.input } else { &tape.activations[i - 1] };
        dout = match (&model.spec.layers[i], &model.params[i]) {
            (
                LayerKind::Conv { kernel, stride, padding, relu, .. },
                LayerParams::Conv { weights, bias },
            ) => {
                if *relu {
                    mask_relu(&mut dout, &tape.activations[i]);
                }
                let col = tape.cols[i].as_ref().expect("tape col for conv layer");
                let (dw, db, dx) =
                    conv_backward(input, weights, col, &dout, *kernel, *stride, *padding)?;
                grads[i] = LayerParams::Conv { weights: dw, bias: db };
                debug_assert_eq!(bias.len(), weights.shape()[0]);
                dx
            }
            (LayerKind::MaxPool { .. }, _) => {
                let argmax = tape.argmax[i].as_ref().expect("tape argmax for pool layer");
                pool_backward(input, &dout, argmax)
            }
            (LayerKind::Flatten, _) => {
                let shape = input.shape();
                dout.reshape(shape)?
            }
            (
                LayerKind::FullyConnected { relu, .. },
                LayerParams::Dense { weights, in_features, out_features, .. },
            ) => {
                if *relu {
                    mask_relu(&mut dout, &tape.activations[i]);
                }
                let (dw, db, dx) = fc_backward(input, weights, &dout, *in_features, *out_features);
                grads[i] = LayerParams::Dense {
                    weights: dw,
                    in_features: *in_features,
                    out_features: *out_features,
                    bias: db,
                };
                dx
            }
            (layer, params) => {
                return Err(Error::invalid(format!(
                    "layer {i} kind {layer:?} does not match its params {params:?}"
                )))
            }
        };
    }

    let capture = want_capture.then(|| GradCapture {
        activations: tape.activations,
        gradients: captured.into_iter().map(|g| g.expect("all layers captured")).collect(),
        batch,
    });
    Ok((loss, grads, capture))
}

// --- per-layer kernels ------------------------------------------------------

fn check_boundary_shape(model: &ModelState, input: &Tensor, from: usize) -> Result<()> {
    let expected = if from == 0 {
        model.spec.input
    } else {
        model.spec.output_shapes()?[from - 1]
    };
    let [_, c, h, w] = input.shape();
    if (c, h, w) != expected {
        return Err(Error::invalid(format!(
            "input shape ({c}, {h}, {w}) does not match layer-{from} boundary {expected:?}"
        )));
    }
    if input.batch() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

fn run_layer(
    model: &ModelState,
    i: usize,
    input: &Tensor,
    col_slot: Option<&mut Option<Vec<f32>>>,
    argmax_slot: Option<&mut Option<Vec<u32>>>,
) -> Result<Tensor> {
    match (&model.spec.layers[i], &model.params[i]) {
        (
            LayerKind::Conv { kernel, stride, padding, relu, .. },
            LayerParams::Conv { weights, bias },
        ) => {
            let (out, col) =
                conv_forward(input, weights, bias, *kernel, *stride, *padding, *relu)?;
            if let Some(slot) = col_slot {
                *slot = Some(col);
            }
            Ok(out)
        }
        (LayerKind::MaxPool { window, stride }, _) => {
            let (out, argmax) = pool_forward(input, *window, *stride)?;
            if let Some(slot) = argmax_slot {
                *slot = Some(argmax);
            }
            Ok(out)
        }
        (LayerKind::Flatten, _) => {
            let [b, c, h, w] = input.shape();
            input.clone().reshape([b, c * h * w, 1, 1])
        }
        (
            LayerKind::FullyConnected { relu, .. },
            LayerParams::Dense { weights, in_features, out_features, bias },
        ) => fc_forward(input, weights, bias, *in_features, *out_features, *relu),
        (layer, params) => Err(Error::invalid(format!(
            "layer {i} kind {layer:?} does not match its params {params:?}"
        ))),
    }
}

/// Unrolls `input` into the im2col matrix: one row per output position
/// (`b`-major, then `oh`, `ow`), one column per kernel tap (`c`-major, then
/// `kh`, `kw`). Out-of-bounds taps (padding) stay zero.
fn im2col(
    input: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let [b, c, h, w] = input.shape();
    let k2c = c * kernel * kernel;
    let mut col = vec![0.0f32; b * oh * ow * k2c];
    let data = input.data();
    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = ((bi * oh + ohi) * ow + owi) * k2c;
                for ci in 0..c {
                    let plane = (bi * c + ci) * h * w;
                    for kh in 0..kernel {
                        let ih = (ohi * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let in_row = plane + ih as usize * w;
                        let col_base = row + (ci * kernel + kh) * kernel;
                        for kw in 0..kernel {
                            let iw = (owi * stride + kw) as isize - padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            col[col_base + kw] = data[in_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of an im2col-shaped gradient back onto the input. Exact
/// adjoint of [`im2col`]: every tap that read a value adds its gradient back.
fn col2im(
    dcol: &[f32],
    shape: [usize; 4],
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Tensor {
    let [b, c, h, w] = shape;
    let k2c = c * kernel * kernel;
    let mut dx = Tensor::zeros(shape);
    let data = dx.data_mut();
    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = ((bi * oh + ohi) * ow + owi) * k2c;
                for ci in 0..c {
                    let plane = (bi * c + ci) * h * w;
                    for kh in 0..kernel {
                        let ih = (ohi * stride + kh) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let in_row = plane + ih as usize * w;
                        let col_base = row + (ci * kernel + kh) * kernel;
                        for kw in 0..kernel {
                            let iw = (owi * stride + kw) as isize - padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            data[in_row + iw as usize] += dcol[col_base + kw];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    kernel: usize,
    stride: usize,
    padding: usize,
    relu: bool,
) -> Result<(Tensor, Vec<f32>)> {
    let [b, c, h, w] = input.shape();
    let [out_c, in_c, _, _] = weights.shape();
    if in_c != c {
        return Err(Error::invalid(format!(
            "conv weights expect {in_c} input channels, activation has {c}"
        )));
    }
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let k2c = c * kernel * kernel;
    let col = im2col(input, kernel, stride, padding, oh, ow);
    let mut out = Tensor::zeros([b, out_c, oh, ow]);
    let plane = oh * ow;
    for bi in 0..b {
        let col_b = &col[bi * plane * k2c..(bi + 1) * plane * k2c];
        let out_b = &mut out.data_mut()[bi * out_c * plane..(bi + 1) * out_c * plane];
        // out_b (out_c x plane) = weights (out_c x k2c) . col_b^T (k2c x plane)
        unsafe {
            sgemm(
                out_c,
                k2c,
                plane,
                1.0,
                weights.data().as_ptr(),
                k2c as isize,
                1,
                col_b.as_ptr(),
                1,
                k2c as isize,
                0.0,
                out_b.as_mut_ptr(),
                plane as isize,
                1,
            );
        }
        for (co, chunk) in out_b.chunks_exact_mut(plane).enumerate() {
            let bv = bias[co];
            for v in chunk {
                *v += bv;
                if relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    Ok((out, col))
}

fn conv_backward(
    input: &Tensor,
    weights: &Tensor,
    col: &[f32],
    dout: &Tensor,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Vec<f32>, Tensor)> {
    let [b, _, oh, ow] = dout.shape();
    let [out_c, in_c, _, _] = weights.shape();
    let k2c = in_c * kernel * kernel;
    let plane = oh * ow;
    let mut dw = Tensor::zeros(weights.shape());
    let mut db = vec![0.0f32; out_c];
    let mut dcol = vec![0.0f32; b * plane * k2c];
    for bi in 0..b {
        let col_b = &col[bi * plane * k2c..(bi + 1) * plane * k2c];
        let dout_b = &dout.data()[bi * out_c * plane..(bi + 1) * out_c * plane];
        let dcol_b = &mut dcol[bi * plane * k2c..(bi + 1) * plane * k2c];
        // dW (out_c x k2c) += dout_b (out_c x plane) . col_b (plane x k2c)
        unsafe {
            sgemm(
                out_c,
                plane,
                k2c,
                1.0,
                dout_b.as_ptr(),
                plane as isize,
                1,
                col_b.as_ptr(),
                k2c as isize,
                1,
                1.0,
                dw.data_mut().as_mut_ptr(),
                k2c as isize,
                1,
            );
        }
        // dcol_b (plane x k2c) = dout_b^T (plane x out_c) . weights (out_c x k2c)
        unsafe {
            sgemm(
                plane,
                out_c,
                k2c,
                1.0,
                dout_b.as_ptr(),
                1,
                plane as isize,
                weights.data().as_ptr(),
                k2c as isize,
                1,
                0.0,
                dcol_b.as_mut_ptr(),
                k2c as isize,
                1,
            );
        }
        for (co, chunk) in dout_b.chunks_exact(plane).enumerate() {
            db[co] += chunk.iter().sum::<f32>();
        }
    }
    let dx = col2im(&dcol, input.shape(), kernel, stride, padding, oh, ow);
    Ok((dw, db, dx))
}

fn pool_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let [b, c, h, w] = input.shape();
    if h < window || w < window {
        return Err(Error::invalid(format!(
            "max-pool window {window} exceeds activation {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros([b, c, oh, ow]);
    let mut argmax = vec![0u32; b * c * oh * ow];
    let data = input.data();
    let mut oi = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            let plane = (bi * c + ci) * h * w;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let (h0, w0) = (ohi * stride, owi * stride);
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for kh in 0..window {
                        let row = plane + (h0 + kh) * w + w0;
                        for kw in 0..window {
                            let v = data[row + kw];
                            if v > best {
                                best = v;
                                best_at = (h0 + kh) * w + (w0 + kw);
                            }
                        }
                    }
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_at as u32;
                    oi += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

fn pool_backward(input: &Tensor, dout: &Tensor, argmax: &[u32]) -> Tensor {
    let [b, c, h, w] = input.shape();
    let per_out = dout.len() / (b * c);
    let mut dx = Tensor::zeros(input.shape());
    for bc in 0..b * c {
        let plane = bc * h * w;
        for o in 0..per_out {
            let oi = bc * per_out + o;
            dx.data_mut()[plane + argmax[oi] as usize] += dout.data()[oi];
        }
    }
    dx
}

fn fc_forward(
    input: &Tensor,
    weights: &[f32],
    bias: &[f32],
    in_features: usize,
    out_features: usize,
    relu: bool,
) -> Result<Tensor> {
    let [b, c, h, w] = input.shape();
    if c != in_features || h != 1 || w != 1 {
        return Err(Error::invalid(format!(
            "dense layer expects ({in_features}, 1, 1), activation is ({c}, {h}, {w})"
        )));
    }
    let mut out = Tensor::zeros([b, out_features, 1, 1]);
    // out (b x out) = input (b x in) . weights^T (in x out)
    unsafe {
        sgemm(
            b,
            in_features,
            out_features,
            1.0,
            input.data().as_ptr(),
            in_features as isize,
            1,
            weights.as_ptr(),
            1,
            in_features as isize,
            0.0,
            out.data_mut().as_mut_ptr(),
            out_features as isize,
            1,
        );
    }
    for row in out.data_mut().chunks_exact_mut(out_features) {
        for (o, v) in row.iter_mut().enumerate() {
            *v += bias[o];
            if relu && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

fn fc_backward(
    input: &Tensor,
    weights: &[f32],
    dout: &Tensor,
    in_features: usize,
    out_features: usize,
) -> (Vec<f32>, Vec<f32>, Tensor) {
    let b = input.batch();
    let mut dw = vec![0.0f32; out_features * in_features];
    let mut db = vec![0.0f32; out_features];
    let mut dx = Tensor::zeros(input.shape());
    // dW (out x in) = dout^T (out x b) . input (b x in)
    unsafe {
        sgemm(
            out_features,
            b,
            in_features,
            1.0,
            dout.data().as_ptr(),
            1,
            out_features as isize,
            input.data().as_ptr(),
            in_features as isize,
            1,
            0.0,
            dw.as_mut_ptr(),
            in_features as isize,
            1,
        );
    }
    // dx (b x in) = dout (b x out) . weights (out x in)
    unsafe {
        sgemm(
            b,
            out_features,
            in_features,
            1.0,
            dout.data().as_ptr(),
            out_features as isize,
            1,
            weights.as_ptr(),
            in_features as isize,
            1,
            0.0,
            dx.data_mut().as_mut_ptr(),
            in_features as isize,
            1,
        );
    }
    for row in dout.data().chunks_exact(out_features) {
        for (o, v) in row.iter().enumerate() {
            db[o] += v;
        }
    }
    (dw, db, dx)
}

/// Zeroes gradient entries where the fused ReLU clamped the activation.
fn mask_relu(dout: &mut Tensor, activation: &Tensor) {
    for (g, a) in dout.data_mut().iter_mut().zip(activation.data()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn spec() -> ModelSpec {
        ModelSpec {
            input: (2, 8, 8),
            classes: 3,
            layers: vec![
                LayerKind::Conv { out_channels: 4, kernel: 3, stride: 1, padding: 1, relu: true },
                LayerKind::MaxPool { window: 2, stride: 2 },
                LayerKind::Conv { out_channels: 5, kernel: 3, stride: 1, padding: 0, relu: true },
                LayerKind::Flatten,
                LayerKind::FullyConnected { out_features: 6, relu: true },
                LayerKind::FullyConnected { out_features: 3, relu: false },
            ],
        }
    }

    fn seeded_input(shape: [usize; 4], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let model = ModelState::init(spec(), 3).unwrap();
        let x = seeded_input([4, 2, 8, 8], 11);
        let a = forward(&model, &x).unwrap();
        let b = forward(&model, &x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [4, 3, 1, 1]);
        assert!(a.all_finite());
    }

    #[test]
    fn slices_compose_to_full_forward() {
        let model = ModelState::init(spec(), 3).unwrap();
        let x = seeded_input([2, 2, 8, 8], 5);
        let full = forward(&model, &x).unwrap();
        for p in 0..=model.spec.layer_count() {
            let head = forward_slice(&model, &x, 0, p).unwrap();
            let tail = forward_slice(&model, &head, p, model.spec.layer_count()).unwrap();
            assert_eq!(tail, full, "split at {p} changed the logits");
        }
    }

    #[test]
    fn forward_rejects_wrong_boundary_shape() {
        let model = ModelState::init(spec(), 3).unwrap();
        let x = seeded_input([1, 2, 8, 8], 0);
        assert!(forward_slice(&model, &x, 2, 6).is_err());
        assert!(forward_slice(&model, &x, 0, 7).is_err());
    }

    #[test]
    fn zero_model_loss_is_ln_classes() {
        let model = ModelState::zeroed(spec()).unwrap();
        let x = seeded_input([8, 2, 8, 8], 1);
        let tape = forward_with_tape(&model, &x).unwrap();
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1];
        let (loss, _) = backward(&model, tape, &labels).unwrap();
        assert!(((3.0f32).ln() - loss).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero() {
        let logits = seeded_input([3, 4, 1, 1], 9).reshape([3, 4, 1, 1]).unwrap();
        let (_, grad) = softmax_cross_entropy(&logits, &[1, 0, 3]).unwrap();
        for row in grad.data().chunks_exact(4) {
            let s: f32 = row.iter().sum();
            assert!(s.abs() < 1e-6);
        }
        assert!(softmax_cross_entropy(&logits, &[1, 0]).is_err());
        assert!(softmax_cross_entropy(&logits, &[1, 0, 4]).is_err());
    }

    #[test]
    fn capture_shapes_match_activations() {
        let model = ModelState::init(spec(), 3).unwrap();
        let x = seeded_input([4, 2, 8, 8], 2);
        let tape = forward_with_tape(&model, &x).unwrap();
        let (_, _, capture) = backward_with_capture(&model, tape, &[0, 1, 2, 0]).unwrap();
        assert_eq!(capture.batch, 4);
        assert_eq!(capture.activations.len(), capture.gradients.len());
        for (a, g) in capture.activations.iter().zip(&capture.gradients) {
            assert_eq!(a.shape(), g.shape());
            assert!(g.all_finite());
        }
    }

    #[test]
    fn unused_channel_gets_zero_activation_gradient() {
        // Zero out every fc weight reading from channel 0 of the last conv
        // layer; its captured activation gradient must be exactly zero.
        let mut model = ModelState::init(spec(), 3).unwrap();
        let (oh, ow) = (3, 3); // conv2 output plane for 8x8 input
        if let LayerParams::Dense { weights, in_features, .. } = &mut model.params[4] {
            for row in weights.chunks_exact_mut(*in_features) {
                for v in &mut row[0..oh * ow] {
                    *v = 0.0;
                }
            }
        } else {
            panic!("layer 4 should be dense");
        }
        let x = seeded_input([2, 2, 8, 8], 4);
        let tape = forward_with_tape(&model, &x).unwrap();
        let (_, _, capture) = backward_with_capture(&model, tape, &[0, 1]).unwrap();
        let g = &capture.gradients[2];
        for bi in 0..2 {
            for h in 0..oh {
                for w in 0..ow {
                    assert_eq!(g.at(bi, 0, h, w), 0.0);
                }
            }
        }
    }
}
