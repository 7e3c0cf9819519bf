//! Layer vocabulary and shape arithmetic.
//!
//! Shapes are `(channels, height, width)` for a single sample; the batch
//! dimension is carried by [`crate::tensor::Tensor`] and never affects shape
//! inference. Fully-connected layers treat their input as `(features, 1, 1)`,
//! so a `Flatten` (or another fully-connected layer) must precede them.

use crate::error::{Error, Result};

/// One layer of a sequential network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 2-D convolution, square kernel, optional fused ReLU.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    /// 2-D max pooling, square window, no padding.
    MaxPool { window: usize, stride: usize },
    /// Collapses `(C, H, W)` to `(C*H*W, 1, 1)`; a layout no-op.
    Flatten,
    /// Dense layer over a flattened input, optional fused ReLU.
    FullyConnected { out_features: usize, relu: bool },
}

impl LayerKind {
    /// Output shape for `input`, or an error when the layer cannot accept it.
    pub fn output_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("degenerate input shape {input:?}")));
        }
        match *self {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::invalid(format!(
                        "conv with out_channels={out_channels}, kernel={kernel}, stride={stride}"
                    )));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::invalid(format!(
                        "conv kernel {kernel} exceeds padded input {h}x{w} (padding {padding})"
                    )));
                }
                let oh = (h + 2 * padding - kernel) / stride + 1;
                let ow = (w + 2 * padding - kernel) / stride + 1;
                Ok((out_channels, oh, ow))
            }
            LayerKind::MaxPool { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(Error::invalid(format!(
                        "max-pool with window={window}, stride={stride}"
                    )));
                }
                if h < window || w < window {
                    return Err(Error::invalid(format!(
                        "max-pool window {window} exceeds input {h}x{w}"
                    )));
                }
                Ok((c, (h - window) / stride + 1, (w - window) / stride + 1))
            }
            LayerKind::Flatten => Ok((c * h * w, 1, 1)),
            LayerKind::FullyConnected { out_features, .. } => {
                if out_features == 0 {
                    return Err(Error::invalid("fully-connected with zero outputs"));
                }
                if h != 1 || w != 1 {
                    return Err(Error::invalid(format!(
                        "fully-connected input must be flat, got {input:?}"
                    )));
                }
                Ok((out_features, 1, 1))
            }
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }

    pub fn is_pool(&self) -> bool {
        matches!(self, LayerKind::MaxPool { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::FullyConnected { .. })
    }
}
