//! Feature tensor compression for the device-to-server link.
//!
//! Encoding runs three stages: affine u8 quantization (the only lossy step,
//! error at most one quantization step per element), a zero-run-length pass
//! that exploits post-ReLU sparsity, and a general-purpose DEFLATE entropy
//! stage. An alternative container stores the quantized plane as a grayscale
//! PNG (channels stacked vertically), trading a few bytes for a standard,
//! inspectable file. Both containers are bit-exact lossless over the
//! quantized bytes.
//!
//! Blob layout (little-endian; see `docs/formats.md`):
//!
//! ```text
//! magic "PPFEAT1\0" | container u8 | reserved [u8;3] | shape 4xu32
//! | scale f32 | zero_point u8 | pad [u8;3] | payload_len u32 | crc32 u32
//! | payload
//! ```
//!
//! The CRC-32 covers every byte except its own field (the 40 header bytes
//! before it, then the payload), so any single corrupted byte is detected.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BLOB_MAGIC: &[u8; 8] = b"PPFEAT1\0";
const HEADER_LEN: usize = 8 + 4 + 16 + 4 + 4 + 4 + 4;

/// How the quantized bytes are packaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Container {
    /// Zero-RLE then DEFLATE (the compact default).
    #[default]
    Packed,
    /// 8-bit grayscale PNG, one image of `batch*channels*height` rows.
    Png,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CodecConfig {
    pub container: Container,
}

/// Affine u8 quantization parameters: `real = scale * (q - zero_point)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: u8,
}

/// Quantizes to u8 with `q = clamp(round(x / scale) + zero_point)`.
///
/// The reconstruction error of every element is at most one step (`scale`).
/// Constant tensors are reproduced exactly. Non-finite inputs are rejected.
pub fn quantize(t: &Tensor) -> Result<(Vec<u8>, QuantParams)> {
    if t.is_empty() {
        return Err(Error::invalid("cannot quantize an empty tensor"));
    }
    if !t.all_finite() {
        return Err(Error::invalid("cannot quantize non-finite values"));
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in t.data() {
        min = min.min(v);
        max = max.max(v);
    }
    let params = if max > min {
        // The coded range must include zero: reconstruction is
        // `scale * (q - zero_point)` with `zero_point` in 0..=255, so zero is
        // always representable and any value further than 255 steps from it is
        // not. Widening [min, max] to cover zero keeps the one-step error
        // bound even when all values share a sign.
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = ((hi - lo) / 255.0).max(f32::MIN_POSITIVE);
        let zero_point = (-lo / scale).round().clamp(0.0, 255.0) as u8;
        QuantParams { scale, zero_point }
    } else if min == 0.0 {
        QuantParams { scale: 1.0, zero_point: 0 }
    } else if min > 0.0 {
        // Constant positive plane: q = 255 reconstructs it exactly.
        QuantParams { scale: (min / 255.0).max(f32::MIN_POSITIVE), zero_point: 0 }
    } else {
        // Constant negative plane: q = 0 against zero point 255.
        QuantParams { scale: (-min / 255.0).max(f32::MIN_POSITIVE), zero_point: 255 }
    };
    let zp = f32::from(params.zero_point);
    let bytes = t
        .data()
        .iter()
        .map(|&v| ((v / params.scale).round() + zp).clamp(0.0, 255.0) as u8)
        .collect();
    Ok((bytes, params))
}

/// Inverse of [`quantize`] up to one quantization step.
pub fn dequantize(bytes: &[u8], params: &QuantParams, shape: [usize; 4]) -> Result<Tensor> {
    let expected: usize = shape.iter().product();
    if bytes.len() != expected {
        return Err(Error::invalid(format!(
            "{} quantized bytes for shape {shape:?} ({expected} elements)",
            bytes.len()
        )));
    }
    let zp = i32::from(params.zero_point);
    let data = bytes
        .iter()
        .map(|&q| (i32::from(q) - zp) as f32 * params.scale)
        .collect();
    Tensor::from_vec(shape, data)
}

/// Zero-run-length pass: nonzero bytes are copied; a zero byte is emitted as
/// `0x00` followed by the run length (1..=255, longer runs split).
pub fn rle_compress(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b != 0 {
            out.push(b);
            i += 1;
            continue;
        }
        let mut run = 1usize;
        while i + run < bytes.len() && bytes[i + run] == 0 && run < 255 {
            run += 1;
        }
        out.push(0);
        out.push(run as u8);
        i += run;
    }
    out
}

/// Inverse of [`rle_compress`]; malformed streams (truncated or zero-length
/// runs) produce a decode error naming the stage.
pub fn rle_decompress(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if b != 0 {
            out.push(b);
            i += 1;
            continue;
        }
        let run = *bytes.get(i + 1).ok_or(Error::Decode {
            stage: "rle",
            detail: "zero marker at end of stream".into(),
        })?;
        if run == 0 {
            return Err(Error::Decode {
                stage: "rle",
                detail: "zero-length run".into(),
            });
        }
        out.extend(std::iter::repeat(0u8).take(run as usize));
        i += 2;
    }
    Ok(out)
}

/// Encodes a feature tensor into a self-describing blob.
pub fn encode(features: &Tensor, cfg: &CodecConfig) -> Result<Vec<u8>> {
    let (q, params) = quantize(features)?;
    let payload = match cfg.container {
        Container::Packed => {
            let rle = rle_compress(&q);
            let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
            enc.write_all(&rle)?;
            enc.finish()?
        }
        Container::Png => png_pack(&q, features.shape())?,
    };
    let shape = features.shape();
    let mut blob = Vec::with_capacity(HEADER_LEN + payload.len());
    blob.extend_from_slice(BLOB_MAGIC);
    blob.push(match cfg.container {
        Container::Packed => 0,
        Container::Png => 1,
    });
    blob.extend_from_slice(&[0u8; 3]);
    for dim in shape {
        blob.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    blob.extend_from_slice(&params.scale.to_le_bytes());
    blob.push(params.zero_point);
    blob.extend_from_slice(&[0u8; 3]);
    blob.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    blob.extend_from_slice(&blob_crc(&blob[..HEADER_LEN - 4], &payload).to_le_bytes());
    blob.extend_from_slice(&payload);
    Ok(blob)
}

/// Decodes a blob back to the dequantized tensor and its parameters.
pub fn decode(blob: &[u8]) -> Result<(Tensor, QuantParams)> {
    if blob.len() < HEADER_LEN {
        return Err(Error::Decode {
            stage: "header",
            detail: format!("blob of {} bytes is shorter than the header", blob.len()),
        });
    }
    if &blob[0..8] != BLOB_MAGIC {
        return Err(Error::Decode {
            stage: "header",
            detail: format!("bad magic {:?}", &blob[0..8]),
        });
    }
    let stored_crc = u32::from_le_bytes(blob[40..44].try_into().unwrap());
    if blob_crc(&blob[..HEADER_LEN - 4], &blob[HEADER_LEN..]) != stored_crc {
        return Err(Error::Decode {
            stage: "integrity",
            detail: "checksum mismatch".into(),
        });
    }
    let container = match blob[8] {
        0 => Container::Packed,
        1 => Container::Png,
        t => {
            return Err(Error::Decode {
                stage: "header",
                detail: format!("unknown container tag {t}"),
            })
        }
    };
    let dim = |i: usize| u32::from_le_bytes(blob[12 + 4 * i..16 + 4 * i].try_into().unwrap()) as usize;
    let shape = [dim(0), dim(1), dim(2), dim(3)];
    let scale = f32::from_le_bytes(blob[28..32].try_into().unwrap());
    let zero_point = blob[32];
    let payload_len =
        u32::from_le_bytes(blob[36..40].try_into().unwrap()) as usize;
    if blob.len() != HEADER_LEN + payload_len {
        return Err(Error::Decode {
            stage: "header",
            detail: format!(
                "payload length field says {payload_len}, blob carries {}",
                blob.len() - HEADER_LEN
            ),
        });
    }
    let payload = &blob[HEADER_LEN..];
    let expected: usize = shape.iter().product();
    let q = match container {
        Container::Packed => {
            let mut rle = Vec::new();
            DeflateDecoder::new(payload)
                .read_to_end(&mut rle)
                .map_err(|e| Error::Decode { stage: "deflate", detail: e.to_string() })?;
            rle_decompress(&rle)?
        }
        Container::Png => png_unpack(payload, shape)?,
    };
    if q.len() != expected {
        return Err(Error::Decode {
            stage: "payload",
            detail: format!("{} quantized bytes for shape {shape:?}", q.len()),
        });
    }
    let params = QuantParams { scale, zero_point };
    Ok((dequantize(&q, &params, shape)?, params))
}

fn png_pack(q: &[u8], shape: [usize; 4]) -> Result<Vec<u8>> {
    let [b, c, h, w] = shape;
    let (width, height) = (w as u32, (b * c * h) as u32);
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width, height);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Decode { stage: "png", detail: e.to_string() })?;
        writer
            .write_image_data(q)
            .map_err(|e| Error::Decode { stage: "png", detail: e.to_string() })?;
    }
    Ok(out)
}

fn png_unpack(payload: &[u8], shape: [usize; 4]) -> Result<Vec<u8>> {
    let [b, c, h, w] = shape;
    let decoder = png::Decoder::new(std::io::Cursor::new(payload));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Decode { stage: "png", detail: e.to_string() })?;
    let info = reader.info();
    if info.width as usize != w
        || info.height as usize != b * c * h
        || info.color_type != png::ColorType::Grayscale
        || info.bit_depth != png::BitDepth::Eight
    {
        return Err(Error::Decode {
            stage: "png",
            detail: format!(
                "image {}x{} {:?}/{:?} does not match shape {shape:?}",
                info.width, info.height, info.color_type, info.bit_depth
            ),
        });
    }
    let mut buf = vec![0u8; reader.output_buffer_size().expect("size fits in memory")];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Decode { stage: "png", detail: e.to_string() })?;
    buf.truncate(frame.buffer_size());
    Ok(buf)
}

/// CRC-32 (IEEE 802.3) over the pre-checksum header bytes and the payload.
fn blob_crc(header: &[u8], payload: &[u8]) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(header);
    hasher.update(payload);
    hasher.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], seed: u64, lo: f32, hi: f32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(lo..hi))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn quantization_error_is_within_one_step() {
        for seed in 0..20 {
            let t = random_tensor([1, 3, 7, 5], seed, -2.5, 4.0);
            let (q, params) = quantize(&t).unwrap();
            let back = dequantize(&q, &params, t.shape()).unwrap();
            for (a, b) in t.data().iter().zip(back.data()) {
                assert!(
                    (a - b).abs() <= params.scale,
                    "error {} exceeds step {}",
                    (a - b).abs(),
                    params.scale
                );
            }
        }
    }

    #[test]
    fn one_sided_ranges_stay_within_one_step() {
        // Values far from zero with the same sign: the coded range still
        // covers zero, so nothing saturates against the zero point.
        for (lo, hi) in [(450.0f32, 630.0), (-630.0, -450.0), (0.001, 0.002)] {
            for seed in 0..10 {
                let t = random_tensor([1, 1, 1, 2], seed, lo, hi);
                let (q, params) = quantize(&t).unwrap();
                let back = dequantize(&q, &params, t.shape()).unwrap();
                for (a, b) in t.data().iter().zip(back.data()) {
                    assert!(
                        (a - b).abs() <= params.scale,
                        "error {} exceeds step {} for range {lo}..{hi}",
                        (a - b).abs(),
                        params.scale
                    );
                }
            }
        }
    }

    #[test]
    fn constant_tensors_reconstruct_exactly() {
        for v in [0.0f32, 3.75, -1.25, 1000.0] {
            let t = Tensor::from_vec([1, 1, 2, 2], vec![v; 4]).unwrap();
            let (q, params) = quantize(&t).unwrap();
            let back = dequantize(&q, &params, t.shape()).unwrap();
            for b in back.data() {
                assert_eq!(*b, v, "constant {v} did not round-trip");
            }
        }
    }

    #[test]
    fn quantize_rejects_bad_input() {
        let mut t = Tensor::zeros([1, 1, 1, 2]);
        t.data_mut()[0] = f32::NAN;
        assert!(quantize(&t).is_err());
    }

    #[test]
    fn rle_round_trips_and_shrinks_sparse_data() {
        let mut data = vec![0u8; 1000];
        data[10] = 7;
        data[500] = 255;
        let packed = rle_compress(&data);
        assert!(packed.len() < 20, "1000 near-zero bytes pack to {}", packed.len());
        assert_eq!(rle_decompress(&packed).unwrap(), data);

        // Runs longer than 255 split correctly.
        let long = vec![0u8; 700];
        assert_eq!(rle_decompress(&rle_compress(&long)).unwrap(), long);

        // Dense data survives too.
        let dense: Vec<u8> = (0..=255).cycle().take(1000).collect();
        assert_eq!(rle_decompress(&rle_compress(&dense)).unwrap(), dense);
    }

    #[test]
    fn rle_rejects_malformed_streams() {
        assert!(matches!(
            rle_decompress(&[1, 2, 0]),
            Err(Error::Decode { stage: "rle", .. })
        ));
        assert!(matches!(
            rle_decompress(&[0, 0]),
            Err(Error::Decode { stage: "rle", .. })
        ));
    }

    #[test]
    fn blob_round_trip_both_containers() {
        for container in [Container::Packed, Container::Png] {
            let cfg = CodecConfig { container };
            let t = random_tensor([1, 4, 6, 5], 3, 0.0, 1.0);
            let blob = encode(&t, &cfg).unwrap();
            let (back, params) = decode(&blob).unwrap();
            assert_eq!(back.shape(), t.shape());
            let expected = {
                let (q, p) = quantize(&t).unwrap();
                assert_eq!(p, params);
                dequantize(&q, &p, t.shape()).unwrap()
            };
            assert_eq!(back, expected, "{container:?} is not lossless after quantization");
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let t = random_tensor([1, 8, 8, 8], 5, -1.0, 1.0);
        let cfg = CodecConfig::default();
        assert_eq!(encode(&t, &cfg).unwrap(), encode(&t, &cfg).unwrap());
    }

    #[test]
    fn sparse_features_compress_well() {
        // Mimic post-ReLU sparsity: ~70% zeros.
        let mut t = random_tensor([1, 16, 16, 16], 7, -2.0, 1.0);
        for v in t.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let raw = t.len() * 4;
        let blob = encode(&t, &CodecConfig::default()).unwrap();
        assert!(
            (blob.len() as f64) < raw as f64 / 3.0,
            "sparse blob {} vs raw {raw}",
            blob.len()
        );
    }

    #[test]
    fn decode_rejects_damage_naming_the_stage() {
        let t = random_tensor([1, 2, 4, 4], 9, 0.0, 1.0);
        let blob = encode(&t, &CodecConfig::default()).unwrap();

        let mut bad_magic = blob.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode(&bad_magic),
            Err(Error::Decode { stage: "header", .. })
        ));

        let mut flipped = blob.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0xFF;
        assert!(matches!(
            decode(&flipped),
            Err(Error::Decode { stage: "integrity", .. })
        ));

        // Header fields are covered too: a corrupted scale cannot silently
        // rescale the features.
        let mut bad_scale = blob.clone();
        bad_scale[29] ^= 0x40;
        assert!(matches!(
            decode(&bad_scale),
            Err(Error::Decode { stage: "integrity", .. })
        ));

        // Truncation corrupts the covered byte stream.
        let truncated = &blob[..blob.len() - 3];
        assert!(matches!(
            decode(truncated),
            Err(Error::Decode { stage: "integrity", .. })
        ));

        assert!(matches!(
            decode(&blob[..10]),
            Err(Error::Decode { stage: "header", .. })
        ));
    }

    #[test]
    fn crc_matches_known_vector() {
        // Standard IEEE CRC-32 check value, streamed across the two parts.
        assert_eq!(blob_crc(b"1234", b"56789"), 0xCBF4_3926);
    }

    #[test]
    fn png_blob_carries_a_real_png() {
        let t = random_tensor([1, 3, 8, 8], 11, 0.0, 1.0);
        let blob = encode(&t, &CodecConfig { container: Container::Png }).unwrap();
        // Payload starts with the PNG signature.
        let sig = &blob[HEADER_LEN..HEADER_LEN + 8];
        assert_eq!(sig, &[0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A]);
    }
}
