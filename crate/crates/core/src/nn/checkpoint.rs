//! Network checkpoint framing: `u32` little-endian header length, a JSON
//! header describing the architecture and parameter layout, then every
//! parameter as little-endian `f32` in declaration order, then the per-channel
//! input normalisation statistics (all means, then all standard deviations).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamLayout, Real, Tensor};
use crate::data::{PolarImage, NUM_CHANNELS, NUM_CLASSES};
use crate::error::{Error, Result};

/// Per-channel `(x - mean) / std` statistics gathered from a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Per-channel mean and standard deviation over every pixel of `images`.
    /// Near-constant channels keep a unit scale.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a PolarImage>) -> Self {
        let mut sum = [0.0f64; NUM_CHANNELS];
        let mut sq = [0.0f64; NUM_CHANNELS];
        let mut n = 0usize;
        for img in images {
            for (c, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in img.channel(c) {
                    *s += v as f64;
                    *q += (v as f64) * (v as f64);
                }
            }
            n += img.plane();
        }
        if n == 0 {
            return Self::identity(NUM_CHANNELS);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / n as f64 - m * m).max(0.0).sqrt();
                if sd > 1e-6 { sd as f32 } else { 1.0 }
            })
            .collect();
        Self { mean: mean.iter().map(|&m| m as f32).collect(), std }
    }

    /// Normalised image as a `(3, r, a)` tensor.
    pub fn image_tensor<F: Real>(&self, image: &PolarImage) -> Tensor<F> {
        let plane = image.plane();
        let data = image
            .data
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let c = k / plane;
                F::from_f64_lossy(((v - self.mean[c]) / self.std[c]) as f64)
            })
            .collect();
        Tensor::from_vec(NUM_CHANNELS, image.r, image.a, data)
    }
}

/// Converts a `(r, a, 6)` probability field into a channel-major `(6, r, a)` tensor.
pub fn probs_to_tensor<F: Real>(probs: &[f64], r: usize, a: usize) -> Tensor<F> {
    let plane = r * a;
    let mut t = Tensor::zeros(NUM_CLASSES, r, a);
    for p in 0..plane {
        for c in 0..NUM_CLASSES {
            t.data[c * plane + p] = F::from_f64_lossy(probs[p * NUM_CLASSES + c]);
        }
    }
    t
}

/// Inverse of [`probs_to_tensor`].
pub fn tensor_to_probs<F: Real>(t: &Tensor<F>) -> Vec<f64> {
    let plane = t.plane();
    let mut out = vec![0.0; plane * t.c];
    for c in 0..t.c {
        for (p, v) in t.channel(c).iter().enumerate() {
            out[p * t.c + c] = v.to_f64_lossy();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub architecture: serde_json::Value,
    pub layout: ParamLayout,
    pub norm_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
    pub norm: Normalization,
}

impl Checkpoint {
    pub fn new<F: Real>(
        kind: &str,
        architecture: serde_json::Value,
        layout: ParamLayout,
        params: &[F],
        norm: Normalization,
    ) -> Self {
        assert_eq!(params.len(), layout.total);
        let header = CheckpointHeader {
            kind: kind.to_string(),
            architecture,
            layout,
            norm_channels: norm.mean.len(),
        };
        let params = params.iter().map(|v| v.to_f64_lossy() as f32).collect();
        Self { header, params, norm }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(4 + header.len() + 4 * (self.params.len() + 2 * self.norm.mean.len()));
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.params.iter().chain(&self.norm.mean).chain(&self.norm.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut len = [0u8; 4];
        cursor.read_exact(&mut len).map_err(|_| Error::Format("checkpoint too short".into()))?;
        let len = u32::from_le_bytes(len) as usize;
        if cursor.len() < len {
            return Err(Error::Format("checkpoint header truncated".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&cursor[..len])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let body = &cursor[len..];
        let n = header.layout.total + 2 * header.norm_channels;
        if body.len() != 4 * n {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint payload has {} bytes, header implies {}",
                body.len(),
                4 * n
            )));
        }
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let (params, stats) = values.split_at(header.layout.total);
        let (mean, std) = stats.split_at(header.norm_channels);
        Ok(Self {
            params: params.to_vec(),
            norm: Normalization { mean: mean.to_vec(), std: std.to_vec() },
            header,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn params_as<F: Real>(&self) -> Vec<F> {
        self.params.iter().map(|&v| F::from_f64_lossy(v as f64)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut layout = ParamLayout::default();
        layout.push("a.weight", &[2, 3]);
        layout.push("a.bias", &[2]);
        let params: Vec<f32> = (0..8).map(|i| (i as f32).sin() * 1e-3).collect();
        let ck = Checkpoint::new(
            "test",
            serde_json::json!({"dims": [1, 2]}),
            layout,
            &params,
            Normalization { mean: vec![0.1, 0.2, 0.3], std: vec![1.5, 2.5, 3.5] },
        );
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut layout = ParamLayout::default();
        layout.push("w", &[4]);
        let ck = Checkpoint::new("t", serde_json::Value::Null, layout, &[1.0f32; 4], Normalization::identity(3));
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
