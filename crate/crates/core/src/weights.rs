//! Binary weight file.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MWDC" | u32 version (1) | u32 config byte length | config JSON
//! | tensors in DecoderWeights order, raw row-major f32, no per-tensor header
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{tensor_layout, DecoderWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MWDC";
pub const VERSION: u32 = 1;

pub fn write_weights<W: Write>(weights: &DecoderWeights, mut out: W) -> Result<()> {
    let config = weights.config.to_json();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(config.as_bytes())?;
    for tensor in weights.tensors() {
        let mut buf = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save(weights: &DecoderWeights, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_weights(weights, std::io::BufWriter::new(file))
}

pub fn load(path: impl AsRef<Path>) -> Result<DecoderWeights> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_weights(&bytes)
}

pub fn parse_weights(bytes: &[u8]) -> Result<DecoderWeights> {
    let fail = |msg: String| Error::WeightFile(msg);
    if bytes.len() < 12 {
        return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, expected \"MWDC\"".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let config_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + config_len;
    if bytes.len() < header {
        return Err(fail("config document runs past end of file".into()));
    }
    let text = std::str::from_utf8(&bytes[12..header])
        .map_err(|_| fail("config document is not UTF-8".into()))?;
    let config =
        ModelConfig::parse(text).map_err(|e| fail(format!("embedded config: {e}")))?;

    let expected = config
        .parameter_count()
        .checked_mul(4)
        .and_then(|n| n.checked_add(header as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(fail(format!(
            "length mismatch: expected {} bytes for {} parameters, found {}",
            expected.map_or("overflow".to_string(), |n| n.to_string()),
            config.parameter_count(),
            bytes.len()
        )));
    }

    let mut offset = header;
    let mut tensors = Vec::new();
    for (shape, _) in tensor_layout(&config) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(fail(format!("non-finite value in tensor at byte {offset}")));
        }
        offset += 4 * n;
        tensors.push(Tensor::new(shape, data)?);
    }
    DecoderWeights::from_tensors(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            dim: 8,
            n_layers: 2,
            head_dim: 4,
            hidden_dim: 12,
            n_heads: 2,
            n_kv_heads: 1,
            window_size: 4,
            context_len: 16,
            vocab_size: 10,
        }
    }

    fn encoded(seed: u64) -> (DecoderWeights, Vec<u8>) {
        let w = DecoderWeights::init_random(&tiny(), seed).unwrap();
        let mut bytes = Vec::new();
        write_weights(&w, &mut bytes).unwrap();
        (w, bytes)
    }

    #[test]
    fn roundtrip() {
        let (w, bytes) = encoded(5);
        let header = 12 + tiny().to_json().len();
        assert_eq!(bytes.len() as u64, header as u64 + 4 * tiny().parameter_count());
        assert_eq!(&bytes[..4], b"MWDC");
        assert_eq!(parse_weights(&bytes).unwrap(), w);
    }

    #[test]
    fn rejects_corruption() {
        let (_, bytes) = encoded(5);
        let err = |b: &[u8]| parse_weights(b).unwrap_err().to_string();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(err(&bad).contains("magic"));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(err(&bad).contains("version"));

        assert!(err(&bytes[..bytes.len() - 4]).contains("length mismatch"));
        assert!(err(&bytes[..6]).contains("truncated"));

        let mut bad = bytes.clone();
        let last = bad.len() - 4;
        bad[last..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(err(&bad).contains("non-finite"));
    }
}
