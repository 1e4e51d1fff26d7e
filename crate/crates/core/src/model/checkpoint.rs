//! `STVM` checkpoint encoding. Layout is described in `docs/formats.md`.

use std::path::Path;

use super::{Model, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::fsutil::{self, put_f32s, put_string, Reader};

pub const MODEL_MAGIC: &[u8; 4] = b"STVM";
pub const MODEL_VERSION: u32 = 1;

pub(crate) fn encode(model: &Model<f32>) -> Vec<u8> {
    encode_with_flag(model, model.is_frozen())
}

/// The encoding with the frozen byte overridden, so that identity hashes
/// cover only configuration and weights.
pub(crate) fn encode_with_flag(model: &Model<f32>, frozen: bool) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    for v in [
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.vocab_size,
        cfg.max_seq_len,
        cfg.d_ff(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    out.push(frozen as u8);
    let tensors = model.weights().named(cfg);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        put_string(&mut out, &name);
        out.push(shape.len() as u8);
        for dim in shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        put_f32s(&mut out, data);
    }
    fsutil::seal_crc(&mut out);
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::CorruptFile("not an STVM checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            expected: MODEL_VERSION,
            found: version,
        });
    }
    let body = fsutil::check_crc(bytes)?;
    let mut r = Reader::new(&body[8..]);
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        d_model: dims[0],
        n_layers: dims[1],
        n_heads: dims[2],
        vocab_size: dims[3],
        max_seq_len: dims[4],
        seed: r.u64()?,
    };
    config.validate()?;
    if dims[5] != config.d_ff() {
        return Err(Error::CorruptFile(format!("unsupported d_ff {}", dims[5])));
    }
    let frozen = r.u8()? != 0;
    let count = r.u32()? as usize;

    let mut weights: Weights<f32> = Weights::init(&ModelConfig { seed: 0, ..config });
    let expected: Vec<(String, Vec<usize>)> = weights.named(&config).into_iter().map(|(n, s, _)| (n, s)).collect();
    if count != expected.len() {
        return Err(Error::CorruptFile(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    let slots = weights.tensors_mut();
    for ((name, shape), slot) in expected.into_iter().zip(slots) {
        let found = r.string()?;
        if found != name {
            return Err(Error::CorruptFile(format!("expected tensor {name}, found {found}")));
        }
        let ndim = r.u8()? as usize;
        let mut found_shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            found_shape.push(r.u32()? as usize);
        }
        if found_shape != shape {
            return Err(Error::CorruptFile(format!(
                "tensor {name} has shape {found_shape:?}, expected {shape:?}"
            )));
        }
        *slot = r.f32s(shape.iter().product())?;
    }
    if r.remaining() != 0 {
        return Err(Error::CorruptFile("trailing bytes".into()));
    }
    Model::from_weights(config, weights, frozen)
}

pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode(model))
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    decode(&fsutil::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::new(ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 10,
            max_seq_len: 6,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut m = model();
        m.freeze();
        let back = decode(&encode(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.hash(), m.hash());
    }

    #[test]
    fn corruption_detected() {
        let bytes = encode(&model());
        assert!(matches!(decode(&bytes[..bytes.len() - 10]), Err(Error::CorruptFile(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::CorruptFile(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn seed_changes_hash() {
        let a = model();
        let b = Model::<f32>::new(ModelConfig {
            seed: 10,
            ..*a.config()
        })
        .unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn freezing_keeps_hash() {
        let mut m = model();
        let before = m.hash();
        m.freeze();
        assert_eq!(m.hash(), before);
        assert_ne!(encode(&m), encode(&model()));
    }
}
