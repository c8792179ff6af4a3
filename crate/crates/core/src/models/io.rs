//! Versioned binary model files.
//!
//! ```text
//! magic "OSLOMODL" | version u32 | family u8 | width u32 | dropout f64
//! | classes u32 | channels u32 | height u32 | width u32
//! | optimizer (u32 len + utf8) | lr f64 | epochs u32 | seed u64
//! | loss history (u32 len + f64s)
//! | tensor count u32 | per tensor: ndim u32, dims u32..., values f64...
//! | sha256 of everything above (32 bytes)
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ArchSpec, Family, ModelHandle, TrainMeta};
use crate::data::InputShape;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"OSLOMODL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

pub fn encode_model(m: &ModelHandle) -> Vec<u8> {
    let mut b = Vec::with_capacity(64 + 8 * m.param_count());
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    b.push(m.arch.family.code());
    b.extend_from_slice(&(m.arch.width as u32).to_le_bytes());
    b.extend_from_slice(&m.arch.dropout.to_le_bytes());
    for v in [m.num_classes, m.input.channels, m.input.height, m.input.width] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.extend_from_slice(&(m.meta.optimizer.len() as u32).to_le_bytes());
    b.extend_from_slice(m.meta.optimizer.as_bytes());
    b.extend_from_slice(&m.meta.learning_rate.to_le_bytes());
    b.extend_from_slice(&(m.meta.epochs as u32).to_le_bytes());
    b.extend_from_slice(&m.meta.seed.to_le_bytes());
    b.extend_from_slice(&(m.meta.loss_history.len() as u32).to_le_bytes());
    for v in &m.meta.loss_history {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&(m.weights.len() as u32).to_le_bytes());
    for t in &m.weights {
        b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&b);
    b.extend_from_slice(&digest);
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("model file ends early".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

pub fn decode_model(bytes: &[u8], origin: &str) -> Result<ModelHandle> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{origin}: not a model file")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4"));
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            expected: MODEL_FORMAT_VERSION,
            found: version,
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(Error::Checksum(origin.into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(origin.into()));
    }

    let mut r = Reader { buf: body, pos: 12 };
    let family = Family::from_code(r.u8()?).ok_or_else(|| Error::Format(format!("{origin}: unknown family code")))?;
    let arch = ArchSpec {
        family,
        width: r.usize()?,
        dropout: r.f64()?,
    };
    let num_classes = r.usize()?;
    let input = InputShape::new(r.usize()?, r.usize()?, r.usize()?);
    let name_len = r.usize()?;
    let optimizer = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format(format!("{origin}: optimizer name is not utf-8")))?;
    let learning_rate = r.f64()?;
    let epochs = r.usize()?;
    let seed = r.u64()?;
    let hist_len = r.usize()?;
    let loss_history = (0..hist_len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let n_tensors = r.usize()?;
    let mut weights = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let ndim = r.usize()?;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        weights.push(Tensor::new(shape, data)?);
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!("{origin}: trailing bytes after weights")));
    }
    arch.validate()?;
    let expected = arch.param_shapes(input, num_classes);
    if weights.iter().map(|w| w.shape().to_vec()).collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!("{origin}: weight shapes do not match the architecture")));
    }
    Ok(ModelHandle {
        arch,
        input,
        num_classes,
        weights,
        meta: TrainMeta {
            optimizer,
            learning_rate,
            epochs,
            seed,
            loss_history,
        },
    })
}

pub fn save_model(m: &ModelHandle, path: &Path) -> Result<()> {
    fs::write(path, encode_model(m))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelHandle> {
    let bytes = fs::read(path)?;
    decode_model(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stage_rng;
    use rand::Rng;

    fn model() -> ModelHandle {
        let mut rng = stage_rng(5, "io");
        let mut m = ModelHandle::init(ArchSpec::new(Family::CnnC), InputShape::new(1, 8, 8), 4, &mut rng).unwrap();
        m.meta = TrainMeta {
            optimizer: "adam".into(),
            learning_rate: 1e-3,
            epochs: 3,
            seed: 9,
            loss_history: vec![1.2, 0.8, 0.5],
        };
        m
    }

    #[test]
    fn round_trip_preserves_logits() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        save_model(&m, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, m);
        let mut rng = stage_rng(6, "inputs");
        for _ in 0..100 {
            let x = Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random::<f64>()).collect()).unwrap();
            assert_eq!(m.logits(&x).unwrap(), back.logits(&x).unwrap());
        }
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = encode_model(&model());
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(decode_model(cut, "cut"), Err(Error::Checksum(_))));
    }

    #[test]
    fn flipped_byte_rejected() {
        let mut bytes = encode_model(&model());
        bytes[100] ^= 0xff;
        assert!(matches!(decode_model(&bytes, "flip"), Err(Error::Checksum(_))));
    }

    #[test]
    fn version_mismatch_names_expected_version() {
        let mut bytes = encode_model(&model());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = decode_model(&bytes, "v").unwrap_err();
        assert!(matches!(err, Error::Version { expected: 1, found: 7 }));
        assert!(err.to_string().contains("expected version 1"));
    }
}
