//! Policy parameter container.
//!
//! Layout, little-endian: magic `FEWC`, version `u16`, architecture hash
//! `u64`, config text (`u32` length + UTF-8), tensor count `u32`, then per
//! tensor: name (`u32` length + UTF-8), rank `u32`, dims `u32` each, values
//! as `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{Policy, PolicyConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FEWC";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(policy: &Policy) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&policy.architecture_hash().to_le_bytes());
    put_str(&mut out, &policy.config.to_text());
    put_u32(&mut out, policy.store.len());
    for (name, t) in policy.store.iter() {
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "save_checkpoint" });
        }
        put_str(&mut out, name);
        put_u32(&mut out, t.ndim());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.saturating_add(n)).ok_or(Error::TruncatedPayload {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::DimInconsistency("non-UTF-8 text field".into()))
    }
}

struct Decoded {
    hash: u64,
    config: PolicyConfig,
    tensors: Vec<(String, Tensor)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let hash = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let config = PolicyConfig::from_text(&r.string()?)?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::DimInconsistency(format!("{name}: {shape:?}")))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        tensors.push((name.clone(), Tensor::new(&shape, data).map_err(|e| Error::DimInconsistency(format!("{name}: {e}")))?));
    }
    if r.pos != bytes.len() {
        return Err(Error::DimInconsistency(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Decoded { hash, config, tensors })
}

fn install(policy: &mut Policy, d: Decoded) -> Result<()> {
    let expected = policy.architecture_hash();
    if d.hash != expected {
        return Err(Error::IncompatibleArchitecture { expected, found: d.hash });
    }
    let ids: Vec<_> = policy.store.ids().collect();
    if ids.len() != d.tensors.len() {
        return Err(Error::DimInconsistency(format!("{} tensors, model has {}", d.tensors.len(), ids.len())));
    }
    for (id, (name, t)) in ids.into_iter().zip(d.tensors) {
        if policy.store.name(id) != name {
            return Err(Error::DimInconsistency(format!("tensor `{name}` where `{}` expected", policy.store.name(id))));
        }
        policy.store.set(id, t)?;
    }
    Ok(())
}

/// Rebuilds the policy described by the checkpoint.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Policy> {
    let d = decode(bytes)?;
    let mut policy = Policy::new(d.config.clone(), 0)?;
    install(&mut policy, d)?;
    Ok(policy)
}

/// Loads parameters into a policy built from `config`; fails with
/// [`Error::IncompatibleArchitecture`] when the layouts differ.
pub fn decode_checkpoint_for(config: &PolicyConfig, bytes: &[u8]) -> Result<Policy> {
    let d = decode(bytes)?;
    let mut policy = Policy::new(config.clone(), 0)?;
    install(&mut policy, d)?;
    Ok(policy)
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(policy)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    decode_checkpoint(&fs::read(path)?)
}

pub fn load_checkpoint_for(config: &PolicyConfig, path: &Path) -> Result<Policy> {
    decode_checkpoint_for(config, &fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Variant;

    #[test]
    fn round_trip_is_exact() {
        let p = Policy::new(PolicyConfig::default().with_variant(Variant::EmaTsDwt), 4).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        let q = decode_checkpoint(&bytes).unwrap();
        assert_eq!(q.config, p.config);
        assert!(p.store.iter().zip(q.store.iter()).all(|(a, b)| a == b));
        assert_eq!(encode_checkpoint(&q).unwrap(), bytes);
    }

    #[test]
    fn rejects_other_architectures_and_corruption() {
        let p = Policy::new(PolicyConfig::default().with_variant(Variant::Baseline), 0).unwrap();
        let bytes = encode_checkpoint(&p).unwrap();
        let other = PolicyConfig::default().with_variant(Variant::Ema);
        assert!(matches!(decode_checkpoint_for(&other, &bytes), Err(Error::IncompatibleArchitecture { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::TruncatedPayload { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::DimInconsistency(_))));
    }
}
