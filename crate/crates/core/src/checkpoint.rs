//! Binary checkpoint format.
//!
//! ```text
//! "FLPS" | version u32 | layer count u32
//! per layer: in_dim u32 | out_dim u32 | activation code u32
//! per layer: weights (row-major f64) | biases (f64)
//! pattern bit length u32 | packed pattern bytes (LSB first)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{FlpsError, Result};
use crate::netcore::{Activation, Arch, LayerParams, LayerSpec, ParamSet};
use crate::sparsity::SparsePattern;

pub const MAGIC: &[u8; 4] = b"FLPS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Arch,
    pub params: ParamSet,
    pub pattern: Option<SparsePattern>,
}

pub fn encode(arch: &Arch, params: &ParamSet, pattern: Option<&SparsePattern>) -> Result<Vec<u8>> {
    params.check_shape(arch)?;
    let mut out = Vec::with_capacity(16 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.layers().len() as u32).to_le_bytes());
    for l in arch.layers() {
        out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        out.extend_from_slice(&l.activation.code().to_le_bytes());
    }
    for l in &params.layers {
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match pattern {
        Some(p) => {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(&p.pack());
        }
        None => out.extend_from_slice(&0u32.to_le_bytes()),
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| FlpsError::Parse {
            path: self.path.to_string(),
            offset: self.pos as u64,
            msg: format!("expected {n} more bytes, {} remain", self.bytes.len() - self.pos),
        })?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fail(&self, msg: impl Into<String>) -> FlpsError {
        FlpsError::Parse { path: self.path.to_string(), offset: self.pos as u64, msg: msg.into() }
    }
}

pub fn decode(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(FlpsError::Parse { path: path.into(), offset: 0, msg: "missing FLPS magic".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let mut specs = Vec::with_capacity(n);
    for _ in 0..n {
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let code = r.u32()?;
        let activation = Activation::from_code(code).ok_or_else(|| r.fail(format!("unknown activation code {code}")))?;
        specs.push(LayerSpec { in_dim, out_dim, activation });
    }
    let arch = Arch::new(specs).map_err(|e| r.fail(e.to_string()))?;
    let mut layers = Vec::with_capacity(n);
    for spec in arch.layers() {
        let weights = (0..spec.in_dim * spec.out_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let bias = (0..spec.out_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(LayerParams { in_dim: spec.in_dim, out_dim: spec.out_dim, weights, bias });
    }
    let bits = r.u32()? as usize;
    let pattern = if bits == 0 {
        None
    } else {
        let packed = r.take(bits.div_ceil(8))?;
        Some(SparsePattern::unpack(packed, bits)?)
    };
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { arch, params: ParamSet { layers }, pattern })
}

pub fn write(path: &Path, arch: &Arch, params: &ParamSet, pattern: Option<&SparsePattern>) -> Result<()> {
    fs::write(path, encode(arch, params, pattern)?).map_err(|e| FlpsError::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| FlpsError::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let arch = Arch::mlp(2, &[3], 2).unwrap();
        let bytes = encode(&arch, &ParamSet::zeros(&arch), None).unwrap();
        assert_eq!(&bytes[0..4], b"FLPS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // 12 header + 2 * 12 layer headers + 17 params * 8 + 4 pattern length
        assert_eq!(bytes.len(), 12 + 24 + 17 * 8 + 4);
    }

    #[test]
    fn truncated_and_corrupt_inputs_fail() {
        let arch = Arch::mlp(2, &[3], 2).unwrap();
        let bytes = encode(&arch, &ParamSet::zeros(&arch), None).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1], "t").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, "t").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra, "t").is_err());
    }

    proptest! {
        #[test]
        fn bit_exact_roundtrip(seed in 0u64..10_000, hidden in prop::collection::vec(1usize..6, 0..3), with_pattern: bool) {
            let arch = Arch::mlp(3, &hidden, 2).unwrap();
            let mut rng = stream(seed, Purpose::Verify, 0, 0);
            let mut params = ParamSet::init(&arch, &mut rng);
            for (i, v) in params.values_mut().enumerate() {
                if i % 3 == 0 {
                    *v = f64::from_bits(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64) % 1e6;
                }
            }
            let j = arch.unit_count();
            let pattern = (with_pattern && j > 0).then(|| SparsePattern { bits: (0..j).map(|i| (seed >> (i % 60)) & 1 == 1).collect() });
            let bytes = encode(&arch, &params, pattern.as_ref()).unwrap();
            let ck = decode(&bytes, "mem").unwrap();
            prop_assert_eq!(&ck.arch, &arch);
            prop_assert_eq!(ck.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(ck.pattern, pattern);
        }
    }
}
