//! `RDN1` checkpoint files.
//!
//! Header: magic `RDN1`, format version, width multiplier as `num`, `den`, and
//! the number of per-step batchnorm statistic sets `S` (all u32 LE), followed by
//! the container layout in [`super::container`]. Entries are `<layer>.weight`,
//! `<layer>.bias`, `<layer>.bn.{gamma,beta}` and `<layer>.bn.{running_mean,running_var}.<k>`
//! for `k` in `0..S`, in layer order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::container::{read_container, write_container, Entry};
use super::params::{RdnParams, WidthMultiplier};

pub const MAGIC: &[u8; 4] = b"RDN1";
pub const VERSION: u32 = 2;
/// Sanity bound on the per-step statistic count read from a header.
const MAX_BN_STEPS: usize = 1024;

fn vec_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.f64() as f32).collect()
}

fn entries<T: Scalar>(p: &RdnParams<T>) -> Vec<Entry> {
    let mut out = Vec::new();
    for l in &p.layers {
        out.push(Entry {
            name: format!("{}.weight", l.name),
            dims: l.weight.shape().iter().map(|&d| d as u32).collect(),
            data: vec_f32(l.weight.data()),
        });
        let mut vector = |suffix: &str, v: &[T]| {
            out.push(Entry {
                name: format!("{}.{suffix}", l.name),
                dims: vec![v.len() as u32],
                data: vec_f32(v),
            })
        };
        if let Some(b) = &l.bias {
            vector("bias", b);
        }
        if let Some(bn) = &l.bn {
            vector("bn.gamma", &bn.gamma);
            vector("bn.beta", &bn.beta);
            for (k, r) in bn.running.iter().enumerate() {
                vector(&format!("bn.running_mean.{k}"), &r.mean);
                vector(&format!("bn.running_var.{k}"), &r.var);
            }
        }
    }
    out
}

/// Serialises parameters (stored as f32).
pub fn write_checkpoint<T: Scalar>(params: &RdnParams<T>) -> Vec<u8> {
    write_container(
        MAGIC,
        &[VERSION, params.width.num, params.width.den, params.bn_steps() as u32],
        &entries(params),
    )
}

/// Parses a checkpoint; the layer table must match the declared width exactly.
pub fn read_checkpoint(bytes: &[u8]) -> Result<RdnParams<f32>> {
    let (header, stored) = read_container(bytes, MAGIC, 4)?;
    if header[0] != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}, expected {VERSION}",
            header[0]
        )));
    }
    let width = WidthMultiplier::new(header[1], header[2])?;
    let steps = header[3] as usize;
    if steps == 0 || steps > MAX_BN_STEPS {
        return Err(Error::Checkpoint(format!(
            "batchnorm statistic set count {steps} is outside 1..={MAX_BN_STEPS}"
        )));
    }
    let mut params = RdnParams::<f32>::zeros(width)?;
    params.set_bn_steps(steps);
    let expected = entries(&params);
    if expected.len() != stored.len() {
        return Err(Error::Checkpoint(format!(
            "layer table has {} entries, width {width} needs {}",
            stored.len(),
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(&stored) {
        if want.name != got.name || want.dims != got.dims {
            return Err(Error::Checkpoint(format!(
                "layer table disagrees: found {} {:?}, expected {} {:?}",
                got.name, got.dims, want.name, want.dims
            )));
        }
    }

    let mut it = stored.into_iter().map(|e| e.data);
    let mut next = || it.next().expect("entry count checked");
    for l in &mut params.layers {
        l.weight = Tensor::new(l.weight.shape(), next())?;
        if let Some(b) = &mut l.bias {
            *b = next();
        }
        if let Some(bn) = &mut l.bn {
            bn.gamma = next();
            bn.beta = next();
            for r in &mut bn.running {
                r.mean = next();
                r.var = next();
            }
        }
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &RdnParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(params);
    // Write-then-rename so an interrupted save never clobbers a good file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RdnParams<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;

    fn sample() -> RdnParams<f32> {
        let mut p = init_params::<f32>("1/8".parse().unwrap(), 5).unwrap();
        p.set_bn_steps(3);
        p.layers[3].bn.as_mut().unwrap().running[2].var[0] = 0.25;
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let bytes = write_checkpoint(&p);
        assert_eq!(&bytes[..4], b"RDN1");
        let q = read_checkpoint(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(write_checkpoint(&q), bytes);
    }

    #[test]
    fn statistic_set_count_is_validated() {
        let mut bytes = write_checkpoint(&sample());
        bytes[16..20].copy_from_slice(&0u32.to_le_bytes());
        assert!(read_checkpoint(&bytes).is_err());
        let mut bytes = write_checkpoint(&sample());
        bytes[16..20].copy_from_slice(&2u32.to_le_bytes());
        let err = read_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("disagrees") || err.contains("entries"), "{err}");
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = write_checkpoint(&sample());
        bytes[0] = b'X';
        assert!(matches!(read_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = write_checkpoint(&sample());
        bytes[4] = 9;
        let err = read_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn truncation_rejected() {
        let bytes = write_checkpoint(&sample());
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(read_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn payload_corruption_fails_crc() {
        let mut bytes = write_checkpoint(&sample());
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        let err = read_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("CRC"), "{err}");
    }

    #[test]
    fn table_disagreement_rejected() {
        // Claim a different width than the stored tensors have.
        let mut bytes = write_checkpoint(&sample());
        bytes[12..16].copy_from_slice(&16u32.to_le_bytes());
        let err = read_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("disagrees") || err.contains("entries"), "{err}");
    }
}
