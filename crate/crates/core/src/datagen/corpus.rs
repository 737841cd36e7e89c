//! On-disk training corpus: one `.rdns` file per sample plus `manifest.json`.
//!
//! Sample layout (little-endian): `"RDNS"`, version `u32`, six tensors (five
//! blurry frames, then the sharp frame) each as `c, h, w: u32` followed by
//! `c * h * w` `f32` values, then a `u32` byte length and the provenance JSON.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::forge::{make_samples, ForgeConfig, ForgeSummary, Provenance, SkippedClip, TrainingSample, FRAMES_PER_SAMPLE};

pub const SAMPLE_MAGIC: &[u8; 4] = b"RDNS";
pub const SAMPLE_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: ForgeConfig,
    pub samples: Vec<String>,
    pub skipped: Vec<SkippedClip>,
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:06}.rdns")
}

pub fn encode_sample(sample: &TrainingSample) -> Result<Vec<u8>> {
    if sample.blurry.len() != FRAMES_PER_SAMPLE {
        return Err(Error::Shape {
            op: "encode_sample",
            dim: "blurry frames",
            got: sample.blurry.len(),
            expected: FRAMES_PER_SAMPLE,
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    for t in sample.blurry.iter().chain(std::iter::once(&sample.sharp)) {
        let [n, c, h, w] = t.shape();
        if n != 1 {
            return Err(Error::invalid("encode_sample", "frames must have batch size 1"));
        }
        for d in [c, h, w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&sample.provenance)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corpus(format!("sample truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_sample(bytes: &[u8]) -> Result<TrainingSample> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(4)? != SAMPLE_MAGIC {
        return Err(Error::Corpus("not a sample file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != SAMPLE_VERSION {
        return Err(Error::Corpus(format!(
            "sample format version {version} is not supported (expected {SAMPLE_VERSION})"
        )));
    }
    let mut frames = Vec::with_capacity(FRAMES_PER_SAMPLE + 1);
    for _ in 0..=FRAMES_PER_SAMPLE {
        let (c, h, w) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
        let len = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Corpus("tensor dimensions overflow".into()))?;
        let raw = cur.take(len.checked_mul(4).ok_or_else(|| Error::Corpus("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        frames.push(Tensor::new([1, c, h, w], data)?);
    }
    let json_len = cur.u32()? as usize;
    let provenance: Provenance = serde_json::from_slice(cur.take(json_len)?)?;
    if cur.pos != bytes.len() {
        return Err(Error::Corpus(format!("{} trailing bytes after sample", bytes.len() - cur.pos)));
    }
    let sharp = frames.pop().expect("six frames");
    if frames.iter().any(|f| f.shape() != sharp.shape()) {
        return Err(Error::Corpus("sample frames differ in shape".into()));
    }
    Ok(TrainingSample {
        blurry: frames,
        sharp,
        provenance,
    })
}

pub fn write_sample(path: &Path, sample: &TrainingSample) -> Result<()> {
    let bytes = encode_sample(sample)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<TrainingSample> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes).map_err(|e| match e {
        Error::Corpus(msg) => Error::Corpus(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Forges every clip under `input` into a corpus directory `out`.
pub fn forge_corpus(input: &Path, out: &Path, cfg: &ForgeConfig) -> Result<ForgeSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut names = Vec::new();
    let summary = make_samples(input, cfg, |s| {
        let name = sample_file_name(names.len());
        write_sample(&out.join(&name), &s)?;
        names.push(name);
        Ok(())
    })?;
    let manifest = Manifest {
        version: SAMPLE_VERSION,
        config: cfg.clone(),
        samples: names,
        skipped: summary.skipped.clone(),
    };
    let path = out.join(MANIFEST_NAME);
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// A loaded corpus, samples in manifest order.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<TrainingSample>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        let samples = manifest
            .samples
            .iter()
            .map(|name| read_sample(&dir.join(name)))
            .collect::<Result<Vec<_>>>()?;
        if samples.is_empty() {
            return Err(Error::Corpus(format!("corpus {} has no samples", dir.display())));
        }
        Ok(Corpus {
            dir: dir.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::forge::CropRect;

    fn sample() -> TrainingSample {
        let f = |k: usize| Tensor::from_fn([1, 3, 4, 4], |[_, c, y, x]| (k + c + y * 4 + x) as f32 / 40.0);
        TrainingSample {
            blurry: (0..5).map(f).collect(),
            sharp: f(9),
            provenance: Provenance {
                source: "clip".into(),
                frame_index: 12,
                crop: CropRect { y: 1, x: 2, h: 4, w: 4 },
                downscale: 2,
                l: 20,
                n: 40,
                psf_sizes: vec![7, 11, 15, 7, 7],
                psf_seeds: vec![1, 2, 3, 4, u64::MAX],
            },
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let s = sample();
        let bytes = encode_sample(&s).unwrap();
        assert_eq!(decode_sample(&bytes).unwrap(), s);
    }

    #[test]
    fn corrupt_samples_rejected() {
        let bytes = encode_sample(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_sample(&bad).unwrap_err().to_string().contains("magic"));
        assert!(decode_sample(&bytes[..bytes.len() - 3]).unwrap_err().to_string().contains("truncated"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_sample(&long).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(decode_sample(&v2).unwrap_err().to_string().contains("version"));
    }
}
