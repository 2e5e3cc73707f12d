//! Binary sample records and split manifests.
//!
//! Record layout (little endian):
//!
//! ```text
//! "TAVS" | version: u16
//! 4 × array: rank: u32 | dims: rank × u32 | count: u32 | count × f32
//!            (visual, audio, text, gt_map)
//! fixations: count: u32 | count × (row: u32, col: u32)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{AudioFeatures, DatasetSample, TextFeatures, VisualFeatures};
use crate::numerics::Tensor;

pub const RECORD_MAGIC: &[u8; 4] = b"TAVS";
pub const RECORD_VERSION: u16 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32_array(out: &mut Vec<u8>, t: &Tensor) {
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    put_u32(out, t.len() as u32);
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Cursor over a byte buffer with format errors on truncation.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated input: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32_array(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = self.u32()? as usize;
        if count != dims.iter().product::<usize>() {
            return Err(Error::Format(format!("count {count} does not match dims {dims:?}")));
        }
        let bytes = self.take(count * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(&dims, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn encode_record(s: &DatasetSample) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RECORD_MAGIC);
    put_u16(&mut out, RECORD_VERSION);
    put_f32_array(&mut out, &s.visual.grid);
    put_f32_array(&mut out, &s.audio.tokens);
    put_f32_array(&mut out, &s.text.tokens);
    put_f32_array(&mut out, &s.gt_map);
    put_u32(&mut out, s.fixations.len() as u32);
    for &(r, c) in &s.fixations {
        put_u32(&mut out, r as u32);
        put_u32(&mut out, c as u32);
    }
    out
}

pub fn decode_record(buf: &[u8]) -> Result<DatasetSample> {
    let mut r = Reader::new(buf);
    if r.take(4)? != RECORD_MAGIC {
        return Err(Error::Format("bad record magic".into()));
    }
    let version = r.u16()?;
    if version != RECORD_VERSION {
        return Err(Error::Format(format!("unsupported record version {version}")));
    }
    let visual = VisualFeatures::new(r.f32_array()?)?;
    let audio = AudioFeatures::new(r.f32_array()?)?;
    let text = TextFeatures::new(r.f32_array()?)?;
    let gt_map = r.f32_array()?;
    if gt_map.rank() != 2 {
        return Err(Error::Format("ground truth must be rank 2".into()));
    }
    let n = r.u32()? as usize;
    let (h, w) = (gt_map.shape()[0], gt_map.shape()[1]);
    let mut fixations = Vec::with_capacity(n);
    for _ in 0..n {
        let p = (r.u32()? as usize, r.u32()? as usize);
        if p.0 >= h || p.1 >= w {
            return Err(Error::Format(format!("fixation {p:?} outside {h}x{w}")));
        }
        fixations.push(p);
    }
    if !r.finished() {
        return Err(Error::Format("trailing bytes after record".into()));
    }
    Ok(DatasetSample {
        visual,
        audio,
        text,
        gt_map,
        fixations,
    })
}

pub fn record_file_name(index: usize) -> String {
    format!("{index:06}.tavs")
}

pub fn write_record(path: &Path, s: &DatasetSample) -> Result<()> {
    fs::write(path, encode_record(s)).map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<DatasetSample> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_record(&buf)
}

pub fn write_manifest(split_dir: &Path, files: &[String]) -> Result<()> {
    let path = split_dir.join(MANIFEST_NAME);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for name in files {
        writeln!(f, "{name}").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Record paths listed in a split's manifest, in order.
pub fn read_manifest(split_dir: &Path) -> Result<Vec<PathBuf>> {
    let path = split_dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| split_dir.join(l))
        .collect())
}

pub fn load_split(split_dir: &Path) -> Result<Vec<DatasetSample>> {
    read_manifest(split_dir)?
        .iter()
        .map(|p| read_record(p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_indexed, BlobWorldConfig, SyntheticEncoders};

    #[test]
    fn record_roundtrip_is_lossless() {
        let cfg = BlobWorldConfig::default();
        let enc = SyntheticEncoders::new(&cfg.features).unwrap();
        let s = generate_indexed(0, 0, &enc, &cfg).unwrap();
        let bytes = encode_record(&s);
        assert_eq!(&bytes[..4], b"TAVS");
        let back = decode_record(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_record(&back), bytes);
    }

    #[test]
    fn truncated_record_is_format_error() {
        let cfg = BlobWorldConfig::default();
        let enc = SyntheticEncoders::new(&cfg.features).unwrap();
        let bytes = encode_record(&generate_indexed(0, 1, &enc, &cfg).unwrap());
        for cut in [3, 6, 40, bytes.len() - 1] {
            assert!(matches!(decode_record(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_record(&bad).is_err());
    }
}
