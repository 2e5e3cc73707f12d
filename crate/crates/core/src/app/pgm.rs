//! 8-bit binary PGM export and the raw `f32` sidecar.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `P5` image of a `[0, 1]` map, each pixel `round(255 · clamp(v))`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::Shape(format!("pgm needs a 2-D map, got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
    );
    Ok(out)
}

/// Map in `[0, 1]` from a `P5` file with maxval 255.
pub fn decode_pgm(buf: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < buf.len() && buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&buf[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary greymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let data = &buf[pos + 1..];
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Tensor::new(&[h, w], data.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Row-major little-endian `f32` values, no header.
pub fn encode_f32(map: &Tensor) -> Vec<u8> {
    map.data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

pub fn decode_f32(buf: &[u8], h: usize, w: usize) -> Result<Tensor> {
    if buf.len() != 4 * h * w {
        return Err(Error::Format(format!(
            "f32 sidecar holds {} bytes, expected {}",
            buf.len(),
            4 * h * w
        )));
    }
    Tensor::new(
        &[h, w],
        buf.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_pixels() {
        let mut m = Tensor::zeros(&[24, 40]);
        m.data_mut()[0] = 1.0;
        m.data_mut()[1] = 0.5;
        m.data_mut()[2] = 1.7;
        m.data_mut()[3] = -0.2;
        let buf = encode_pgm(&m).unwrap();
        assert!(buf.starts_with(b"P5\n40 24\n255\n"));
        let px = &buf[13..];
        assert_eq!(px.len(), 960);
        // 127.5 rounds away from zero
        assert_eq!(&px[..5], &[255, 128, 255, 0, 0]);
        let back = decode_pgm(&buf).unwrap();
        assert_eq!(back.shape(), &[24, 40]);
        assert_eq!(back.data()[1], 128.0 / 255.0);
    }

    #[test]
    fn pgm_rejects_garbage() {
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1").is_err());
    }

    #[test]
    fn sidecar_roundtrip() {
        let m = Tensor::new(&[2, 3], vec![0.0, 0.1, 0.25, 1.0, 0.3, 0.999]).unwrap();
        let back = decode_f32(&encode_f32(&m), 2, 3).unwrap();
        assert_eq!(back, m.to_f32_precision());
        assert!(decode_f32(&[0; 7], 2, 3).is_err());
    }
}
