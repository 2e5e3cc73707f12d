//! Token interface and fixed embeddings.

use crate::error::{shape_err, Result};
use crate::numerics::Tensor;

/// `[H, W] -> [(H/p)·(W/p), p²]`, patches and pixels both row-major.
pub fn patchify(map: &Tensor, p: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return shape_err(format!("patchify expects a 2-D map, got {:?}", map.shape()));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return shape_err(format!("{h}x{w} map not divisible by patch {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..p {
                let start = (pr * p + r) * w + pc * p;
                out.extend_from_slice(&map.data()[start..start + p]);
            }
        }
    }
    Tensor::new(&[gh * gw, p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, p: usize, h: usize, w: usize) -> Result<Tensor> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return shape_err(format!("{h}x{w} map not divisible by patch {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    if tokens.shape() != [gh * gw, p * p] {
        return shape_err(format!(
            "unpatchify expects [{}, {}], got {:?}",
            gh * gw,
            p * p,
            tokens.shape()
        ));
    }
    let mut out = Tensor::zeros(&[h, w]);
    for pr in 0..gh {
        for pc in 0..gw {
            let tok = tokens.row(pr * gw + pc);
            for r in 0..p {
                let start = (pr * p + r) * w + pc * p;
                out.data_mut()[start..start + p].copy_from_slice(&tok[r * p..(r + 1) * p]);
            }
        }
    }
    Ok(out)
}

/// `[sin(t·ω_k) …, cos(t·ω_k) …]` with `ω_k = 10000^(−2k/d)`, `k < d/2`.
/// An odd `d` leaves the last entry zero.
pub fn timestep_sinusoid(t: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for k in 0..half {
        let omega = 10000f64.powf(-2.0 * k as f64 / d as f64);
        out[k] = (t * omega).sin();
        out[half + k] = (t * omega).cos();
    }
    out
}

/// 2-D sin/cos table: the first half of the channels encodes the row, the
/// second half the column.
pub fn sincos_2d(gh: usize, gw: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = Tensor::zeros(&[gh * gw, d]);
    for r in 0..gh {
        for c in 0..gw {
            let row = out.row_mut(r * gw + c);
            row[..half].copy_from_slice(&timestep_sinusoid(r as f64, half));
            row[half..2 * half].copy_from_slice(&timestep_sinusoid(c as f64, half));
        }
    }
    out
}
