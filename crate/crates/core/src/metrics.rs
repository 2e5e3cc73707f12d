//! Saliency metrics: SIM, CC, NSS and AUC-Judd, plus the per-sample table.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn check_nonnegative(p: &Tensor, what: &str) -> Result<f64> {
    if !p.all_finite() || p.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Metric(format!("{what} must be finite and nonnegative")));
    }
    let mass = p.sum();
    if mass <= 0.0 {
        return Err(Error::Metric(format!("{what} has zero mass")));
    }
    Ok(mass)
}

/// Histogram intersection of the two sum-normalised maps.
pub fn sim(p: &Tensor, g: &Tensor) -> Result<f64> {
    p.check_same_shape(g)?;
    let mp = check_nonnegative(p, "prediction")?;
    let mg = check_nonnegative(g, "ground truth")?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (a, b) in p.data().iter().zip(g.data()) {
        let (a, b) = (a / mp, b / mg);
        inter += a.min(b);
        sp += a;
        sg += b;
    }
    // both sums are 1 up to rounding; dividing makes SIM(g, g) exactly 1
    Ok(inter / sp.max(sg))
}

/// Population mean and variance; the variance of a constant map is exactly
/// zero even when the summed mean rounds off the constant.
fn mean_var(p: &Tensor) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = p.sum() / n;
    let d = p.data();
    if d.iter().all(|&v| v == d[0]) {
        return (d[0], 0.0);
    }
    let var = p.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Pearson correlation over all pixels.
pub fn cc(p: &Tensor, g: &Tensor) -> Result<f64> {
    p.check_same_shape(g)?;
    let (mp, vp) = mean_var(p);
    let (mg, vg) = mean_var(g);
    if vp == 0.0 || vg == 0.0 {
        return Err(Error::Metric("correlation of a constant map".into()));
    }
    let cov = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(a, b)| (a - mp) * (b - mg))
        .sum::<f64>()
        / p.len() as f64;
    // sqrt(v * v) == v exactly, so CC(g, g) is exactly 1
    Ok((cov / (vp * vg).sqrt()).clamp(-1.0, 1.0))
}

fn check_fixations(p: &Tensor, fix: &[(usize, usize)]) -> Result<()> {
    if p.rank() != 2 {
        return Err(Error::Metric(format!("map must be 2-D, got {:?}", p.shape())));
    }
    if fix.is_empty() {
        return Err(Error::Metric("empty fixation set".into()));
    }
    let (h, w) = (p.shape()[0], p.shape()[1]);
    if let Some(f) = fix.iter().find(|f| f.0 >= h || f.1 >= w) {
        return Err(Error::Metric(format!("fixation {f:?} outside {h}x{w}")));
    }
    Ok(())
}

/// Mean z-scored saliency (population std) at the fixations.
pub fn nss(p: &Tensor, fix: &[(usize, usize)]) -> Result<f64> {
    check_fixations(p, fix)?;
    let (mean, var) = mean_var(p);
    let std = var.sqrt();
    if var == 0.0 {
        return Err(Error::Metric("NSS of a constant map".into()));
    }
    Ok(fix.iter().map(|&(r, c)| (p.at2(r, c) - mean) / std).sum::<f64>() / fix.len() as f64)
}

/// ROC area with fixations (duplicates counted) as positives, non-fixated
/// pixels as negatives and thresholds at the fixated values.
pub fn auc_judd(p: &Tensor, fix: &[(usize, usize)]) -> Result<f64> {
    check_fixations(p, fix)?;
    let w = p.shape()[1];
    let mut fixated = vec![false; p.len()];
    for &(r, c) in fix {
        fixated[r * w + c] = true;
    }
    let mut neg: Vec<f64> = p
        .data()
        .iter()
        .zip(&fixated)
        .filter(|(_, &f)| !f)
        .map(|(&v, _)| v)
        .collect();
    if neg.is_empty() {
        return Err(Error::Metric("every pixel is fixated".into()));
    }
    let mut pos: Vec<f64> = fix.iter().map(|&(r, c)| p.at2(r, c)).collect();
    let desc = |a: &f64, b: &f64| b.total_cmp(a);
    pos.sort_by(desc);
    neg.sort_by(desc);
    let mut thresholds = pos.clone();
    thresholds.dedup();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let mut area = 0.0;
    let (mut x0, mut y0) = (0.0, 0.0);
    for &tau in &thresholds {
        let tp = pos.partition_point(|&v| v >= tau) as f64 / np;
        let fp = neg.partition_point(|&v| v >= tau) as f64 / nn;
        area += (fp - x0) * (tp + y0) / 2.0;
        (x0, y0) = (fp, tp);
    }
    area += (1.0 - x0) * (1.0 + y0) / 2.0;
    Ok(area)
}

/// Metrics of one prediction; `None` marks a degenerate input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricScores {
    pub sim: Option<f64>,
    pub cc: Option<f64>,
    pub nss: Option<f64>,
    pub auc_j: Option<f64>,
}

pub fn evaluate(pred: &Tensor, gt: &Tensor, fix: &[(usize, usize)]) -> Result<MetricScores> {
    pred.check_same_shape(gt)?;
    Ok(MetricScores {
        sim: sim(pred, gt).ok(),
        cc: cc(pred, gt).ok(),
        nss: nss(pred, fix).ok(),
        auc_j: auc_judd(pred, fix).ok(),
    })
}

/// Column means over the non-degenerate entries.
pub fn mean_scores(rows: &[MetricScores]) -> MetricScores {
    let mean = |f: fn(&MetricScores) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    MetricScores {
        sim: mean(|r| r.sim),
        cc: mean(|r| r.cc),
        nss: mean(|r| r.nss),
        auc_j: mean(|r| r.auc_j),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "degenerate".to_string(), |x| format!("{x:.6}"))
}

/// `sample_id,SIM,CC,NSS,AUCJ` rows followed by a `mean` row.
pub fn metrics_csv(rows: &[(String, MetricScores)]) -> String {
    let mut out = String::from("sample_id,SIM,CC,NSS,AUCJ\n");
    for (id, s) in rows {
        let _ = writeln!(out, "{id},{},{},{},{}", cell(s.sim), cell(s.cc), cell(s.nss), cell(s.auc_j));
    }
    let scores: Vec<MetricScores> = rows.iter().map(|r| r.1).collect();
    let m = mean_scores(&scores);
    let _ = writeln!(out, "mean,{},{},{},{}", cell(m.sim), cell(m.cc), cell(m.nss), cell(m.auc_j));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Judd ROC by direct counting at each fixated value.
    fn auc_oracle(p: &Tensor, fix: &[(usize, usize)]) -> f64 {
        let w = p.shape()[1];
        let is_fix = |i: usize| fix.iter().any(|&(r, c)| r * w + c == i);
        let mut taus: Vec<f64> = fix.iter().map(|&(r, c)| p.at2(r, c)).collect();
        taus.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut pts = vec![(0.0, 0.0)];
        for tau in taus {
            let tp = fix.iter().filter(|&&(r, c)| p.at2(r, c) >= tau).count() as f64 / fix.len() as f64;
            let (mut above, mut total) = (0.0, 0.0);
            for i in 0..p.len() {
                if !is_fix(i) {
                    total += 1.0;
                    if p.data()[i] >= tau {
                        above += 1.0;
                    }
                }
            }
            pts.push((above / total, tp));
        }
        pts.push((1.0, 1.0));
        pts.windows(2).map(|s| (s[1].0 - s[0].0) * (s[1].1 + s[0].1) / 2.0).sum()
    }

    #[test]
    fn sim_examples() {
        let g = t(&[&[0.2, 0.7], &[0.1, 0.0]]);
        assert!((sim(&g, &g).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(sim(&t(&[&[1.0, 0.0]]), &t(&[&[0.0, 3.0]])).unwrap(), 0.0);
        assert!((sim(&t(&[&[0.5, 0.5]]), &t(&[&[0.8, 0.2]])).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(sim(&Tensor::zeros(&[1, 2]), &g.slice_rows(0, 1)), Err(Error::Metric(_))));
    }

    #[test]
    fn cc_examples() {
        let g = t(&[&[1.0, 2.0], &[3.0, 5.0]]);
        assert!((cc(&g, &g).unwrap() - 1.0).abs() < 1e-15);
        assert!((cc(&g.map(|v| 3.0 * v + 7.0), &g).unwrap() - 1.0).abs() < 1e-12);
        // hand evaluation: p = [1,0,0,1], g = [1,2,3,5] gives cov 1/8,
        // std(p) 1/2, var(g) 35/16
        let p = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let want = 0.125 / (0.5 * (35.0f64 / 16.0).sqrt());
        assert!((cc(&p, &g).unwrap() - want).abs() < 1e-15);
        assert!(matches!(cc(&Tensor::full(&[2, 2], 1.0), &g), Err(Error::Metric(_))));
        // the summed mean of this constant is off by an ulp
        let flat = Tensor::full(&[24, 40], 128.0 / 255.0);
        assert_ne!(flat.sum() / 960.0, 128.0 / 255.0);
        let g = Tensor::new(&[24, 40], (0..960).map(|i| i as f64).collect()).unwrap();
        assert!(cc(&flat, &g).is_err());
        assert!(nss(&flat, &[(0, 0)]).is_err());
    }

    #[test]
    fn nss_examples() {
        // mean-valued pixels score zero
        let p = t(&[&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0], &[2.0, 1.0, 0.0]]);
        assert_eq!(nss(&p, &[(0, 1), (1, 1), (2, 1)]).unwrap(), 0.0);
        // unique max
        let q = t(&[&[0.0, 0.0, 0.0], &[0.0, 9.0, 0.0], &[0.0, 0.0, 0.0]]);
        let (mean, std) = (1.0, (8.0f64).sqrt());
        assert!((nss(&q, &[(1, 1), (1, 1)]).unwrap() - (9.0 - mean) / std).abs() < 1e-12);
        // 3×3 hand case
        let r = t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let std = (60.0f64 / 9.0).sqrt();
        let want = ((9.0 - 5.0) / std + (1.0 - 5.0) / std + (6.0 - 5.0) / std) / 3.0;
        assert!((nss(&r, &[(2, 2), (0, 0), (1, 2)]).unwrap() - want).abs() < 1e-12);
        assert!(matches!(nss(&Tensor::full(&[3, 3], 2.0), &[(0, 0)]), Err(Error::Metric(_))));
        assert!(nss(&r, &[]).is_err());
        assert!(nss(&r, &[(3, 0)]).is_err());
    }

    #[test]
    fn auc_examples() {
        let mut rng = SeededRng::new(0);
        let p = Tensor::new(&[10, 10], (0..100).map(|_| rng.uniform()).collect()).unwrap();
        let mut idx: Vec<usize> = (0..100).collect();
        idx.sort_by(|&a, &b| p.data()[b].partial_cmp(&p.data()[a]).unwrap());
        let top: Vec<(usize, usize)> = idx[..5].iter().map(|&i| (i / 10, i % 10)).collect();
        assert!(auc_judd(&p, &top).unwrap() >= 0.99);
        assert_eq!(auc_judd(&Tensor::full(&[4, 4], 0.3), &[(0, 0), (2, 3)]).unwrap(), 0.5);
        let all: Vec<(usize, usize)> = (0..4).map(|i| (i / 2, i % 2)).collect();
        assert!(matches!(auc_judd(&Tensor::full(&[2, 2], 1.0), &all), Err(Error::Metric(_))));
    }

    #[test]
    fn oracles_on_random_maps() {
        let mut rng = SeededRng::new(1);
        for _ in 0..200 {
            let p = Tensor::new(&[5, 5], (0..25).map(|_| rng.uniform()).collect()).unwrap();
            let fix: Vec<(usize, usize)> = (0..3).map(|_| (rng.below(5), rng.below(5))).collect();
            assert!((auc_judd(&p, &fix).unwrap() - auc_oracle(&p, &fix)).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_layout() {
        let g = t(&[&[0.0, 1.0], &[0.5, 0.2]]);
        let fix = [(0, 1)];
        let rows = vec![
            ("000000".to_string(), evaluate(&g, &g, &fix).unwrap()),
            ("000001".to_string(), evaluate(&Tensor::full(&[2, 2], 0.4), &g, &fix).unwrap()),
        ];
        let csv = metrics_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "sample_id,SIM,CC,NSS,AUCJ");
        assert!(lines[2].contains("degenerate"));
        assert!(lines[3].starts_with("mean,"));
    }

    proptest! {
        #[test]
        fn symmetry_and_invariances(seed in 0u64..5000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let mut rng = SeededRng::new(seed);
            let p = Tensor::new(&[6, 7], (0..42).map(|_| rng.uniform()).collect()).unwrap();
            let g = Tensor::new(&[6, 7], (0..42).map(|_| rng.uniform()).collect()).unwrap();
            let fix: Vec<(usize, usize)> = (0..4).map(|_| (rng.below(6), rng.below(7))).collect();
            prop_assert!((sim(&p, &g).unwrap() - sim(&g, &p).unwrap()).abs() < 1e-12);
            prop_assert!((cc(&p, &g).unwrap() - cc(&g, &p).unwrap()).abs() < 1e-12);
            let affine = p.map(|v| a * v + b);
            prop_assert!((cc(&affine, &g).unwrap() - cc(&p, &g).unwrap()).abs() < 1e-9);
            prop_assert!((nss(&affine, &fix).unwrap() - nss(&p, &fix).unwrap()).abs() < 1e-9);
            let cubed = p.map(|v| v * v * v);
            prop_assert!((auc_judd(&cubed, &fix).unwrap() - auc_judd(&p, &fix).unwrap()).abs() < 1e-12);
            let s = sim(&p, &g).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&s));
        }
    }
}
