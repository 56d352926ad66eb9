//! Report files: metric table, height scatter, KDE density grid and
//! thresholded height-change histograms.

use std::path::Path;

use crate::error::Result;
use crate::train::EvalOutput;

/// Histogram bin width in meters.
pub const HIST_BIN: f64 = 0.5;
/// Values with `|Δh|` below this are left out of the histograms.
pub const HIST_THRESHOLD: f64 = 0.5;
/// Fixed histogram support `[-HIST_RANGE, HIST_RANGE)`; outliers go to the end bins.
pub const HIST_RANGE: f64 = 32.0;
pub const KDE_GRID: usize = 64;

/// Gaussian KDE evaluated on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeGrid {
    /// Cell centers along the ground-truth axis.
    pub xs: Vec<f64>,
    /// Cell centers along the prediction axis.
    pub ys: Vec<f64>,
    /// Row-major `density[iy][ix]`.
    pub density: Vec<Vec<f64>>,
    pub bandwidth: (f64, f64),
}

impl KdeGrid {
    /// Riemann sum of the density over the grid.
    pub fn mass(&self) -> f64 {
        if self.xs.len() < 2 || self.ys.len() < 2 {
            return 0.0;
        }
        let dx = self.xs[1] - self.xs[0];
        let dy = self.ys[1] - self.ys[0];
        self.density.iter().flatten().sum::<f64>() * dx * dy
    }
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Product-Gaussian KDE with per-axis Scott bandwidth `σ·n^(-1/6)`. The
/// grid spans each axis' data range padded by four bandwidths. Returns
/// `None` for fewer than two points.
pub fn kde_grid(points: &[(f64, f64)], size: usize) -> Option<KdeGrid> {
    if points.len() < 2 || size < 2 {
        return None;
    }
    let n = points.len() as f64;
    let factor = n.powf(-1.0 / 6.0);
    let bw = |sd: f64, lo: f64, hi: f64| {
        let b = sd * factor;
        if b > 0.0 {
            b
        } else {
            // a degenerate axis still gets a resolvable kernel
            1e-3 * (hi - lo).abs().max(1.0)
        }
    };
    let (_, sx) = mean_std(points.iter().map(|p| p.0));
    let (_, sy) = mean_std(points.iter().map(|p| p.1));
    let range = |f: fn(&(f64, f64)) -> f64| {
        points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let (x0, x1) = range(|p| p.0);
    let (y0, y1) = range(|p| p.1);
    let (hx, hy) = (bw(sx, x0, x1), bw(sy, y0, y1));
    let axis = |lo: f64, hi: f64, h: f64| -> Vec<f64> {
        let (a, b) = (lo - 4.0 * h, hi + 4.0 * h);
        let step = (b - a) / size as f64;
        (0..size).map(|i| a + (i as f64 + 0.5) * step).collect()
    };
    let xs = axis(x0, x1, hx);
    let ys = axis(y0, y1, hy);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * hx * hy * n);
    let kx: Vec<Vec<f64>> = points
        .iter()
        .map(|p| xs.iter().map(|x| (-0.5 * ((x - p.0) / hx).powi(2)).exp()).collect())
        .collect();
    let mut density = vec![vec![0.0; size]; size];
    for (p, kxp) in points.iter().zip(&kx) {
        for (iy, y) in ys.iter().enumerate() {
            let ky = (-0.5 * ((y - p.1) / hy).powi(2)).exp();
            if ky < 1e-300 {
                continue;
            }
            for (d, k) in density[iy].iter_mut().zip(kxp) {
                *d += ky * k;
            }
        }
    }
    density.iter_mut().flatten().for_each(|d| *d *= norm);
    Some(KdeGrid {
        xs,
        ys,
        density,
        bandwidth: (hx, hy),
    })
}

/// Fixed-width histogram over `[-HIST_RANGE, HIST_RANGE)` of values with
/// `|v| >= HIST_THRESHOLD`.
pub fn height_histogram(values: &[f64]) -> Vec<u64> {
    let bins = (2.0 * HIST_RANGE / HIST_BIN) as usize;
    let mut h = vec![0u64; bins];
    for &v in values {
        if v.abs() < HIST_THRESHOLD || !v.is_finite() {
            continue;
        }
        let b = ((v + HIST_RANGE) / HIST_BIN).floor();
        h[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    h
}

pub fn scatter_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("gt,pred\n");
    for (g, p) in points {
        s.push_str(&format!("{g},{p}\n"));
    }
    s
}

pub fn kde_csv(k: &KdeGrid) -> String {
    let mut s = format!("# bandwidth_gt={} bandwidth_pred={}\n", k.bandwidth.0, k.bandwidth.1);
    s.push_str("pred\\gt");
    for x in &k.xs {
        s.push_str(&format!(",{x}"));
    }
    s.push('\n');
    for (y, row) in k.ys.iter().zip(&k.density) {
        s.push_str(&format!("{y}"));
        for d in row {
            s.push_str(&format!(",{d}"));
        }
        s.push('\n');
    }
    s
}

pub fn histogram_csv(gt: &[u64], pred: &[u64]) -> String {
    let mut s = String::from("bin_lo,bin_hi,gt,pred\n");
    for (i, (g, p)) in gt.iter().zip(pred).enumerate() {
        let lo = -HIST_RANGE + i as f64 * HIST_BIN;
        s.push_str(&format!("{lo},{},{g},{p}\n", lo + HIST_BIN));
    }
    s
}

/// `(gt, pred)` pairs at pixels where either value reaches the histogram
/// threshold; enough to rebuild both histograms.
fn histogram_pairs(ev: &EvalOutput) -> Vec<(f64, f64)> {
    ev.gt_heights
        .iter()
        .zip(&ev.pred_heights)
        .filter(|(g, p)| g.abs() >= HIST_THRESHOLD || p.abs() >= HIST_THRESHOLD)
        .map(|(g, p)| (*g, *p))
        .collect()
}

fn write_plots(dir: &Path, scatter: &[(f64, f64)], heights: &[(f64, f64)]) -> Result<()> {
    let kde = match kde_grid(scatter, KDE_GRID) {
        Some(k) => kde_csv(&k),
        None => "# fewer than two change pixels\n".to_string(),
    };
    std::fs::write(dir.join("kde.csv"), kde)?;
    let gt: Vec<f64> = heights.iter().map(|p| p.0).collect();
    let pred: Vec<f64> = heights.iter().map(|p| p.1).collect();
    std::fs::write(dir.join("histogram.csv"), histogram_csv(&height_histogram(&gt), &height_histogram(&pred)))?;
    Ok(())
}

/// Writes `metrics.txt`, `metrics.csv`, `scatter.csv`, `heights.csv`,
/// `kde.csv` and `histogram.csv` into `out_dir`.
pub fn emit_report(ev: &EvalOutput, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("metrics.txt"), ev.report.to_text())?;
    std::fs::write(out_dir.join("metrics.csv"), ev.report.to_csv())?;
    std::fs::write(out_dir.join("scatter.csv"), scatter_csv(&ev.scatter))?;
    let heights = histogram_pairs(ev);
    std::fs::write(out_dir.join("heights.csv"), scatter_csv(&heights))?;
    write_plots(out_dir, &ev.scatter, &heights)
}

/// Recomputes `kde.csv` and `histogram.csv` of an evaluation directory from
/// its `scatter.csv` and `heights.csv`; returns the stored metrics table.
pub fn rebuild_report(dir: &Path) -> Result<String> {
    let read = |name: &str| -> Result<String> {
        std::fs::read_to_string(dir.join(name))
            .map_err(|e| crate::error::Error::data(format!("{}: {e}", dir.join(name).display())))
    };
    let scatter = parse_scatter(&read("scatter.csv")?)?;
    let heights = parse_scatter(&read("heights.csv")?)?;
    write_plots(dir, &scatter, &heights)?;
    read("metrics.txt")
}

/// Reads back a `gt,pred` file written by [`emit_report`].
pub fn parse_scatter(text: &str) -> Result<Vec<(f64, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| crate::error::Error::data(format!("bad scatter row {l:?}")))?;
            let p = |s: &str| s.parse::<f64>().map_err(|_| crate::error::Error::data(format!("bad number {s:?}")));
            Ok((p(a)?, p(b)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_threshold_and_edges() {
        let h = height_histogram(&[0.0, 0.49, -0.49, 0.5, -0.5, 100.0, -100.0]);
        assert_eq!(h.iter().sum::<u64>(), 4);
        assert_eq!(h[0], 1);
        assert_eq!(h[h.len() - 1], 1);
        assert_eq!(h[65], 1);
        assert_eq!(h[63], 1);
    }

    #[test]
    fn empty_scatter_has_only_a_header() {
        assert_eq!(scatter_csv(&[]), "gt,pred\n");
        assert!(kde_grid(&[], 8).is_none());
    }
}
