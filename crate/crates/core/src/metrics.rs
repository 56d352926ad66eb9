//! 2D change-classification and 3D height-change metrics.
//!
//! Split-level numbers pool confusion counts and error sums over every
//! pixel of every tile, so each pixel carries equal weight.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::loss::{ChangeMask, UNCHANGED};
use crate::tensor::{same_shape, Tensor};

/// Magnitudes below this are skipped by the relative error.
pub const REL_EPS: f64 = 1e-6;

/// Row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::dim(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= k || g >= k {
                return Err(Error::data(format!("label pair ({g}, {p}) out of range for {k} classes")));
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn class_counts(&self, c: usize) -> ClassCounts {
        let k = self.num_classes;
        let tp = self.counts[c * k + c];
        let row: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
        let col: u64 = (0..k).map(|g| self.counts[g * k + c]).sum();
        let (fp, fn_) = (col - tp, row - tp);
        ClassCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScore {
    pub iou: f64,
    pub f1: f64,
    /// The class occurs in neither prediction nor ground truth; IoU and F1
    /// are then 1 by convention.
    pub absent: bool,
}

pub fn scores_from_confusion(c: &Confusion) -> Vec<ClassScore> {
    (0..c.num_classes)
        .map(|k| {
            let ClassCounts { tp, fp, fn_, .. } = c.class_counts(k);
            if tp + fp + fn_ == 0 {
                ClassScore {
                    iou: 1.0,
                    f1: 1.0,
                    absent: true,
                }
            } else {
                ClassScore {
                    iou: tp as f64 / (tp + fp + fn_) as f64,
                    f1: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
                    absent: false,
                }
            }
        })
        .collect()
}

pub fn class_iou_f1(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<Vec<ClassScore>> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, gt)?;
    Ok(scores_from_confusion(&c))
}

/// Which classes the mean F1 runs over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum F1Average {
    #[default]
    AllClasses,
    ChangedOnly,
}

/// `(mIoU_ch, mF1)`: IoU averaged over changed classes, F1 over the
/// classes selected by `avg`.
pub fn aggregate_2d(scores: &[ClassScore], avg: F1Average) -> Result<(f64, f64)> {
    if scores.len() < 2 {
        return Err(Error::config("aggregate_2d needs at least 2 classes"));
    }
    let changed: Vec<&ClassScore> = scores.iter().enumerate().filter(|(c, _)| *c != UNCHANGED).map(|(_, s)| s).collect();
    let miou = changed.iter().map(|s| s.iou).sum::<f64>() / changed.len() as f64;
    let mf1 = match avg {
        F1Average::AllClasses => scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64,
        F1Average::ChangedOnly => changed.iter().map(|s| s.f1).sum::<f64>() / changed.len() as f64,
    };
    Ok((miou, mf1))
}

/// Running sums behind the height metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeightSums {
    pub n: u64,
    pub abs: f64,
    pub sq: f64,
    pub n_changed: u64,
    pub sq_changed: f64,
    pub rel_changed: f64,
    pub rel_count: u64,
    pub rel_skipped: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeightMetrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the change region is empty.
    pub crmse: Option<f64>,
    /// `None` when no change pixel has `|H| >= REL_EPS`.
    pub crel: Option<f64>,
    pub rel_skipped: u64,
}

impl HeightSums {
    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, mask: &ChangeMask) -> Result<()> {
        same_shape(pred, gt)?;
        if mask.total() != pred.numel() {
            return Err(Error::dim(format!("mask of {} for {} pixels", mask.total(), pred.numel())));
        }
        for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(&mask.mask) {
            let e = p - g;
            self.n += 1;
            self.abs += e.abs();
            self.sq += e * e;
            if m {
                self.n_changed += 1;
                self.sq_changed += e * e;
                if g.abs() < REL_EPS {
                    self.rel_skipped += 1;
                } else {
                    self.rel_changed += e.abs() / g.abs();
                    self.rel_count += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> HeightMetrics {
        let n = self.n.max(1) as f64;
        HeightMetrics {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            crmse: (self.n_changed > 0).then(|| (self.sq_changed / self.n_changed as f64).sqrt()),
            crel: (self.rel_count > 0).then(|| self.rel_changed / self.rel_count as f64),
            rel_skipped: self.rel_skipped,
        }
    }
}

pub fn height_metrics(pred: &Tensor, gt: &Tensor, mask: &ChangeMask) -> Result<HeightMetrics> {
    let mut s = HeightSums::default();
    s.add(pred, gt, mask)?;
    Ok(s.finish())
}

/// Per-class metric key suffixes: `un`, `n`, `d` for three classes,
/// `un`, `ch` for two, class indices otherwise.
pub fn class_keys(num_classes: usize) -> Vec<String> {
    match num_classes {
        2 => vec!["un".into(), "ch".into()],
        3 => vec!["un".into(), "n".into(), "d".into()],
        k => (0..k).map(|c| c.to_string()).collect(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

/// Split-level 2D and 3D scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub confusion: Confusion,
    pub classes: Vec<ClassScore>,
    pub miou_ch: f64,
    pub mf1: f64,
    pub f1_average: F1Average,
    pub height: HeightMetrics,
    pub pixels: u64,
    pub tiles: usize,
}

impl MetricReport {
    pub fn new(confusion: Confusion, sums: &HeightSums, f1_average: F1Average, tiles: usize) -> Result<Self> {
        let classes = scores_from_confusion(&confusion);
        let (miou_ch, mf1) = aggregate_2d(&classes, f1_average)?;
        Ok(Self {
            pixels: confusion.total(),
            confusion,
            classes,
            miou_ch,
            mf1,
            f1_average,
            height: sums.finish(),
            tiles,
        })
    }

    /// Ordered `(key, value)` pairs; undefined values read `undefined`.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (key, s) in class_keys(self.classes.len()).iter().zip(&self.classes) {
            out.push((format!("IoU_{key}"), format!("{}", s.iou)));
        }
        for (key, s) in class_keys(self.classes.len()).iter().zip(&self.classes) {
            out.push((format!("F1_{key}"), format!("{}", s.f1)));
        }
        out.push(("miou_ch".into(), format!("{}", self.miou_ch)));
        out.push(("mF1".into(), format!("{}", self.mf1)));
        out.push(("MAE".into(), format!("{}", self.height.mae)));
        out.push(("RMSE".into(), format!("{}", self.height.rmse)));
        out.push(("cRMSE".into(), fmt_opt(self.height.crmse)));
        out.push(("cRel".into(), fmt_opt(self.height.crel)));
        out.push(("cRel_skipped".into(), self.height.rel_skipped.to_string()));
        let absent: Vec<String> = class_keys(self.classes.len())
            .into_iter()
            .zip(&self.classes)
            .filter(|(_, s)| s.absent)
            .map(|(k, _)| k)
            .collect();
        out.push(("absent_classes".into(), if absent.is_empty() { "none".into() } else { absent.join(",") }));
        out.push((
            "mF1_average".into(),
            match self.f1_average {
                F1Average::AllClasses => "all".into(),
                F1Average::ChangedOnly => "changed".into(),
            },
        ));
        out.push(("pixels".into(), self.pixels.to_string()));
        out.push(("tiles".into(), self.tiles.to_string()));
        out
    }

    /// `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Header row plus one value row.
    pub fn to_csv(&self) -> String {
        let e = self.entries();
        let keys: Vec<&str> = e.iter().map(|(k, _)| k.as_str()).collect();
        let vals: Vec<&str> = e.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", keys.join(","), vals.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_reconcile() {
        let mut c = Confusion::new(3);
        c.add(&[0, 1, 2, 2, 1], &[0, 2, 2, 1, 1]).unwrap();
        for k in 0..3 {
            let cc = c.class_counts(k);
            assert_eq!(cc.tp + cc.fp + cc.fn_ + cc.tn, 5);
        }
    }

    #[test]
    fn hand_counted_class() {
        // class 1: TP=2, FP=1, FN=1
        let pred = [1, 1, 1, 0, 0];
        let gt = [1, 1, 0, 1, 0];
        let s = class_iou_f1(&pred, &gt, 2).unwrap();
        assert_eq!(s[1].iou, 0.5);
        assert!((s[1].f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_flagged() {
        let s = class_iou_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert!(s[2].absent && s[2].iou == 1.0 && s[2].f1 == 1.0);
        assert!(!s[0].absent);
    }

    #[test]
    fn empty_change_region_is_undefined() {
        let m = ChangeMask::from_labels(&[0, 0], 1, 2).unwrap();
        let t = Tensor::zeros(&[1, 1, 2]);
        let h = height_metrics(&t, &t, &m).unwrap();
        assert_eq!(h.crmse, None);
        assert_eq!(h.crel, None);
    }

    #[test]
    fn zero_magnitude_changes_are_skipped_by_crel() {
        let m = ChangeMask::from_labels(&[1, 1], 1, 2).unwrap();
        let gt = Tensor::new(&[1, 1, 2], vec![0.0, 2.0]).unwrap();
        let pred = Tensor::new(&[1, 1, 2], vec![1.0, 3.0]).unwrap();
        let h = height_metrics(&pred, &gt, &m).unwrap();
        assert_eq!(h.rel_skipped, 1);
        assert_eq!(h.crel, Some(0.5));
        assert_eq!(h.crmse, Some(1.0));
    }

    #[test]
    fn changed_only_f1_average() {
        let s = [
            ClassScore { iou: 1.0, f1: 1.0, absent: false },
            ClassScore { iou: 0.5, f1: 0.4, absent: false },
            ClassScore { iou: 0.3, f1: 0.2, absent: false },
        ];
        let (m, f_all) = aggregate_2d(&s, F1Average::AllClasses).unwrap();
        let (_, f_ch) = aggregate_2d(&s, F1Average::ChangedOnly).unwrap();
        assert!((m - 0.4).abs() < 1e-15);
        assert!((f_all - 1.6 / 3.0).abs() < 1e-15);
        assert!((f_ch - 0.3).abs() < 1e-15);
    }
    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn height_hand_sums() {
        let m = ChangeMask::from_labels(&[1, 1, 2, 1], 1, 4).unwrap();
        let gt = t(&[1.0, -1.0, 3.0, 4.0]);
        let pred = t(&[1.0, -1.0, 6.0, 8.0]);
        let h = height_metrics(&pred, &gt, &m).unwrap();
        assert_eq!((h.mae, h.rmse, h.crmse, h.crel), (1.75, 2.5, Some(2.5), Some(0.5)));

        let m = ChangeMask::from_labels(&[0, 1], 1, 2).unwrap();
        let h = height_metrics(&t(&[1.0, 3.0]), &t(&[0.0, 2.0]), &m).unwrap();
        assert_eq!((h.mae, h.rmse, h.crmse, h.crel), (1.0, 1.0, Some(1.0), Some(0.5)));
        let h = height_metrics(&t(&[0.0, 2.0]), &t(&[0.0, 2.0]), &m).unwrap();
        assert_eq!((h.mae, h.rmse, h.crmse, h.crel), (0.0, 0.0, Some(0.0), Some(0.0)));
    }

    #[test]
    fn perfect_and_missed_classes() {
        let s = class_iou_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert!(s.iter().all(|c| c.iou == 1.0 && c.f1 == 1.0));
        assert_eq!(aggregate_2d(&s, F1Average::AllClasses).unwrap(), (1.0, 1.0));
        let s = class_iou_f1(&[0, 0, 0], &[1, 1, 1], 2).unwrap();
        assert_eq!((s[1].iou, s[1].f1), (0.0, 0.0));
    }

    #[test]
    fn binary_mean_is_the_change_class() {
        let s = class_iou_f1(&[0, 1, 1, 0], &[0, 1, 0, 1], 2).unwrap();
        let (m, _) = aggregate_2d(&s, F1Average::AllClasses).unwrap();
        assert_eq!(m, s[1].iou);
    }

    #[test]
    fn reported_changed_class_mean() {
        let c = |iou| ClassScore { iou, f1: iou, absent: false };
        let (m, _) = aggregate_2d(&[c(0.9934), c(0.6410), c(0.5464)], F1Average::AllClasses).unwrap();
        assert_eq!(format!("{:.2}", 100.0 * m), "59.37");
    }
}
