//! Location-aware detection metrics (ER and F within an angular threshold),
//! class-dependent localization metrics (LE and LR) and the SELD score.
//!
//! Frames are grouped into fixed segments. Within a segment and class,
//! references and predictions are matched frame by frame with the Hungarian
//! algorithm on angular distance. Matches are accumulated per reference slot
//! (the k-th same-class reference of a frame, ordered by direction); a slot
//! whose mean matched distance is within the threshold is a true positive,
//! otherwise it counts as one false positive and one false negative.

pub mod assign;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SeldError};
use crate::labels::{angular_distance, read_labels, EventFrame};
use assign::hungarian;

/// Localization error assigned to a class that has events but no matches.
pub const UNMATCHED_LE_DEG: f64 = 180.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsConfig {
    pub classes: usize,
    pub segment_frames: usize,
    pub threshold_deg: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            classes: 13,
            segment_frames: 10,
            threshold_deg: 20.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Reference slots over all segments.
    pub n_ref: usize,
    /// Predicted slots over all segments.
    pub n_pred: usize,
    /// Reference slots with at least one class-correct match.
    pub matched: usize,
    /// Sum of per-slot mean matched distances, in degrees.
    pub le_sum: f64,
}

impl ClassCounts {
    pub fn f_score(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            100.0
        } else {
            100.0 * 2.0 * self.tp as f64 / d as f64
        }
    }

    pub fn le(&self) -> f64 {
        if self.matched == 0 {
            UNMATCHED_LE_DEG
        } else {
            self.le_sum / self.matched as f64
        }
    }

    pub fn lr(&self) -> f64 {
        if self.n_ref == 0 {
            100.0
        } else {
            100.0 * self.matched as f64 / self.n_ref as f64
        }
    }
}

/// Per-segment outcome summed over classes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegmentCounts {
    pub fp: usize,
    pub fn_: usize,
    pub n_ref: usize,
}

impl SegmentCounts {
    pub fn substitutions(&self) -> usize {
        self.fp.min(self.fn_)
    }

    pub fn deletions(&self) -> usize {
        self.fn_.saturating_sub(self.fp)
    }

    pub fn insertions(&self) -> usize {
        self.fp.saturating_sub(self.fn_)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub er: f64,
    /// Percent.
    pub f: f64,
    /// Degrees.
    pub le: f64,
    /// Percent.
    pub lr: f64,
    pub seld_score: f64,
    pub per_class: Vec<ClassCounts>,
    pub segments: usize,
}

/// `(ER + (1 - F/100) + LE/180 + (1 - LR/100)) / 4`.
pub fn seld_score(er: f64, f: f64, le: f64, lr: f64) -> f64 {
    (er + (1.0 - f / 100.0) + le / 180.0 + (1.0 - lr / 100.0)) / 4.0
}

/// Streams clips into segment and class counts.
#[derive(Clone, Debug)]
pub struct Accumulator {
    cfg: MetricsConfig,
    classes: Vec<ClassCounts>,
    segments: Vec<SegmentCounts>,
}

fn group(events: &[EventFrame], classes: usize) -> Result<BTreeMap<(usize, usize), Vec<[f64; 3]>>> {
    let mut out: BTreeMap<(usize, usize), Vec<[f64; 3]>> = BTreeMap::new();
    for e in events {
        if e.class >= classes {
            return Err(SeldError::data(format!("class {} out of range 0..{classes}", e.class)));
        }
        out.entry((e.frame, e.class)).or_default().push(e.doa);
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| {
            a[0].total_cmp(&b[0])
                .then(a[1].total_cmp(&b[1]))
                .then(a[2].total_cmp(&b[2]))
        });
    }
    Ok(out)
}

impl Accumulator {
    pub fn new(cfg: MetricsConfig) -> Self {
        Self {
            cfg,
            classes: vec![ClassCounts::default(); cfg.classes],
            segments: Vec::new(),
        }
    }

    /// Scores one clip; frame indices are local to the clip.
    pub fn add_clip(&mut self, refs: &[EventFrame], preds: &[EventFrame]) -> Result<()> {
        let seg_len = self.cfg.segment_frames;
        let r = group(refs, self.cfg.classes)?;
        let p = group(preds, self.cfg.classes)?;
        let last = refs.iter().chain(preds).map(|e| e.frame).max();
        let n_seg = last.map_or(0, |f| f / seg_len + 1);
        let empty = Vec::new();
        for s in 0..n_seg {
            let mut seg = SegmentCounts::default();
            for c in 0..self.cfg.classes {
                let mut ref_slots = 0;
                let mut pred_slots = 0;
                // per reference slot: (distance sum, matched frames)
                let mut slots: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
                for f in s * seg_len..(s + 1) * seg_len {
                    let rf = r.get(&(f, c)).unwrap_or(&empty);
                    let pf = p.get(&(f, c)).unwrap_or(&empty);
                    ref_slots = ref_slots.max(rf.len());
                    pred_slots = pred_slots.max(pf.len());
                    if rf.is_empty() || pf.is_empty() {
                        continue;
                    }
                    let cost = rf
                        .iter()
                        .map(|&a| pf.iter().map(|&b| angular_distance(a, b)).collect::<Result<Vec<_>>>())
                        .collect::<Result<Vec<_>>>()?;
                    for (i, j) in hungarian(&cost) {
                        let e = slots.entry(i).or_insert((0.0, 0));
                        e.0 += cost[i][j];
                        e.1 += 1;
                    }
                }
                let k = &mut self.classes[c];
                let mut tp = 0;
                let mut far = 0;
                for &(sum, n) in slots.values() {
                    let mean = sum / n as f64;
                    k.le_sum += mean;
                    if mean <= self.cfg.threshold_deg {
                        tp += 1;
                    } else {
                        far += 1;
                    }
                }
                let matched = slots.len();
                let fp = far + (pred_slots - matched);
                let fn_ = far + (ref_slots - matched);
                k.tp += tp;
                k.fp += fp;
                k.fn_ += fn_;
                k.n_ref += ref_slots;
                k.n_pred += pred_slots;
                k.matched += matched;
                seg.fp += fp;
                seg.fn_ += fn_;
                seg.n_ref += ref_slots;
            }
            self.segments.push(seg);
        }
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        let n_ref: usize = self.segments.iter().map(|s| s.n_ref).sum();
        let errors: usize = self
            .segments
            .iter()
            .map(|s| s.substitutions() + s.deletions() + s.insertions())
            .sum();
        let er = if n_ref == 0 {
            self.segments.iter().map(|s| s.fp).sum::<usize>() as f64
        } else {
            errors as f64 / n_ref as f64
        };
        let with_ref: Vec<&ClassCounts> = self.classes.iter().filter(|c| c.n_ref > 0).collect();
        let present: Vec<&ClassCounts> = self.classes.iter().filter(|c| c.n_ref + c.n_pred > 0).collect();
        let mean = |v: &[f64], empty: f64| {
            if v.is_empty() {
                empty
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let any_fp = self.classes.iter().any(|c| c.fp > 0);
        let f = mean(
            &with_ref.iter().map(|c| c.f_score()).collect::<Vec<_>>(),
            if any_fp { 0.0 } else { 100.0 },
        );
        let lr = mean(&with_ref.iter().map(|c| c.lr()).collect::<Vec<_>>(), 100.0);
        let le = mean(&present.iter().map(|c| c.le()).collect::<Vec<_>>(), 0.0);
        MetricsReport {
            er,
            f,
            le,
            lr,
            seld_score: seld_score(er, f, le, lr),
            per_class: self.classes.clone(),
            segments: self.segments.len(),
        }
    }
}

pub fn evaluate_events(refs: &[EventFrame], preds: &[EventFrame], cfg: MetricsConfig) -> Result<MetricsReport> {
    let mut acc = Accumulator::new(cfg);
    acc.add_clip(refs, preds)?;
    Ok(acc.report())
}

pub fn evaluate_files(pred: &Path, reference: &Path, cfg: MetricsConfig) -> Result<MetricsReport> {
    let p = read_labels(pred)?;
    let r = read_labels(reference)?;
    evaluate_events(&r, &p, cfg)
}

impl MetricsReport {
    /// Aligned human-readable summary with a per-class table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ER      {:.4}", self.er);
        let _ = writeln!(s, "F       {:.2} %", self.f);
        let _ = writeln!(s, "LE      {:.2} deg", self.le);
        let _ = writeln!(s, "LR      {:.2} %", self.lr);
        let _ = writeln!(s, "SELD    {:.4}", self.seld_score);
        let _ = writeln!(s, "segments {}", self.segments);
        let _ = writeln!(s, "\nclass    TP    FP    FN  n_ref      F      LE      LR");
        for (c, k) in self.per_class.iter().enumerate() {
            if k.n_ref + k.n_pred == 0 {
                continue;
            }
            let _ = writeln!(
                s,
                "{c:>5} {:>5} {:>5} {:>5} {:>6} {:>6.2} {:>7.2} {:>7.2}",
                k.tp,
                k.fp,
                k.fn_,
                k.n_ref,
                k.f_score(),
                k.le(),
                k.lr()
            );
        }
        s
    }

    /// Machine-readable summary: one `metric,value` row per aggregate, then
    /// one row per class.
    pub fn csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("ER", self.er),
            ("F", self.f),
            ("LE", self.le),
            ("LR", self.lr),
            ("SELD", self.seld_score),
        ] {
            let _ = writeln!(s, "{k},{v}");
        }
        s.push_str("\nclass,tp,fp,fn,n_ref,n_pred,matched,F,LE,LR\n");
        for (c, k) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "{c},{},{},{},{},{},{},{},{},{}",
                k.tp,
                k.fp,
                k.fn_,
                k.n_ref,
                k.n_pred,
                k.matched,
                k.f_score(),
                k.le(),
                k.lr()
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::azel_to_vec;

    fn ev(frame: usize, class: usize, az: f64) -> EventFrame {
        EventFrame {
            frame,
            class,
            doa: azel_to_vec(az, 0.0).unwrap(),
        }
    }

    #[test]
    fn perfect_and_empty() {
        let refs = vec![ev(0, 1, 10.0), ev(5, 2, -40.0), ev(12, 1, 90.0)];
        let r = evaluate_events(&refs, &refs, MetricsConfig::default()).unwrap();
        assert_eq!((r.er, r.f, r.le, r.lr, r.seld_score), (0.0, 100.0, 0.0, 100.0, 0.0));
        let r = evaluate_events(&refs, &[], MetricsConfig::default()).unwrap();
        assert_eq!((r.er, r.f, r.le, r.lr), (1.0, 0.0, 180.0, 0.0));
    }

    #[test]
    fn threshold_splits_detection_from_localization() {
        let cfg = MetricsConfig::default();
        let r = evaluate_events(&[ev(0, 0, 0.0)], &[ev(0, 0, 25.0)], cfg).unwrap();
        let k = r.per_class[0];
        assert_eq!((k.tp, k.fp, k.fn_), (0, 1, 1));
        assert!((r.le - 25.0).abs() < 1e-9);
        assert_eq!(r.lr, 100.0);
        let r = evaluate_events(&[ev(0, 0, 0.0)], &[ev(0, 0, 20.0)], cfg).unwrap();
        assert_eq!(r.per_class[0].tp, 1);
        assert!((r.le - 20.0).abs() < 1e-9);
    }

    #[test]
    fn no_references_reports_insertions() {
        let r = evaluate_events(&[], &[ev(0, 0, 0.0), ev(0, 1, 0.0)], MetricsConfig::default()).unwrap();
        assert_eq!(r.er, 2.0);
        assert_eq!(r.f, 0.0);
        assert_eq!(r.le, 180.0);
    }

    #[test]
    fn table1_rows() {
        assert!((seld_score(0.72, 24.0, 26.6, 49.0) - 0.5345).abs() < 5e-4);
        assert!((seld_score(0.61, 41.7, 20.3, 66.9) - 0.4089).abs() < 5e-3);
        assert_eq!(seld_score(0.0, 100.0, 0.0, 100.0), 0.0);
    }
}
