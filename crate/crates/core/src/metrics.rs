//! Tracking evaluation: center-distance matching, CLEAR-MOT counts and the
//! recall-averaged AMOTA/AMOTP sweep.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::Vec3;

pub const DEFAULT_RADIUS: f64 = 2.0;
pub const DEFAULT_THRESHOLDS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalBox {
    pub id: u64,
    pub center: Vec3,
    /// Confidence; ignored for ground truth.
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalFrame {
    pub gt: Vec<EvalBox>,
    pub pred: Vec<EvalBox>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameMatch {
    /// `(gt index, pred index, distance)`
    pub matches: Vec<(usize, usize, f64)>,
    pub false_positives: Vec<usize>,
    pub misses: Vec<usize>,
}

/// Greedy nearest-center matching: pairs within `radius` are taken in order
/// of distance, then gt id, then pred id, each box at most once.
pub fn match_frame(gt: &[EvalBox], pred: &[EvalBox], radius: f64) -> Result<FrameMatch> {
    if !(radius > 0.0) {
        return Err(invalid("match radius must be positive"));
    }
    let mut pairs = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            let d = (g.center - p.center).norm();
            if d <= radius {
                pairs.push((d, g.id, p.id, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = alloc::vec![false; gt.len()];
    let mut pred_used = alloc::vec![false; pred.len()];
    let mut out = FrameMatch::default();
    for (d, _, _, i, j) in pairs {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            out.matches.push((i, j, d));
        }
    }
    out.false_positives = (0..pred.len()).filter(|&j| !pred_used[j]).collect();
    out.misses = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClearMot {
    pub gt: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub misses: usize,
    pub id_switches: usize,
    /// Sum of matched center distances.
    pub distance_sum: f64,
}

impl ClearMot {
    pub fn mota(&self) -> f64 {
        1.0 - (self.false_positives + self.misses + self.id_switches) as f64 / self.gt as f64
    }

    pub fn recall(&self) -> f64 {
        self.true_positives as f64 / self.gt as f64
    }

    /// Mean matched distance; `None` without matches.
    pub fn motp(&self) -> Option<f64> {
        (self.true_positives > 0).then(|| self.distance_sum / self.true_positives as f64)
    }
}

/// Counts over a sequence, keeping predictions with `score >= min_score`.
/// An identity switch is a ground-truth id matched to a different
/// prediction id than at its previous matched frame.
pub fn clear_mot(frames: &[EvalFrame], radius: f64, min_score: f64) -> Result<ClearMot> {
    let mut out = ClearMot::default();
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    for f in frames {
        let pred: Vec<EvalBox> = f.pred.iter().filter(|p| p.score >= min_score).copied().collect();
        let m = match_frame(&f.gt, &pred, radius)?;
        out.gt += f.gt.len();
        out.true_positives += m.matches.len();
        out.false_positives += m.false_positives.len();
        out.misses += m.misses.len();
        for &(i, j, d) in &m.matches {
            out.distance_sum += d;
            if let Some(prev) = last.insert(f.gt[i].id, pred[j].id) {
                if prev != pred[j].id {
                    out.id_switches += 1;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mota: f64,
    pub recall: f64,
    pub id_switches: usize,
    pub false_positives: usize,
    pub misses: usize,
    pub gt: usize,
    /// Mean matched distance, `radius` when nothing matched.
    pub motp: f64,
}

/// MOTA, recall and identity switches over all predictions.
pub fn mota_and_recall(frames: &[EvalFrame], radius: f64) -> Result<Summary> {
    let c = clear_mot(frames, radius, f64::NEG_INFINITY)?;
    if c.gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    Ok(Summary {
        mota: c.mota(),
        recall: c.recall(),
        id_switches: c.id_switches,
        false_positives: c.false_positives,
        misses: c.misses,
        gt: c.gt,
        motp: c.motp().unwrap_or(radius),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amota {
    pub amota: f64,
    pub amotp: f64,
}

/// `1 − (IDSW + FP + FN − (1 − r)·P) / (r·P)` clamped to [0, 1].
pub fn motar(c: &ClearMot, r: f64) -> f64 {
    let p = c.gt as f64;
    let err = (c.id_switches + c.false_positives + c.misses) as f64;
    (1.0 - (err - (1.0 - r) * p) / (r * p)).clamp(0.0, 1.0)
}

/// Sweep over `n` recall targets `r_k = k/n`. Each target uses the highest
/// confidence threshold whose recall reaches `r_k`; unreachable targets
/// score MOTAR 0 and MOTP `radius`.
pub fn amota_amotp(frames: &[EvalFrame], radius: f64, n: usize) -> Result<Amota> {
    if n == 0 {
        return Err(invalid("threshold count must be positive"));
    }
    let gt: usize = frames.iter().map(|f| f.gt.len()).sum();
    if gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut thresholds: Vec<f64> = frames.iter().flat_map(|f| f.pred.iter().map(|p| p.score)).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let sweep: Vec<ClearMot> = thresholds.iter().map(|&t| clear_mot(frames, radius, t)).collect::<Result<_>>()?;

    let (mut a_sum, mut p_sum) = (0.0, 0.0);
    for k in 1..=n {
        let r = k as f64 / n as f64;
        // recall grows as the threshold drops; tolerate rounding in k/n
        match sweep.iter().find(|c| c.recall() >= r - 1e-12) {
            Some(c) => {
                a_sum += motar(c, r);
                p_sum += c.motp().unwrap_or(radius);
            }
            None => p_sum += radius,
        }
    }
    Ok(Amota { amota: a_sum / n as f64, amotp: p_sum / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn b(id: u64, x: f64, y: f64) -> EvalBox {
        EvalBox { id, center: Vec3::new(x, y, 0.0), score: 1.0 }
    }

    #[test]
    fn matching_examples() {
        let g = vec![b(0, 0.0, 0.0), b(1, 10.0, 0.0)];
        let m = match_frame(&g, &g, 2.0).unwrap();
        assert_eq!(m.matches.len(), 2);
        assert!(m.false_positives.is_empty() && m.misses.is_empty());
        let m = match_frame(&[b(0, 0.0, 0.0)], &[b(0, 5.0, 0.0)], 2.0).unwrap();
        assert_eq!((m.matches.len(), m.false_positives.len(), m.misses.len()), (0, 1, 1));
        assert!(match_frame(&g, &g, 0.0).is_err());
    }

    #[test]
    fn greedy_prefers_nearest() {
        // pred 0 is closest to gt 1; gt 0 then gets pred 1
        let g = vec![b(0, 0.0, 0.0), b(1, 1.0, 0.0)];
        let p = vec![b(7, 1.1, 0.0), b(8, -0.5, 0.0)];
        let m = match_frame(&g, &p, 2.0).unwrap();
        assert_eq!(m.matches.iter().map(|x| (x.0, x.1)).collect::<Vec<_>>(), vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn mota_formula() {
        // 10 gt over 5 frames, one miss and one false positive
        let mut frames = Vec::new();
        for f in 0..5 {
            let gt = vec![b(0, 0.0, 0.0), b(1, 10.0, 0.0)];
            let mut pred = gt.clone();
            if f == 2 {
                pred.pop();
            }
            if f == 3 {
                pred.push(b(9, 30.0, 0.0));
            }
            frames.push(EvalFrame { gt, pred });
        }
        let s = mota_and_recall(&frames, 2.0).unwrap();
        assert!((s.mota - 0.8).abs() < 1e-12);
        assert!((s.recall - 0.9).abs() < 1e-12);
        assert_eq!(s.id_switches, 0);
        assert_eq!(mota_and_recall(&[], 2.0), Err(Error::NoGroundTruth));
    }

    #[test]
    fn perfect_and_empty_sweeps() {
        let frames: Vec<EvalFrame> =
            (0..4).map(|k| EvalFrame { gt: vec![b(0, k as f64, 0.0)], pred: vec![b(3, k as f64, 0.0)] }).collect();
        let a = amota_amotp(&frames, 2.0, 40).unwrap();
        assert!((a.amota - 1.0).abs() < 1e-12 && a.amotp.abs() < 1e-12);
        let empty: Vec<EvalFrame> = frames.iter().map(|f| EvalFrame { gt: f.gt.clone(), pred: vec![] }).collect();
        let a = amota_amotp(&empty, 2.0, 40).unwrap();
        assert_eq!((a.amota, a.amotp), (0.0, 2.0));
    }
}
