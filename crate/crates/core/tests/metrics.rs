//! Evaluation metrics against hand counts and an independent re-implementation.

use irtrack_core::metrics::*;
use irtrack_core::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

fn b(id: u64, x: f64, y: f64, score: f64) -> EvalBox {
    EvalBox { id, center: Vec3::new(x, y, 0.0), score }
}

#[test]
fn three_frame_swap_scenario() {
    // two objects 4 m apart; predictions swap labels at frame 1 and keep the swap
    let frames = vec![
        EvalFrame { gt: vec![b(10, 0.0, 0.0, 1.0), b(11, 4.0, 0.0, 1.0)], pred: vec![b(1, 0.1, 0.0, 0.9), b(2, 4.1, 0.0, 0.9)] },
        EvalFrame { gt: vec![b(10, 0.0, 1.0, 1.0), b(11, 4.0, 1.0, 1.0)], pred: vec![b(2, 0.0, 1.2, 0.9), b(1, 4.0, 0.8, 0.9)] },
        EvalFrame { gt: vec![b(10, 0.0, 2.0, 1.0), b(11, 4.0, 2.0, 1.0)], pred: vec![b(2, 0.0, 2.0, 0.9), b(1, 4.0, 2.0, 0.9)] },
    ];
    let s = mota_and_recall(&frames, 2.0).unwrap();
    assert_eq!(s.id_switches, 2);
    assert_eq!((s.false_positives, s.misses, s.gt), (0, 0, 6));
    assert!((s.mota - (1.0 - 2.0 / 6.0)).abs() < 1e-15);
    assert_eq!(s.recall, 1.0);
    assert!((s.motp - (0.1 + 0.1 + 0.2 + 0.2) / 6.0).abs() < 1e-12);
}

#[test]
fn three_frame_miss_and_false_positive() {
    // frame 1 loses object 11 and reports a ghost, frame 2 recovers it under a new id
    let frames = vec![
        EvalFrame { gt: vec![b(10, 0.0, 0.0, 1.0), b(11, 9.0, 0.0, 1.0)], pred: vec![b(1, 0.0, 0.0, 0.9), b(2, 9.0, 0.0, 0.9)] },
        EvalFrame { gt: vec![b(10, 0.0, 0.0, 1.0), b(11, 9.0, 0.0, 1.0)], pred: vec![b(1, 0.0, 0.0, 0.9), b(5, 20.0, 0.0, 0.3)] },
        EvalFrame { gt: vec![b(10, 0.0, 0.0, 1.0), b(11, 9.0, 0.0, 1.0)], pred: vec![b(1, 0.0, 0.0, 0.9), b(3, 9.5, 0.0, 0.9)] },
    ];
    let s = mota_and_recall(&frames, 2.0).unwrap();
    assert_eq!((s.false_positives, s.misses, s.id_switches), (1, 1, 1));
    assert!((s.mota - 0.5).abs() < 1e-15);
    assert!((s.recall - 5.0 / 6.0).abs() < 1e-15);
    // dropping the ghost by confidence removes the false positive only
    let c = clear_mot(&frames, 2.0, 0.5).unwrap();
    assert_eq!((c.false_positives, c.misses, c.id_switches), (0, 1, 1));
}

/// Global-minimum greedy pairing written without sorting.
fn oracle_match(gt: &[EvalBox], pred: &[EvalBox], radius: f64) -> Vec<(usize, usize)> {
    let mut gu = vec![false; gt.len()];
    let mut pu = vec![false; pred.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in (0..gt.len()).filter(|&i| !gu[i]) {
            for j in (0..pred.len()).filter(|&j| !pu[j]) {
                let d = (gt[i].center - pred[j].center).norm();
                if d <= radius && best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, i, j));
                }
            }
        }
        match best {
            Some((_, i, j)) => {
                gu[i] = true;
                pu[j] = true;
                out.push((i, j));
            }
            None => return out,
        }
    }
}

/// MOTA-style counts from the oracle matcher.
fn oracle_counts(frames: &[EvalFrame], radius: f64, min_score: f64) -> (usize, usize, usize, usize, usize, f64) {
    let (mut gt, mut tp, mut fp, mut fnn, mut sw, mut dist) = (0, 0, 0, 0, 0, 0.0);
    let mut last: HashMap<u64, u64> = HashMap::new();
    for f in frames {
        let pred: Vec<EvalBox> = f.pred.iter().filter(|p| p.score >= min_score).copied().collect();
        let m = oracle_match(&f.gt, &pred, radius);
        gt += f.gt.len();
        tp += m.len();
        fp += pred.len() - m.len();
        fnn += f.gt.len() - m.len();
        for (i, j) in m {
            dist += (f.gt[i].center - pred[j].center).norm();
            let prev = last.insert(f.gt[i].id, pred[j].id);
            sw += usize::from(prev.is_some_and(|p| p != pred[j].id));
        }
    }
    (gt, tp, fp, fnn, sw, dist)
}

fn random_sequence(rng: &mut ChaCha8Rng, n_frames: usize) -> Vec<EvalFrame> {
    let n_obj = rng.random_range(1..8);
    let starts: Vec<(f64, f64)> = (0..n_obj).map(|_| (rng.random_range(0.0..30.0), rng.random_range(-10.0..10.0))).collect();
    let id_pool: Vec<u64> = (0..12).collect();
    (0..n_frames)
        .map(|f| {
            let gt: Vec<EvalBox> = starts
                .iter()
                .enumerate()
                .filter(|_| rng.random_bool(0.9))
                .map(|(k, &(x, y))| b(k as u64, x + 0.3 * f as f64, y, 1.0))
                .collect();
            let kept: Vec<&EvalBox> = gt.iter().filter(|_| rng.random_bool(0.85)).collect();
            let mut pred: Vec<EvalBox> = kept
                .into_iter()
                .map(|g| {
                    let id = if rng.random_bool(0.9) { g.id } else { id_pool[rng.random_range(0..id_pool.len())] };
                    b(id, g.center.x + rng.random_range(-1.5..1.5), g.center.y + rng.random_range(-1.5..1.5), rng.random_range(0.0..1.0))
                })
                .collect();
            for _ in 0..rng.random_range(0..3) {
                pred.push(b(100 + rng.random_range(0..5), rng.random_range(0.0..40.0), rng.random_range(-10.0..10.0), rng.random_range(0.0..1.0)));
            }
            EvalFrame { gt, pred }
        })
        .collect()
}

#[test]
fn dense_matching_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let n = rng.random_range(0..15);
        let m = rng.random_range(0..15);
        let gt: Vec<EvalBox> = (0..n).map(|k| b(k, rng.random_range(0.0..8.0), rng.random_range(0.0..8.0), 1.0)).collect();
        let pred: Vec<EvalBox> = (0..m).map(|k| b(k, rng.random_range(0.0..8.0), rng.random_range(0.0..8.0), 1.0)).collect();
        let got = match_frame(&gt, &pred, 2.0).unwrap();
        let mut a: Vec<(usize, usize)> = got.matches.iter().map(|x| (x.0, x.1)).collect();
        let mut o = oracle_match(&gt, &pred, 2.0);
        a.sort();
        o.sort();
        assert_eq!(a, o);
        assert_eq!(got.misses.len() + a.len(), n as usize);
        assert_eq!(got.false_positives.len() + a.len(), m as usize);
    }
}

#[test]
fn sequence_counts_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let frames = random_sequence(&mut rng, 12);
        for min_score in [f64::NEG_INFINITY, 0.3, 0.7] {
            let c = clear_mot(&frames, 2.0, min_score).unwrap();
            let (gt, tp, fp, fnn, sw, dist) = oracle_counts(&frames, 2.0, min_score);
            assert_eq!((c.gt, c.true_positives, c.false_positives, c.misses, c.id_switches), (gt, tp, fp, fnn, sw));
            assert!((c.distance_sum - dist).abs() < 1e-9);
            assert!(c.mota() <= 1.0);
        }
    }
}

/// Enumerates every candidate threshold (each distinct score) per recall
/// target and keeps the highest one reaching it.
fn brute_amota(frames: &[EvalFrame], radius: f64, n: usize) -> (f64, f64) {
    let mut scores: Vec<f64> = frames.iter().flat_map(|f| f.pred.iter().map(|p| p.score)).collect();
    scores.sort_by(|a, b| a.total_cmp(b));
    scores.dedup();
    let (mut a, mut p) = (0.0, 0.0);
    for k in 1..=n {
        let r = k as f64 / n as f64;
        let mut best: Option<(f64, (usize, usize, usize, usize, usize, f64))> = None;
        for &t in &scores {
            let c = oracle_counts(frames, radius, t);
            let recall = c.1 as f64 / c.0 as f64;
            if recall >= r - 1e-12 && best.is_none_or(|(bt, _)| t > bt) {
                best = Some((t, c));
            }
        }
        match best {
            Some((_, (gt, tp, fp, fnn, sw, dist))) => {
                let gt = gt as f64;
                let motar = 1.0 - ((sw + fp + fnn) as f64 - (1.0 - r) * gt) / (r * gt);
                a += motar.clamp(0.0, 1.0);
                p += if tp > 0 { dist / tp as f64 } else { radius };
            }
            None => p += radius,
        }
    }
    (a / n as f64, p / n as f64)
}

#[test]
fn amota_sweep_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let frames = random_sequence(&mut rng, 8);
        if frames.iter().all(|f| f.gt.is_empty()) {
            continue;
        }
        for n in [5, 40] {
            let got = amota_amotp(&frames, 2.0, n).unwrap();
            let (a, p) = brute_amota(&frames, 2.0, n);
            assert!((got.amota - a).abs() < 1e-12, "{} vs {a}", got.amota);
            assert!((got.amotp - p).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&got.amota));
        }
    }
}

#[test]
fn relabeling_predictions_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let frames = random_sequence(&mut rng, 10);
        if frames.iter().all(|f| f.gt.is_empty()) {
            continue;
        }
        let offset = rng.random_range(1..1000u64);
        // bijection: reverse and shift
        let relabeled: Vec<EvalFrame> = frames
            .iter()
            .map(|f| EvalFrame {
                gt: f.gt.clone(),
                pred: f.pred.iter().map(|p| EvalBox { id: 10_000 - p.id + offset, ..*p }).collect(),
            })
            .collect();
        assert_eq!(mota_and_recall(&frames, 2.0).unwrap(), mota_and_recall(&relabeled, 2.0).unwrap());
        assert_eq!(amota_amotp(&frames, 2.0, 40).unwrap(), amota_amotp(&relabeled, 2.0, 40).unwrap());
    }
}

#[test]
fn removing_a_true_positive_never_raises_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..100 {
        let mut frames = random_sequence(&mut rng, 6);
        let Ok(before) = mota_and_recall(&frames, 2.0) else { continue };
        let candidates: Vec<(usize, usize)> = frames
            .iter()
            .enumerate()
            .flat_map(|(fi, f)| match_frame(&f.gt, &f.pred, 2.0).unwrap().matches.into_iter().map(move |m| (fi, m.1)))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let (fi, j) = candidates[rng.random_range(0..candidates.len())];
        frames[fi].pred.remove(j);
        let after = mota_and_recall(&frames, 2.0).unwrap();
        assert!(after.recall <= before.recall);
        assert!((0.0..=1.0).contains(&after.recall));
    }
}
