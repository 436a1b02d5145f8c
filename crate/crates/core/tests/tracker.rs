//! Filter, assignment, box overlap and lifecycle against independent oracles.

use irtrack_core::fitting::LossBreakdown;
use irtrack_core::geometry::{wrap_angle, Camera};
use irtrack_core::prior::LatentPair;
use irtrack_core::tracker::*;
use irtrack_core::Vec3;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lat(texture: &[f64]) -> LatentPair {
    LatentPair { shape: vec![0.0; texture.len()], texture: texture.to_vec() }
}

fn track(x: StateVec, p: StateMat) -> TrackState {
    TrackState {
        x,
        p,
        z_ema: lat(&[1.0, 0.0]),
        id: 0,
        status: TrackStatus::Tracked,
        lost_count: 0,
        age: 1,
        streak: 1,
        confirmed: true,
        score_sum: 0.0,
        score_count: 0,
    }
}

fn random_spd(rng: &mut ChaCha8Rng) -> StateMat {
    let m = StateMat::from_fn(|_, _| rng.random_range(-1.0..1.0));
    m * m.transpose() + StateMat::identity() * 0.1
}

fn observation(t: Vec3, yaw: f64, dims: (f64, f64, f64), z: &[f64]) -> Observation {
    Observation {
        t,
        scale: dims.0.max(dims.1).max(dims.2),
        yaw,
        w: dims.0,
        h: dims.1,
        l: dims.2,
        latents: lat(z),
        loss: LossBreakdown::default(),
        score: 0.9,
    }
}

#[test]
fn kalman_update_equals_direct_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = observation_map();
    for _ in 0..1000 {
        let x = StateVec::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let p = random_spd(&mut rng);
        let r = ObsMat::from_diagonal(&ObsVec::from_fn(|_, _| rng.random_range(0.01..2.0)));
        let y = ObsVec::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let got = kalman_update(&track(x, p), &y, &h, &r).unwrap();

        // dynamic-size evaluation via an explicit solve, no shared code path
        let (xd, pd) = (DVector::from_column_slice(x.as_slice()), DMatrix::from_column_slice(11, 11, p.as_slice()));
        let hd = DMatrix::from_column_slice(8, 11, h.as_slice());
        let rd = DMatrix::from_column_slice(8, 8, r.as_slice());
        let mut innov = DVector::from_column_slice(y.as_slice()) - &hd * &xd;
        innov[4] = wrap_angle(innov[4]);
        let s = &hd * &pd * hd.transpose() + rd;
        let k = s.lu().solve(&(&hd * &pd)).unwrap().transpose();
        let mut x_ref = &xd + &k * innov;
        x_ref[4] = wrap_angle(x_ref[4]);
        let p_ref = &pd - &k * &hd * &pd;
        let p_ref = (&p_ref + p_ref.transpose()) * 0.5;
        for i in 0..11 {
            assert!((got.x[i] - x_ref[i]).abs() < 1e-10, "x[{i}] {} vs {}", got.x[i], x_ref[i]);
            for j in 0..11 {
                assert!((got.p[(i, j)] - p_ref[(i, j)]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn kalman_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = observation_map();
    let x = StateVec::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let y = ObsVec::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let exact = kalman_update(&track(x, StateMat::identity()), &y, &h, &(ObsMat::identity() * 1e-12)).unwrap();
    for k in 0..OBS_DIM {
        assert!((exact.x[k] - y[k]).abs() < 1e-9);
    }
    let ignored = kalman_update(&track(x, StateMat::identity()), &y, &h, &(ObsMat::identity() * 1e15)).unwrap();
    assert!((ignored.x - x).abs().max() < 1e-9);
    let singular = kalman_update(&track(x, StateMat::zeros()), &y, &h, &ObsMat::zeros());
    assert!(singular.is_err());
}

#[test]
fn predict_with_zero_noise_is_a_matrix_product() {
    let a = transition();
    let t = predict(&track(StateVec::zeros(), StateMat::identity()), &a, &StateMat::zeros());
    assert!((t.p - a * a.transpose()).abs().max() < 1e-15);
    let mut x = StateVec::zeros();
    x[2] = 10.0;
    let still = predict(&track(x, StateMat::identity()), &a, &StateMat::zeros());
    assert_eq!(still.center(), Vec3::new(0.0, 0.0, 10.0));
}

fn min_eigenvalue(p: &StateMat) -> f64 {
    SymmetricEigen::new(*p).eigenvalues.min()
}

#[test]
fn covariance_stays_symmetric_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = TrackerConfig::default();
    let (a, q, h, r) = (transition(), cfg.q_matrix(), observation_map(), cfg.r_matrix());
    for _ in 0..50 {
        let mut t = track(StateVec::from_fn(|_, _| rng.random_range(-2.0..2.0)), random_spd(&mut rng) * 0.1);
        for _ in 0..40 {
            t = predict(&t, &a, &q);
            assert!(min_eigenvalue(&t.p) >= -1e-9);
            if rng.random_bool(0.8) {
                let y = ObsVec::from_fn(|_, _| rng.random_range(-2.0..2.0));
                t = kalman_update(&t, &y, &h, &r).unwrap();
            }
            assert_eq!(t.p, t.p.transpose());
            assert!(min_eigenvalue(&t.p) >= -1e-9);
            assert!(t.x[4] > -std::f64::consts::PI && t.x[4] <= std::f64::consts::PI);
        }
    }
}

/// Best complete assignment of the smaller side: fewest forbidden pairs,
/// then highest total.
fn brute_force(s: &[Vec<f64>]) -> (usize, f64) {
    let (n, m) = (s.len(), s[0].len());
    let get = |i: usize, j: usize| if n <= m { s[i][j] } else { s[j][i] };
    let (rows, cols) = (n.min(m), n.max(m));
    fn rec(i: usize, rows: usize, cols: usize, used: &mut [bool], get: &dyn Fn(usize, usize) -> f64) -> (usize, f64) {
        if i == rows {
            return (0, 0.0);
        }
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for j in 0..cols {
            if used[j] {
                continue;
            }
            used[j] = true;
            let (f, v) = rec(i + 1, rows, cols, used, get);
            used[j] = false;
            let s = get(i, j);
            let cand = if s.is_finite() { (f, v + s) } else { (f + 1, v) };
            if cand.0 < best.0 || (cand.0 == best.0 && cand.1 > best.1) {
                best = cand;
            }
        }
        best
    }
    rec(0, rows, cols, &mut vec![false; cols], &get)
}

fn assert_partial_bijection(a: &[(usize, usize)], n: usize, m: usize) {
    let mut rows = vec![false; n];
    let mut cols = vec![false; m];
    for &(i, j) in a {
        assert!(!rows[i] && !cols[j], "duplicate in {a:?}");
        rows[i] = true;
        cols[j] = true;
    }
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cases = Vec::new();
    for n in 1..=7 {
        for m in 1..=7 {
            for _ in 0..6 {
                cases.push((n, m, rng.random_range(0.0..0.4)));
            }
        }
    }
    cases.extend((0..1000).map(|_| (3, 3, 0.0)));
    cases.extend((0..200).map(|_| (2, 3, 0.0)));
    for (n, m, p_forbid) in cases {
        let s: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| if rng.random_bool(p_forbid) { f64::NEG_INFINITY } else { rng.random_range(-1.0..1.0) }).collect())
            .collect();
        let a = hungarian_assign(&s);
        assert_partial_bijection(&a, n, m);
        assert!(a.iter().all(|&(i, j)| s[i][j].is_finite()));
        let total: f64 = a.iter().map(|&(i, j)| s[i][j]).sum();
        let (forbidden, best) = brute_force(&s);
        assert_eq!(a.len(), n.min(m) - forbidden, "{s:?}");
        assert!((total - best).abs() < 1e-9, "{n}x{m}: got {total}, brute force {best}");
    }
}

/// Best partial matching using only pairs at or above `min`, maximizing
/// the summed margin over `min`.
fn brute_threshold(s: &[Vec<f64>], min: f64, i: usize, used: &mut Vec<bool>) -> f64 {
    if i == s.len() {
        return 0.0;
    }
    let mut best = brute_threshold(s, min, i + 1, used);
    for j in 0..used.len() {
        if !used[j] && s[i][j] >= min {
            used[j] = true;
            best = best.max(s[i][j] - min + brute_threshold(s, min, i + 1, used));
            used[j] = false;
        }
    }
    best
}

#[test]
fn thresholded_assignment_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..400 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let s: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| if rng.random_bool(0.2) { f64::NEG_INFINITY } else { rng.random_range(-0.2..1.0) }).collect())
            .collect();
        let a = assign_with_threshold(&s, 0.2);
        assert_partial_bijection(&a, n, m);
        assert!(a.iter().all(|&(i, j)| s[i][j] >= 0.2));
        let got: f64 = a.iter().map(|&(i, j)| s[i][j] - 0.2).sum();
        let best = brute_threshold(&s, 0.2, 0, &mut vec![false; m]);
        assert!((got - best).abs() < 1e-9, "got {got}, brute force {best}");
    }
}

fn random_box(rng: &mut ChaCha8Rng, near: Option<&Box3>) -> Box3 {
    let center = match near {
        Some(b) => b.center + Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(-0.6..0.6)),
        None => Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..1.0)),
    };
    Box3 { center, w: rng.random_range(1.5..2.5), h: rng.random_range(1.2..2.0), l: rng.random_range(3.5..5.0), yaw: rng.random_range(-3.2..3.2) }
}

fn contains(b: &Box3, p: &Vec3) -> bool {
    let d = p - b.center;
    let (s, c) = b.yaw.sin_cos();
    let along = c * d.x + s * d.y;
    let across = -s * d.x + c * d.y;
    along.abs() <= b.l / 2.0 && across.abs() <= b.w / 2.0 && d.z.abs() <= b.h / 2.0
}

#[test]
fn iou3d_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let a = random_box(&mut rng, None);
        let b = random_box(&mut rng, Some(&a));
        let r = 0.5 * (a.l.hypot(a.w).max(b.l.hypot(b.w)) + 1.0);
        let lo = Vec3::new(a.center.x.min(b.center.x) - r, a.center.y.min(b.center.y) - r, a.center.z.min(b.center.z) - 1.0);
        let hi = Vec3::new(a.center.x.max(b.center.x) + r, a.center.y.max(b.center.y) + r, a.center.z.max(b.center.z) + 1.0);
        let (mut in_a, mut in_b, mut both) = (0u64, 0u64, 0u64);
        for _ in 0..1_000_000 {
            let p = Vec3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), rng.random_range(lo.z..hi.z));
            let (ia, ib) = (contains(&a, &p), contains(&b, &p));
            in_a += ia as u64;
            in_b += ib as u64;
            both += (ia && ib) as u64;
        }
        let mc = both as f64 / (in_a + in_b - both) as f64;
        let iou = iou3d(&a, &b);
        assert!((iou - mc).abs() < 0.02, "iou3d {iou:.4}, monte carlo {mc:.4}");
    }
}

#[test]
fn iou3d_examples() {
    let a = Box3 { center: Vec3::new(1.0, 2.0, 0.5), w: 2.0, h: 1.5, l: 4.5, yaw: 0.7 };
    assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
    let far = Box3 { center: a.center + Vec3::new(100.0, 0.0, 0.0), ..a };
    assert_eq!(iou3d(&a, &far), 0.0);
    // half-length shift along the heading: a third of the union
    let (s, c) = a.yaw.sin_cos();
    let shifted = Box3 { center: a.center + Vec3::new(c, s, 0.0) * (a.l / 2.0), ..a };
    assert!((iou3d(&a, &shifted) - 1.0 / 3.0).abs() < 1e-9);
}

fn state_for(obs: &Observation) -> TrackState {
    let mut x = StateVec::zeros();
    x.fixed_rows_mut::<OBS_DIM>(0).copy_from(&obs.vector());
    let mut t = track(x, StateMat::identity());
    t.z_ema = obs.latents.clone();
    t
}

#[test]
fn affinity_examples_and_bound() {
    let cfg = AffinityConfig::default();
    let o = observation(Vec3::new(20.0, 1.0, 0.8), 0.3, (1.9, 1.5, 4.4), &[0.3, -0.2, 0.5]);
    let t = state_for(&o);
    assert!((affinity(&t, &o, &cfg) - 1.0).abs() < 1e-12);

    let far = observation(Vec3::new(70.0, 1.0, 0.8), 0.3, (1.9, 1.5, 4.4), &[0.3, -0.2, 0.5]);
    assert_eq!(affinity(&t, &far, &cfg), f64::NEG_INFINITY);

    let ortho = observation(o.t, o.yaw, (1.9, 1.5, 4.4), &[0.2, 0.3, 0.0]);
    assert!((affinity(&t, &ortho, &cfg) - (cfg.w_iou + cfg.w_c)).abs() < 1e-12);

    // disjoint boxes, orthogonal latents, centroid at the gate limit
    let edge = observation(o.t + Vec3::new(cfg.gate_distance, 0.0, 0.0), o.yaw, (1.9, 1.5, 4.4), &[0.2, 0.3, 0.0]);
    let a = affinity(&t, &edge, &cfg);
    assert!(a <= cfg.w_c * (-1.0f64).exp() + 1e-12, "{a}");

    let m = affinity_matrix(&[t.clone(), t], &[o, far], &cfg);
    assert_eq!((m.len(), m[0].len()), (2, 2));
}

#[test]
fn lifecycle_examples() {
    let cam = Camera::forward_facing(320, 240, 250.0, 1.6).unwrap();
    let mut tr = Tracker::new(TrackerConfig::default()).unwrap();
    let o = observation(Vec3::new(20.0, 0.0, 0.8), 0.0, (1.9, 1.5, 4.4), &[0.3, 0.1]);
    for _ in 0..5 {
        let recs = tr.step(std::slice::from_ref(&o), &cam).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].id, 0);
        assert_eq!(tr.tracks[0].lost_count, 0);
    }
    let n_life = tr.cfg.affinity.n_life;
    for k in 1..=n_life {
        tr.step(&[], &cam).unwrap();
        assert_eq!(tr.tracks.len(), 1);
        assert_eq!(tr.tracks[0].status, TrackStatus::Lost);
        assert_eq!(tr.tracks[0].lost_count, k);
    }
    tr.step(&[], &cam).unwrap();
    assert!(tr.tracks.is_empty());
}

#[test]
fn ids_are_unique_and_never_reused() {
    let cam = Camera::forward_facing(320, 240, 250.0, 1.6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tr = Tracker::new(TrackerConfig::default()).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    let mut max_seen: Option<u64> = None;
    for _ in 0..60 {
        let obs: Vec<Observation> = (0..rng.random_range(0..6))
            .map(|_| {
                let t = Vec3::new(rng.random_range(10.0..30.0), rng.random_range(-6.0..6.0), 0.8);
                let z: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                observation(t, rng.random_range(-3.0..3.0), (1.9, 1.5, 4.4), &z)
            })
            .collect();
        tr.step(&obs, &cam).unwrap();
        let ids: Vec<u64> = tr.tracks.iter().map(|t| t.id).collect();
        let unique: std::collections::BTreeSet<u64> = ids.iter().copied().collect();
        assert_eq!(unique.len(), ids.len());
        for id in ids {
            if seen.insert(id) {
                assert!(max_seen.is_none_or(|m| id > m), "id {id} reused or out of order");
                max_seen = Some(id);
            }
        }
        for t in &tr.tracks {
            assert!(t.lost_count <= tr.cfg.affinity.n_life);
        }
    }
}

#[test]
fn ema_fixed_point_and_midpoint() {
    let z = lat(&[0.4, -1.0]);
    for age in 1..20 {
        let e = ema_update(&z, &z, age).unwrap();
        assert!(e.texture.iter().zip(&z.texture).all(|(a, b)| (a - b).abs() < 1e-12));
    }
    let mid = ema_update(&lat(&[0.0, 0.0]), &lat(&[2.0, 4.0]), 5).unwrap();
    assert_eq!(mid.texture, vec![1.0, 2.0]);
    assert!(ema_update(&z, &z, 0).is_err());
}
