use bevtrack::geom::{oriented_iou, BoxSpec, PoseBev, Rect};
use bevtrack::search::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec() -> BoxSpec {
    BoxSpec::new(1.7, 4.1, 1.5).unwrap()
}

#[test]
fn kalman_sample_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut st = KalmanState::new(PoseBev::new(4.0, -2.0, 0.3), KalmanConfig::default());
    st.mean[3] = 0.6;
    st.mean[4] = -0.2;
    let n = 10_001;
    let rects = kalman_propose(&mut st, spec(), n, &mut rng).unwrap();
    assert_eq!(rects.len(), n);
    let m = st.mean;
    assert!((rects[0].pose.x - m[0]).abs() < 1e-12 && (rects[0].pose.z - m[1]).abs() < 1e-12);
    assert!((m[0] - 4.6).abs() < 1e-12 && (m[1] + 2.2).abs() < 1e-12);
    let draws = &rects[1..];
    let k = draws.len() as f64;
    for (i, get) in [|r: &Rect| r.pose.x, |r: &Rect| r.pose.z, |r: &Rect| r.pose.theta].iter().enumerate() {
        let mean = draws.iter().map(get).sum::<f64>() / k;
        let var = draws.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / (k - 1.0);
        let sd = st.cov[i][i].sqrt();
        assert!((mean - m[i]).abs() < 3.0 * sd / k.sqrt(), "coordinate {i}: mean {mean} vs {}", m[i]);
        assert!((var / st.cov[i][i] - 1.0).abs() < 0.05, "coordinate {i}: variance {var} vs {}", st.cov[i][i]);
    }
    assert!(rects.iter().all(|r| r.w == spec().w && r.l == spec().l));
}

#[test]
fn kalman_degenerate_and_velocity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let zero = KalmanConfig {
        process_var: [0.0; 5],
        measurement_var: [0.04, 0.04, 0.01],
        initial_var: [0.0; 5],
    };
    let prev = PoseBev::new(1.0, 2.0, -0.5);
    let mut st = KalmanState::new(prev, zero.clone());
    for r in kalman_propose(&mut st, spec(), 20, &mut rng).unwrap() {
        assert_eq!(r.pose, prev);
    }
    let mut st = KalmanState::new(PoseBev::default(), zero);
    st.mean[3] = 1.0;
    kalman_propose(&mut st, spec(), 1, &mut rng).unwrap();
    assert_eq!(st.pose(), PoseBev::new(1.0, 0.0, 0.0));
    assert!(kalman_propose(&mut st, spec(), 0, &mut rng).is_err());
}

#[test]
fn kalman_covariance_stays_symmetric_psd() {
    let mut st = KalmanState::new(PoseBev::default(), KalmanConfig::default());
    for t in 0..30 {
        st.predict();
        st.update(PoseBev::new(0.5 * t as f64, 0.1 * t as f64, 0.01 * t as f64));
        for i in 0..5 {
            assert!(st.cov[i][i] > 0.0);
            for j in 0..5 {
                assert!((st.cov[i][j] - st.cov[j][i]).abs() < 1e-12);
                assert!(st.cov[i][j].powi(2) <= st.cov[i][i] * st.cov[j][j] * (1.0 + 1e-9));
            }
        }
    }
    assert!((st.mean[3] - 0.5).abs() < 0.05, "velocity estimate {}", st.mean[3]);
}

#[test]
fn systematic_resampling_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let weights = [0.05, 0.4, 0.0, 0.15, 0.3, 0.1];
    let n = weights.len();
    for _ in 0..100 {
        let idx = systematic_resample(&weights, &mut rng);
        assert_eq!(idx.len(), n);
        for (i, w) in weights.iter().enumerate() {
            let c = idx.iter().filter(|&&a| a == i).count() as f64;
            let e = w * n as f64;
            assert!(c >= e.floor() - 1e-9 && c <= e.ceil() + 1e-9, "index {i}: {c} copies for expectation {e}");
        }
    }
    let uniform = vec![0.125; 8];
    let mut idx = systematic_resample(&uniform, &mut rng);
    idx.sort_unstable();
    assert_eq!(idx, (0..8).collect::<Vec<_>>());
}

#[test]
fn particle_step_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut ps = ParticleSet::new(PoseBev::default(), 4000, ParticleConfig::default()).unwrap();
    for (i, p) in ps.particles.iter_mut().enumerate() {
        p.x = i as f64;
    }
    let mut scores = vec![0.0; 4000];
    scores[1234] = 1.0;
    let (next, rects) = particle_step(&ps, &scores, spec(), &mut rng).unwrap();
    assert_eq!(rects.len(), 4000);
    assert!((next.effective_sample_size() - 4000.0).abs() < 1e-6);
    let near: Vec<&Rect> = rects.iter().filter(|r| (r.pose.x - 1234.0).abs() < 2.0).collect();
    let floor_mass = 3999.0 * 1e-6 / (1.0 + 4000.0 * 1e-6);
    assert!(near.len() as f64 >= 4000.0 * (1.0 - floor_mass) - 1.0, "{} offspring of the heavy particle", near.len());
    let k = near.len() as f64;
    let mx = near.iter().map(|r| r.pose.x).sum::<f64>() / k;
    let sx = (near.iter().map(|r| (r.pose.x - mx).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
    let sth = (near.iter().map(|r| r.pose.theta.powi(2)).sum::<f64>() / k).sqrt();
    assert!((mx - 1234.0).abs() < 4.0 * 0.3 / k.sqrt(), "mean {mx}");
    assert!((sx - 0.3).abs() < 0.02, "spread {sx}");
    assert!((sth - 3f64.to_radians()).abs() < 0.003, "heading spread {sth}");
    assert!(particle_step(&ps, &scores[1..], spec(), &mut rng).is_err());
    assert!(ParticleSet::new(PoseBev::default(), 0, ParticleConfig::default()).is_err());
}

#[test]
fn exhaustive_grid_contains_ground_truth() {
    let grid = GridSpec::default();
    assert_eq!(grid.counts(), (17, 9));
    let prev = PoseBev::new(10.0, 5.0, 1.0);
    let gt = PoseBev::new(10.37, 4.81, 1.07);
    let rects = exhaustive_propose(prev, gt, spec(), &grid);
    assert_eq!(rects.len(), 17 * 17 * 9 + 1);
    let gt_rect = Rect { pose: gt, w: spec().w, l: spec().l };
    assert!(rects.iter().any(|r| *r == gt_rect));
    let best = rects.iter().map(|r| oriented_iou(r, &gt_rect)).fold(0.0, f64::max);
    assert!((best - 1.0).abs() < 1e-12);
    assert!(rects.iter().any(|r| (r.pose.x - prev.x).abs() < 1e-12 && (r.pose.z - prev.z).abs() < 1e-12 && (r.pose.theta - prev.theta).abs() < 1e-12));
    for r in &rects[..rects.len() - 1] {
        let (xl, zl) = prev.to_local(r.pose.x, r.pose.z);
        assert!(xl.abs() <= 2.0 + 1e-9 && zl.abs() <= 2.0 + 1e-9);
    }
}
