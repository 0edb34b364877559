use bevtrack::bev::{BevConfig, BevImage};
use bevtrack::geom::*;
use bevtrack::harness::{synthesize, SceneConfig};
use bevtrack::model::{NetConfig, Networks};
use bevtrack::net::{bce, sgd_step, sigmoid, smooth_l1};
use bevtrack::rpn2d::{build_anchor_grid, AnchorGrid, RpnOutput, NUM_ANCHORS};
use bevtrack::train::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn car() -> BoxSpec {
    BoxSpec::new(1.8, 4.2, 1.5).unwrap()
}

fn random_setup(rng: &mut ChaCha8Rng) -> (AnchorGrid, Rect) {
    let prev = PoseBev::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-3.0..3.0));
    let img = BevImage::zeros(3, 255, prev, 5.0);
    let grid = build_anchor_grid(prev, car(), &img);
    let (x, z) = prev.to_world(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let gt = Rect::new(x, z, prev.theta + rng.random_range(-0.15..0.15), car().w, car().l);
    (grid, gt)
}

/// Separating-axis test: true when the closed rectangles share a point.
fn overlaps(a: &Rect, b: &Rect) -> bool {
    let (ca, cb) = (a.corners(), b.corners());
    for poly in [&ca, &cb] {
        for i in 0..4 {
            let e = [poly[(i + 1) % 4][0] - poly[i][0], poly[(i + 1) % 4][1] - poly[i][1]];
            let n = [-e[1], e[0]];
            let proj = |c: &[[f64; 2]; 4]| {
                c.iter()
                    .map(|p| p[0] * n[0] + p[1] * n[1])
                    .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)))
            };
            let (a0, a1) = proj(&ca);
            let (b0, b1) = proj(&cb);
            if a1 < b0 - 1e-9 || b1 < a0 - 1e-9 {
                return false;
            }
        }
    }
    true
}

fn mc_iou(a: &Rect, b: &Rect, rng: &mut ChaCha8Rng) -> f64 {
    let (mut both, mut either) = (0, 0);
    for _ in 0..20_000 {
        let x = rng.random_range(-1.0..1.0);
        let z = rng.random_range(-1.0..1.0);
        let (px, pz) = a.pose.to_world(x * 4.0, z * 4.0);
        let (ia, ib) = (a.contains(px, pz), b.contains(px, pz));
        both += (ia && ib) as usize;
        either += (ia || ib) as usize;
    }
    both as f64 / either.max(1) as f64
}

fn random_output(rng: &mut ChaCha8Rng) -> RpnOutput {
    let logits: Vec<f64> = (0..NUM_ANCHORS).map(|_| rng.random_range(-4.0..4.0)).collect();
    RpnOutput {
        cls: logits.iter().map(|&z| sigmoid(z)).collect(),
        logits,
        reg: (0..NUM_ANCHORS).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect(),
    }
}

#[test]
fn anchor_batches_have_verified_tiers() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..5 {
        let (grid, gt) = random_setup(&mut rng);
        assert_eq!(grid.len(), 1445);
        let batch = select_training_anchors(&grid, &gt, &mut rng).unwrap();
        assert_eq!(batch.entries.len(), 48);
        let np = batch.num_positive();
        assert!(np <= 16);
        let mid = batch.entries.iter().filter(|e| e.label == AnchorLabel::MidNegative).count();
        assert!(mid <= 16);
        let mut seen = std::collections::HashSet::new();
        for e in &batch.entries {
            assert!(seen.insert(e.index), "anchor sampled twice");
            let a = grid.anchors[e.index];
            match e.label {
                AnchorLabel::ZeroNegative => assert!(!overlaps(&a, &gt)),
                AnchorLabel::MidNegative => {
                    assert!(overlaps(&a, &gt));
                    assert!(mc_iou(&a, &gt, &mut rng) < 0.53);
                }
                AnchorLabel::Positive => {
                    assert!(mc_iou(&a, &gt, &mut rng) > 0.47);
                    let back = grid.decode(e.index, e.target);
                    assert!(center_distance(&back.pose, &gt.pose) < 1e-9);
                }
            }
        }
    }
}

#[test]
fn centered_anchor_has_zero_target() {
    let prev = PoseBev::new(3.0, -1.0, 0.4);
    let grid = build_anchor_grid(prev, car(), &BevImage::zeros(3, 255, prev, 5.0));
    let center = bevtrack::rpn2d::anchor_index(2, 8, 8);
    let gt = Rect::new(prev.x, prev.z, prev.theta, car().w, car().l);
    let t = grid.encode(center, &gt);
    assert!(t[0].abs() < 1e-12 && t[1].abs() < 1e-12);
}

fn oracle_rpn(out: &RpnOutput, batch: &AnchorBatch) -> (f64, f64) {
    let mut cls = 0.0;
    let mut reg = 0.0;
    let mut np = 0.0;
    for e in &batch.entries {
        let p = out.cls[e.index].clamp(1e-7, 1.0 - 1e-7);
        if e.label == AnchorLabel::Positive {
            cls -= p.ln();
            np += 1.0;
            for k in 0..2 {
                let d: f64 = out.reg[e.index][k] - e.target[k];
                reg += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            }
        } else {
            cls -= (1.0 - p).ln();
        }
    }
    (cls / 48.0, if np > 0.0 { reg / (2.0 * np) } else { 0.0 })
}

#[test]
fn rpn_loss_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let (grid, gt) = random_setup(&mut rng);
        let batch = select_training_anchors(&grid, &gt, &mut rng).unwrap();
        let out = random_output(&mut rng);
        let l = rpn_loss(&out, &batch);
        let (c, r) = oracle_rpn(&out, &batch);
        assert!((l.l_cls - c).abs() < 1e-6, "{} vs {c}", l.l_cls);
        assert!((l.l_reg - r).abs() < 1e-6, "{} vs {r}", l.l_reg);
    }
}

#[test]
fn rpn_loss_special_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (grid, gt) = random_setup(&mut rng);
    let batch = select_training_anchors(&grid, &gt, &mut rng).unwrap();
    let mut out = RpnOutput {
        logits: vec![0.0; NUM_ANCHORS],
        cls: vec![0.5; NUM_ANCHORS],
        reg: vec![[0.0, 0.0]; NUM_ANCHORS],
    };
    assert!((rpn_loss(&out, &batch).l_cls - 2f64.ln()).abs() < 1e-12);
    for e in &batch.entries {
        let pos = e.label == AnchorLabel::Positive;
        out.cls[e.index] = if pos { 1.0 } else { 0.0 };
        out.reg[e.index] = e.target;
    }
    let l = rpn_loss(&out, &batch);
    assert!(l.l_cls < 1e-6 && l.l_reg == 0.0);
    let negatives = AnchorBatch {
        entries: batch.entries.iter().copied().filter(|e| e.label != AnchorLabel::Positive).collect(),
    };
    assert_eq!(rpn_loss(&random_output(&mut rng), &negatives).l_reg, 0.0);
}

#[test]
fn analytic_spot_values() {
    assert!((bce(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
    assert_eq!(smooth_l1(0.5).0, 0.125);
    assert_eq!(smooth_l1(2.0).0, 1.5);
    assert_eq!(smooth_l1(-2.0).0, 1.5);
    assert_eq!(gaussian_score(0.0, 1.0).unwrap(), 1.0);
    let w = LossWeights::default();
    assert_eq!(total_loss(&LossParts::default(), &w), 0.0);
    let p = LossParts {
        l_cls: 2.0,
        l_reg: 3.0,
        l_tr: 5.0,
        l_comp: 7.0,
    };
    assert!((total_loss(&p, &w) - (2e-2 + 3.0 + 5e-2 + 7e-6)).abs() < 1e-15);
}

fn small_nets(seed: u64) -> Networks<f32> {
    let mut cfg = NetConfig::default();
    cfg.shape.widths = vec![16, 32, 64];
    cfg.shape.latent = 32;
    cfg.shape.decoder_hidden = 64;
    cfg.shape.decoder_points = 128;
    Networks::new(cfg, seed)
}

fn shape(rng: &mut ChaCha8Rng, n: usize) -> ShapeSample {
    let pc = PointCloud::new((0..n).map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-0.7..0.7), rng.random_range(-0.9..0.9)]).collect());
    resample_shape(&pc, rng).unwrap()
}

#[test]
fn tracking_and_completion_losses_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let nets = small_nets(1);
    for _ in 0..5 {
        let model = shape(&mut rng, 700);
        let gt = Rect::new(0.0, 0.0, 0.0, 1.8, 4.2);
        let mut rects = Vec::new();
        let mut cands = Vec::new();
        for i in 0..48 {
            rects.push(Rect::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0, 1.8, 4.2));
            cands.push((i % 7 != 3).then(|| shape(&mut rng, 50 + i * 10)));
        }
        let sigma = 1.0;
        let got = tracking_loss(&nets, &cands, &model, &rects, &gt, sigma).unwrap();
        let v = nets.shape.encode(&nets.store, &model).unwrap().0;
        let (mut sum, mut n) = (0.0, 0.0);
        for (c, r) in cands.iter().zip(&rects) {
            let Some(c) = c else { continue };
            let u = nets.shape.encode(&nets.store, c).unwrap().0;
            let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let dist = ((r.pose.x - gt.pose.x).powi(2) + (r.pose.z - gt.pose.z).powi(2)).sqrt();
            let rho = (-dist * dist / (2.0 * sigma * sigma)).exp();
            sum += (d / (nu * nv) - rho).powi(2);
            n += 1.0;
        }
        assert!((got - sum / n).abs() < 1e-6, "{got} vs {}", sum / n);

        let target = PointCloud::new((0..300).map(|_| [rng.random(), rng.random(), rng.random()]).collect());
        let got = completion_loss(&nets, &model, &target).unwrap().unwrap();
        let z = nets.shape.encode(&nets.store, &model).unwrap();
        let decoded = nets.shape.decode(&nets.store, &z).unwrap().points;
        let want = chamfer(&decoded, &target.points).unwrap();
        assert!((got - want).abs() <= 1e-6 * want.max(1.0), "{got} vs {want}");
        assert!(got >= 0.0);
    }
    let model = shape(&mut rng, 100);
    assert_eq!(completion_loss(&nets, &model, &PointCloud::default()).unwrap(), None);
}

fn example(seed: u64) -> (Example, BevConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = synthesize(&SceneConfig {
        n_tracklets: 1,
        frames: 4,
        seed,
        ..SceneConfig::default()
    })
    .unwrap()
    .remove(0);
    let bev = BevConfig::default();
    let crops = TrackletCrops::new(&t);
    (prepare_example(&t, &crops, 3, &bev, 1.0, &Jitter::default(), &mut rng).unwrap(), bev)
}

#[test]
fn zero_weights_leave_other_terms_unchanged() {
    let (ex, _) = example(5);
    let mut nets = small_nets(2);
    let full = forward_backward(&mut nets, &ex, &LossWeights::default(), true).unwrap();
    let tracking_only = LossWeights {
        comp: 0.0,
        ..LossWeights::default()
    };
    let part = forward_backward(&mut nets, &ex, &tracking_only, true).unwrap();
    assert_eq!(full, part);
    assert!(full.l_cls >= 0.0 && full.l_reg >= 0.0 && full.l_tr >= 0.0 && full.l_comp >= 0.0);
}

#[test]
fn overfits_a_repeated_frame() {
    let (ex, _) = example(6);
    let mut nets = Networks::<f32>::new(NetConfig::default(), 3);
    let w = LossWeights {
        cls: 1.0,
        reg: 1.0,
        tr: 1.0,
        comp: 1e-4,
    };
    let first = total_loss(&forward_backward(&mut nets, &ex, &w, false).unwrap(), &w);
    for _ in 0..50 {
        forward_backward(&mut nets, &ex, &w, true).unwrap();
        sgd_step(&mut nets.store, 2e-3, 0.9).unwrap();
    }
    let last = total_loss(&forward_backward(&mut nets, &ex, &w, false).unwrap(), &w);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn fit_is_deterministic() {
    let tracklets = synthesize(&SceneConfig {
        n_tracklets: 3,
        frames: 4,
        seed: 9,
        ..SceneConfig::default()
    })
    .unwrap();
    let mut cfg = TrainConfig::default();
    cfg.net = NetConfig {
        shape: small_nets(0).config.shape,
        ..NetConfig::default()
    };
    cfg.pretrain.epochs = 1;
    cfg.finetune.epochs = 1;
    let a = fit(&tracklets, &cfg).unwrap();
    let b = fit(&tracklets, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert!(!a.history.is_empty());
    let va: Vec<&Vec<f32>> = a.nets.store.iter().map(|p| &p.value).collect();
    let vb: Vec<&Vec<f32>> = b.nets.store.iter().map(|p| &p.value).collect();
    assert_eq!(va, vb);
    assert!(fit(&[], &cfg).is_err());
}
