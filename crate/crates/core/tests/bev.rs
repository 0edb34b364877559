use bevtrack::bev::*;
use bevtrack::geom::{PointCloud, PoseBev};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize, cx: f64, cz: f64) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    (cx + rng.random_range(-8.0..8.0)) as f32,
                    rng.random_range(-1.6..1.6) as f32,
                    (cz + rng.random_range(-8.0..8.0)) as f32,
                ]
            })
            .collect(),
    )
}

/// Bins by flooring crop-frame coordinates measured from the image corner.
fn brute_counts(pc: &PointCloud, center: PoseBev, y_ref: f64, extent: f64, size: usize, ve: f64) -> (Vec<u32>, usize) {
    let res = 2.0 * extent / size as f64;
    let mut counts = vec![0u32; size * size];
    let mut kept = 0;
    for p in &pc.points {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        if (y - y_ref).abs() > ve {
            continue;
        }
        let (u, v) = center.to_local(x, z);
        if u.abs() > extent || v.abs() > extent {
            continue;
        }
        let col = (((u + extent) / res).floor() as usize).min(size - 1);
        let row = (((v + extent) / res).floor() as usize).min(size - 1);
        counts[row * size + col] += 1;
        kept += 1;
    }
    (counts, kept)
}

#[test]
fn counts_match_brute_force_binning() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let cfg = BevConfig::default();
    for _ in 0..5 {
        let center = PoseBev::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let pc = cloud(&mut rng, 5000, center.x, center.z);
        let counts = cell_counts(&pc, center, 0.3, 5.0, 255, &cfg);
        let (want, kept) = brute_counts(&pc, center, 0.3, 5.0, 255, cfg.vertical_extent);
        let disagree = counts.iter().zip(&want).filter(|(a, b)| a != b).count();
        assert!(disagree <= 2, "{disagree} cells disagree");
        assert_eq!(counts.iter().map(|&c| c as usize).sum::<usize>(), kept);
        let img = rasterize_bev(&pc, center, 0.3, 5.0, 255, &cfg).unwrap();
        let occupied = img.plane(2).iter().filter(|&&v| v > 0.0).count();
        assert_eq!(occupied, counts.iter().filter(|&&c| c > 0).count());
    }
}

#[test]
fn channel_values_and_ranges() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let cfg = BevConfig {
        n_slices: 3,
        ..BevConfig::default()
    };
    let pc = cloud(&mut rng, 20_000, 0.0, 0.0);
    let img = rasterize_bev(&pc, PoseBev::default(), 0.0, 2.5, 127, &cfg).unwrap();
    assert_eq!(img.channels, 5);
    assert_eq!(img.data.len(), 5 * 127 * 127);
    assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    for cell in 0..127 * 127 {
        let slices: Vec<f32> = (0..3).map(|k| img.plane(k)[cell]).collect();
        let occupied = img.plane(4)[cell] > 0.0;
        assert_eq!(occupied, img.plane(3)[cell] > 0.0 || slices.iter().any(|&s| s > 0.0) || occupied);
        if !occupied {
            assert!(slices.iter().all(|&s| s == 0.0) && img.plane(3)[cell] == 0.0);
        }
    }

    let one = |y: f32, n: usize| {
        let pc = PointCloud::new(vec![[0.0, y, 0.0]; n]);
        rasterize_bev(&pc, PoseBev::default(), 0.0, 2.5, 127, &BevConfig::default()).unwrap()
    };
    let img = one(1.0, 1);
    assert_eq!(img.at(1, 63, 63), 1.0);
    assert_eq!(img.at(0, 63, 63), 1.0);
    assert!((img.at(2, 63, 63) as f64 - 2f64.ln() / 64f64.ln()).abs() < 1e-7);
    let img = one(0.0, 1);
    assert!((img.at(1, 63, 63) - 0.5).abs() < 1e-7);
    let mut last = 0.0;
    for n in [1, 2, 5, 20, 62, 63, 64, 500] {
        let d = one(0.0, n).at(2, 63, 63);
        assert!(d >= last);
        last = d;
    }
    assert_eq!(one(0.0, 63).at(2, 63, 63), 1.0);
    assert_eq!(one(0.0, 500).at(2, 63, 63), 1.0);
    assert!(one(1.01, 1).data.iter().all(|&v| v == 0.0));
}

#[test]
fn crop_frame_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cfg = BevConfig::default();
    let pc = cloud(&mut rng, 4000, 1.0, -2.0);
    let center = PoseBev::new(1.0, -2.0, 0.4);
    let base = rasterize_bev(&pc, center, 0.0, 5.0, 255, &cfg).unwrap();
    let rotated = PointCloud::new(pc.points.iter().map(|p| [-p[0], p[1], -p[2]]).collect());
    let rc = PoseBev::new(-1.0, 2.0, 0.4 + std::f64::consts::PI);
    let img = rasterize_bev(&rotated, rc, 0.0, 5.0, 255, &cfg).unwrap();
    let diff = base.data.iter().zip(&img.data).filter(|(a, b)| a != b).count();
    assert!(diff <= 3, "{diff} values differ");
}

#[test]
fn pixel_mapping() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let center = PoseBev::new(12.0, -4.0, 2.2);
    let img = BevImage::zeros(3, 255, center, 5.0);
    assert!((img.resolution - 10.0 / 255.0).abs() < 1e-15);
    let (c, r) = img.world_to_pixel(12.0, -4.0).unwrap();
    assert!((c - 127.0).abs() < 1e-9 && (r - 127.0).abs() < 1e-9);
    for _ in 0..1000 {
        let (x, z) = center.to_world(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (c, r) = img.world_to_pixel(x, z).unwrap();
        let (bx, bz) = img.pixel_to_world(c, r).unwrap();
        assert!(((bx - x).powi(2) + (bz - z).powi(2)).sqrt() < 1e-6);
    }
    let (fx, fz) = center.to_world(5.2, 0.0);
    assert!(img.world_to_pixel(fx, fz).is_err());
    assert!(img.pixel_to_world(300.0, 0.0).is_err());
    let model = BevImage::zeros(3, 127, center, 2.5);
    assert!((model.resolution / img.resolution - 1.0).abs() < 0.01);
}

#[test]
fn rejects_bad_rasters_and_dumps_pgm() {
    let cfg = BevConfig::default();
    let pc = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
    assert!(rasterize_bev(&pc, PoseBev::default(), 0.0, 5.0, 254, &cfg).is_err());
    assert!(rasterize_bev(&pc, PoseBev::default(), 0.0, 0.0, 255, &cfg).is_err());
    let img = rasterize_bev(&pc, PoseBev::default(), 0.0, 2.5, 127, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = img.write_pgm(dir.path(), "model").unwrap();
    assert_eq!(paths.len(), 3);
    assert!(paths[2].ends_with("model_c2.pgm"));
    let bytes = std::fs::read(&paths[1]).unwrap();
    let header = b"P5\n127 127\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 127 * 127);
    assert_eq!(bytes[header.len() + 63 * 127 + 63], 128);
}
