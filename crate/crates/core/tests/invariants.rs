use std::collections::HashSet;

use dynsplat::deform::CanonicalTimes;
use dynsplat::pipeline::{read_container, write_container, Block};
use dynsplat::render::{build_covariance, composite, project, Camera, CovarianceConvention, Gaussian3D, Splat2D, COV2D_DILATION};
use dynsplat::scaffold::{init_from_points, voxel_cell};
use dynsplat::tia::{TiaSchedule, TiaState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule() -> TiaSchedule {
    TiaSchedule {
        from: 1,
        until: 10_000,
        period: 5,
    }
}

/// Pinhole projection of a point, written out from the camera fields.
fn pinhole(cam: &Camera, p: [f64; 3]) -> [f64; 2] {
    let v = cam.view;
    let q: Vec<f64> = (0..3).map(|i| v[i][0] * p[0] + v[i][1] * p[1] + v[i][2] * p[2] + v[i][3]).collect();
    [cam.fx * q[0] / q[2] + cam.cx, cam.fy * q[1] / q[2] + cam.cy]
}

fn splat() -> impl Strategy<Value = Splat2D> {
    (
        (-4.0..12.0f64, -4.0..12.0f64),
        (0.3..5.0f64, 0.3..5.0f64, -0.9..0.9f64),
        0.0..1.0f64,
        (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64),
    )
        .prop_map(|((mx, my), (sx, sy, rho), opacity, (r, g, b))| Splat2D {
            mean: [mx, my],
            cov: [sx * sx, rho * sx * sy, sy * sy],
            opacity,
            color: [r, g, b],
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tia_keeps_order_bounds_and_count(
        l in 2usize..12,
        step in 0.001..0.2f64,
        tau in 0.0..2.0f64,
        normalized in any::<bool>(),
        stream in prop::collection::vec((0.0..=1.0f64, 0.0..10.0f64), 1..400),
    ) {
        let mut s = TiaState::new(CanonicalTimes::uniform(l).unwrap(), schedule(), tau, step);
        s.compare_normalized = normalized;
        for (i, &(t, g)) in stream.iter().enumerate() {
            let iter = i as u64 + 1;
            let before = s.times.boundaries().to_vec();
            s.accumulate(t, g);
            s.adjust(iter);
            let b = s.times.boundaries();
            prop_assert_eq!(b.len(), l - 1);
            prop_assert!(b.windows(2).all(|w| w[0] < w[1]), "order broken: {:?}", b);
            prop_assert!(b.iter().all(|&x| x > 0.0 && x < 1.0), "out of (0,1): {:?}", b);
            for (x, y) in b.iter().zip(&before) {
                prop_assert!((x - y).abs() <= step * (1.0 + 1e-12));
            }
            prop_assert_eq!(s.g_acc.len(), l);
            prop_assert!(s.g_acc.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn tia_is_deterministic(
        l in 2usize..10,
        stream in prop::collection::vec((0.0..=1.0f64, 0.0..10.0f64), 1..200),
    ) {
        let run = || {
            let mut s = TiaState::new(CanonicalTimes::uniform(l).unwrap(), schedule(), 1.0, 0.03);
            for (i, &(t, g)) in stream.iter().enumerate() {
                s.accumulate(t, g);
                s.adjust(i as u64 + 1);
            }
            s.log
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn tia_without_samples_keeps_times(l in 2usize..12, iters in 1u64..60) {
        let mut s = TiaState::new(CanonicalTimes::uniform(l).unwrap(), schedule(), 1.0, 0.05);
        for iter in 1..=iters {
            s.adjust(iter);
        }
        prop_assert_eq!(s.times, CanonicalTimes::uniform(l).unwrap());
    }

    #[test]
    fn segment_membership(bounds in prop::collection::btree_set(1u32..999, 1..9), t in 0.0..=1.0f64) {
        let b: Vec<f64> = bounds.iter().map(|&v| v as f64 / 1000.0).collect();
        let times = CanonicalTimes::from_boundaries(b.clone()).unwrap();
        let (j, tc) = times.canonical_time_of(t);
        let (lo, hi) = times.interval(j);
        prop_assert!(lo <= t && (t < hi || (t == 1.0 && hi == 1.0)));
        prop_assert_eq!(tc, 0.5 * (lo + hi));
    }

    #[test]
    fn transmittance_bounded_and_monotone(
        splats in prop::collection::vec(splat(), 0..30),
        px in 0.0..8.0f64,
        py in 0.0..8.0f64,
    ) {
        let mut prev = 1.0;
        for k in 0..=splats.len() {
            let p = composite(&splats[..k], [px, py], [0.0; 3]);
            prop_assert!((0.0..=1.0).contains(&p.transmittance));
            prop_assert!(p.transmittance <= prev);
            prop_assert!(p.color.iter().all(|&c| (0.0..=1.0 + 1e-12).contains(&c)));
            prev = p.transmittance;
        }
    }

    #[test]
    fn anchors_match_distinct_cells(
        pts in prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64), 1..1000),
        voxel in 0.05..1.0f64,
    ) {
        let pts: Vec<[f64; 3]> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let set = init_from_points(&pts, voxel, 3, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cells: HashSet<[i64; 3]> = pts
            .iter()
            .map(|p| p.map(|v| (v / voxel).floor() as i64))
            .collect();
        prop_assert_eq!(set.len(), cells.len());
        prop_assert!(set.cells_unique());
    }

    #[test]
    fn grow_then_prune_matches_recount(
        pts in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..60),
        offsets in prop::collection::vec(-3.0..3.0f64, 360),
        grads in prop::collection::vec(0.0..1.0f64, 120),
        opacity in prop::collection::vec(0.0..1.0f64, 360),
        threshold in 0.0..1.0f64,
        prune in 0.0..0.6f64,
    ) {
        let pts: Vec<[f64; 3]> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let k = 2;
        let mut set = init_from_points(&pts, 0.25, k, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let n = set.len();
        set.offsets.values_mut().copy_from_slice(&offsets[..n * 3 * k]);
        set.accumulate_growth(&grads[..n * k], &vec![true; n * k]);

        // oracle: distinct empty cells under above-threshold Gaussians
        let mut occupied: HashSet<_> = set.cells().into_iter().collect();
        let mut expect_new = 0;
        for (g, c) in set.neural_centers().iter().enumerate() {
            if grads[g] > threshold && occupied.insert(voxel_cell(*c, 0.25)) {
                expect_new += 1;
            }
        }
        let added = set.grow_anchors(threshold);
        prop_assert_eq!(added, expect_new);
        prop_assert_eq!(set.len(), n + expect_new);
        prop_assert!(set.cells_unique());

        let m = set.len();
        set.accumulate_opacity(&opacity[..m * k]);
        let means: Vec<f64> = opacity[..m * k].chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect();
        let mut survivors = means.iter().filter(|&&o| o >= prune).count();
        if survivors == 0 {
            survivors = 1;
        }
        let report = set.prune_anchors(prune);
        prop_assert_eq!(set.len(), survivors);
        prop_assert_eq!(report.removed, m - survivors);
        prop_assert!(set.cells_unique());
    }

    #[test]
    fn container_round_trip(
        blocks in prop::collection::vec(
            ("[a-z/_]{1,12}", prop::collection::vec(-1e6..1e6f64, 0..20), any::<bool>(), "[ -~]{0,30}"),
            0..8,
        ),
    ) {
        let blocks: Vec<Block> = blocks
            .into_iter()
            .map(|(name, v, text, s)| if text { Block::text(name, s) } else { Block::f64(name, &[v.len()], v) })
            .collect();
        let bytes = write_container(&blocks);
        prop_assert_eq!(bytes.len() as u64, 8 + blocks.iter().map(Block::size).sum::<u64>());
        prop_assert_eq!(read_container(&bytes).unwrap(), blocks);
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        prop_assert!(read_container(&bad).is_err());
        if bytes.len() > 8 {
            prop_assert!(read_container(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn cov2d_matches_linearized_projection(
        center in (-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64),
        q in (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64),
        scale in (0.01..0.3f64, 0.01..0.3f64, 0.01..0.3f64),
        eye in (-3.0..3.0f64, -3.0..3.0f64, 2.0..4.0f64),
        transposed in any::<bool>(),
    ) {
        prop_assume!(q.0 * q.0 + q.1 * q.1 + q.2 * q.2 + q.3 * q.3 > 0.05);
        let cam = Camera::look_at([eye.0, eye.1, eye.2], [0.0; 3], [0.0, 1.0, 0.0], 0.9, 64, 48).unwrap();
        let g = Gaussian3D::new([center.0, center.1, center.2], [q.0, q.1, q.2, q.3], [scale.0, scale.1, scale.2], 0.5, [0.5; 3]).unwrap();
        let conv = if transposed { CovarianceConvention::Transposed } else { CovarianceConvention::AsPrinted };
        let p = project(&g, &cam, conv).unwrap();

        // Jacobian of the pinhole map by central differences, then Jp Σ Jpᵀ.
        let h = 1e-6;
        let mut jp = [[0.0; 3]; 2];
        for k in 0..3 {
            let mut a = g.center;
            let mut b = g.center;
            a[k] += h;
            b[k] -= h;
            let (pa, pb) = (pinhole(&cam, a), pinhole(&cam, b));
            for r in 0..2 {
                jp[r][k] = (pa[r] - pb[r]) / (2.0 * h);
            }
        }
        let sigma = build_covariance(g.rotation, g.scale).unwrap();
        let mut want = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                for i in 0..3 {
                    for j in 0..3 {
                        want[r][c] += jp[r][i] * sigma[i][j] * jp[c][j];
                    }
                }
            }
        }
        let got = [[p.cov2d[0] - COV2D_DILATION, p.cov2d[1]], [p.cov2d[1], p.cov2d[2] - COV2D_DILATION]];
        let scale_ref = want[0][0].abs().max(want[1][1].abs()).max(1e-3);
        for r in 0..2 {
            for c in 0..2 {
                prop_assert!((got[r][c] - want[r][c]).abs() <= 1e-5 * scale_ref, "{:?} vs {:?}", got, want);
            }
        }
        let uv = pinhole(&cam, g.center);
        prop_assert!((p.mean2d[0] - uv[0]).abs() < 1e-9 && (p.mean2d[1] - uv[1]).abs() < 1e-9);
    }
}
