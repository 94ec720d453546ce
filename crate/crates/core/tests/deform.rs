use dynsplat::autodiff::Tape;
use dynsplat::deform::{lgd_deform, CanonicalTimes, DeformDecoder, HexPlane, HexPlaneConfig};
use dynsplat::nn::Bindings;
use dynsplat::scaffold::NeuralGaussians;
use dynsplat::tia::{TiaSchedule, TiaState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Planes whose first channel reads back `t`: every plane is 1 except the
/// xt plane, which holds the grid's time coordinate along its second axis.
fn time_ramp_planes(rng: &mut ChaCha8Rng) -> HexPlane {
    let cfg = HexPlaneConfig {
        resolution: [3, 3, 3, 5],
        scales: 1,
        multiplier: 2,
        channels: 2,
        bounds: [[-1.0; 3], [1.0; 3]],
    };
    let mut h = HexPlane::new(cfg, rng).unwrap();
    for p in 0..6 {
        let plane = h.plane_mut(0, p);
        let shape = plane.shape().to_vec();
        let (ra, rb, c) = (shape[0], shape[1], shape[2]);
        let v = plane.values_mut();
        for a in 0..ra {
            for b in 0..rb {
                for ch in 0..c {
                    v[(a * rb + b) * c + ch] = if p == 3 && ch == 0 { b as f64 / (rb - 1) as f64 } else { 1.0 };
                }
            }
        }
    }
    h
}

#[test]
fn rigid_drift_from_constructed_planes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let planes = time_ramp_planes(&mut rng);
    for t in [0.0, 0.3, 0.71, 1.0] {
        let q = planes.query([0.2, -0.4, 0.9], t);
        assert!((q[0] - t).abs() < 1e-12, "ramp reads {} at t={t}", q[0]);
    }

    // trunk passes channel 0 through; the position head maps it to +x at speed v
    let v = 0.35;
    let mut dec = DeformDecoder::gaussian(&mut rng, 2, 4);
    for l in dec.trunk.iter_mut() {
        l.zero_();
        l.weight.values_mut()[0] = 1.0;
    }
    dec.heads[0].1.weight.values_mut()[0] = v;

    let m = 20;
    let centers: Vec<f64> = (0..m * 3).map(|_| rng.random_range(-0.9..0.9)).collect();
    for t in [0.0, 0.25, 0.6, 0.93, 1.0] {
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        let pv = planes.bind(&mut tape, &mut b, "planes");
        let dv = dec.bind(&mut tape, &mut b, "dec");
        let g = NeuralGaussians {
            centers: tape.constant(&[m, 3], centers.clone()).unwrap(),
            quats: tape.constant(&[m, 4], [1.0, 0.0, 0.0, 0.0].repeat(m)).unwrap(),
            log_scales: tape.constant(&[m, 3], vec![-3.0; m * 3]).unwrap(),
            opacity: tape.constant(&[m, 1], vec![0.5; m]).unwrap(),
            colors: tape.constant(&[m, 3], vec![0.2; m * 3]).unwrap(),
        };
        let out = lgd_deform(&mut tape, &g, &pv, &dv, t).unwrap();
        let moved = tape.value(out.centers);
        for i in 0..m {
            assert!((moved[i * 3] - centers[i * 3] - v * t).abs() < 1e-6);
            assert!((moved[i * 3 + 1] - centers[i * 3 + 1]).abs() < 1e-6);
            assert!((moved[i * 3 + 2] - centers[i * 3 + 2]).abs() < 1e-6);
        }
        assert_eq!(tape.value(out.quats), tape.value(g.quats));
        assert_eq!(tape.value(out.opacity), tape.value(g.opacity));
    }
}

/// Straight-line shrink step over the full list `0, t_1 … t_{l−1}, 1`,
/// with only the `≤` guards and no positive-width check.
fn unguarded_shrink(t: &mut [f64], over: &[bool], s: f64) {
    let l = over.len();
    for j in 0..l {
        if !over[j] {
            continue;
        }
        if j != 0 && t[j] <= t[j + 1] - s {
            t[j] += s;
        }
        if j != l - 1 && t[j] <= t[j + 1] - s {
            t[j + 1] -= s;
        }
    }
}

fn one_adjust(boundaries: &[f64], g: &[f64], tau: f64, step: f64) -> Vec<f64> {
    let times = CanonicalTimes::from_boundaries(boundaries.to_vec()).unwrap();
    let sched = TiaSchedule {
        from: 1,
        until: 10,
        period: 1,
    };
    let mut s = TiaState::new(times.clone(), sched, tau, step);
    for (j, &gj) in g.iter().enumerate() {
        let (lo, hi) = times.interval(j);
        s.accumulate(0.5 * (lo + hi), gj);
    }
    assert!(s.adjust(1));
    s.times.boundaries().to_vec()
}

#[test]
fn equal_accumulations_follow_the_sequential_loop() {
    let start = [0.25, 0.5, 0.75];
    let got = one_adjust(&start, &[2.0; 4], 1.0, 0.05);

    let mut t = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    unguarded_shrink(&mut t, &[true; 4], 0.05);
    assert_eq!(got, t[1..4].to_vec());
    // each interior boundary is pulled in by one segment and pushed back by the next
    assert_eq!(got, start.to_vec());

    let skewed = one_adjust(&[0.1, 0.5, 0.7], &[3.0; 4], 0.0, 0.05);
    let mut t = vec![0.0, 0.1, 0.5, 0.7, 1.0];
    unguarded_shrink(&mut t, &[true; 4], 0.05);
    assert_eq!(skewed, t[1..4].to_vec());
}

#[test]
fn segment_of_exactly_one_step_is_not_collapsed() {
    // Segment 1 is [0.25, 0.3125), exactly one step wide, and the only one
    // over threshold. The unguarded update moves t_1 onto t_2.
    let step = 0.0625;
    let start = [0.25, 0.3125, 0.75];
    let g = [1.0, 5.0, 1.0, 1.0];

    let mut t = vec![0.0, 0.25, 0.3125, 0.75, 1.0];
    unguarded_shrink(&mut t, &[false, true, false, false], step);
    assert_eq!(t[1], t[2], "unguarded update should produce a zero-width segment");

    let got = one_adjust(&start, &g, 1.0, step);
    assert_eq!(got, start.to_vec());
    assert!(got.windows(2).all(|w| w[0] < w[1]));
}
