mod common;

use common::{group_image, rel_err, relabel};
use junctionforge_core::field::*;
use junctionforge_core::geometry::{reflect_x, swap_xy};
use junctionforge_core::layout::*;
use junctionforge_core::optimize::evaluate;
use junctionforge_core::pseudo::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn baseline() -> Layout {
    build_x_junction(LayoutDims::default()).unwrap()
}

fn uniform(l: &Layout, v: f64) -> VoltageAssignment {
    VoltageAssignment::uniform(&l.rf_groups(), v, DriveConfig::default())
}

fn settings(range: [f64; 2], step: f64) -> TraceSettings {
    TraceSettings {
        range,
        step,
        ..TraceSettings::default()
    }
}

fn tied(l: &Layout, mode: TieMode, rng: &mut ChaCha8Rng) -> VoltageAssignment {
    let ties = symmetry_ties(l, mode);
    let vals: Vec<f64> = (0..ties.classes.len()).map(|_| rng.gen_range(80.0..120.0)).collect();
    VoltageAssignment::new(ties.expand(&vals), DriveConfig::default())
}

#[test]
fn uniform_linear_trace_stays_on_axis_at_every_step() {
    let l = baseline();
    let basis = build_basis(&l).unwrap();
    let t = evaluate(&basis, &l, &uniform(&l, 100.0), &IonSpecies::YB171, PathMode::Linear, &settings([-500.0, 500.0], 1.0)).unwrap();
    assert_eq!(t.omitted, 0);
    assert_eq!(t.samples.len(), 1001);
    for (i, s) in t.samples.iter().enumerate() {
        assert!((s.pos[0] - (500.0 - i as f64)).abs() < 1e-9, "{s:?}");
        assert!(s.pos[1].abs() < 1e-6, "{s:?}");
        assert!(s.psi >= 0.0);
    }
}

#[test]
fn linear_trace_of_mirror_tied_voltages_is_symmetric() {
    let l = add_finger(&baseline(), FingerParams::default()).unwrap();
    let basis = build_basis(&l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let v = tied(&l, TieMode::Linear, &mut rng);
    let t = evaluate(&basis, &l, &v, &IonSpecies::YB171, PathMode::Linear, &settings([-400.0, 400.0], 2.0)).unwrap();
    let n = t.samples.len();
    assert_eq!(n, 401);
    for i in 0..n {
        let (a, b) = (&t.samples[i], &t.samples[n - 1 - i]);
        assert!((a.pos[0] + b.pos[0]).abs() < 1e-9);
        assert!((a.pos[2] - b.pos[2]).abs() <= 1e-6, "z({}) {} vs {}", a.pos[0], a.pos[2], b.pos[2]);
        assert!(rel_err(a.psi, b.psi) <= 1e-6);
    }
}

#[test]
fn corner_trace_of_swap_tied_voltages_is_symmetric() {
    let l = baseline();
    let basis = build_basis(&l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let v = tied(&l, TieMode::Corner, &mut rng);
    // Path coordinates run from s0 to −s0; a step dividing 2·s0 puts the grid symmetric about the diagonal.
    let probe = evaluate(&basis, &l, &v, &IonSpecies::YB171, PathMode::Corner, &settings([-300.0, 300.0], 50.0)).unwrap();
    let s0 = probe.samples[0].s;
    let step = 2.0 * s0 / 290.0;
    let t = evaluate(&basis, &l, &v, &IonSpecies::YB171, PathMode::Corner, &settings([-300.0, 300.0], step)).unwrap();
    let n = t.samples.len();
    assert_eq!(n, 291);
    for i in 0..n {
        let (a, b) = (&t.samples[i], &t.samples[n - 1 - i]);
        assert!((a.s + b.s).abs() < 1e-9, "{} vs {}", a.s, b.s);
        assert!((a.pos[0] - b.pos[1]).abs() <= 1e-5 && (a.pos[1] - b.pos[0]).abs() <= 1e-5, "{a:?} {b:?}");
        assert!((a.pos[2] - b.pos[2]).abs() <= 1e-6);
    }
}

#[test]
fn scaling_voltages_keeps_positions_and_scales_barrier() {
    let l = baseline();
    let basis = build_basis(&l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let v = tied(&l, TieMode::Corner, &mut rng);
    let s = settings([0.0, 400.0], 2.0);
    let a = evaluate(&basis, &l, &v, &IonSpecies::YB171, PathMode::Corner, &s).unwrap();
    let b = evaluate(&basis, &l, &v.scaled(2.0), &IonSpecies::YB171, PathMode::Corner, &s).unwrap();
    assert_eq!(a.samples.len(), b.samples.len());
    for (p, q) in a.samples.iter().zip(&b.samples) {
        for k in 0..3 {
            assert!((p.pos[k] - q.pos[k]).abs() <= 1e-6, "{p:?} {q:?}");
        }
        assert!(rel_err(q.psi, 4.0 * p.psi) <= 1e-9);
    }
    let (ma, mb) = (metrics(&a).unwrap(), metrics(&b).unwrap());
    assert!(rel_err(mb.barrier, 4.0 * ma.barrier) <= 1e-9);
}

#[test]
fn halving_the_step_barely_moves_the_barrier() {
    let l = baseline();
    let basis = build_basis(&l).unwrap();
    let v = uniform(&l, 100.0);
    for mode in [PathMode::Linear, PathMode::Corner] {
        let coarse = evaluate(&basis, &l, &v, &IonSpecies::YB171, mode, &settings([0.0, 500.0], 1.0)).unwrap();
        let fine = evaluate(&basis, &l, &v, &IonSpecies::YB171, mode, &settings([0.0, 500.0], 0.5)).unwrap();
        let (a, b) = (metrics(&coarse).unwrap().barrier, metrics(&fine).unwrap().barrier);
        assert!(rel_err(a, b) < 0.005, "{mode}: {a} vs {b}");
    }
}

#[test]
fn barrier_is_invariant_under_path_reversal() {
    // Mirroring an untied assignment through x = 0 runs the same transport backwards.
    let l = add_finger(&baseline(), FingerParams::default()).unwrap();
    let basis = build_basis(&l).unwrap();
    let image = group_image(&l, reflect_x);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let amps = l.rf_groups().into_iter().map(|g| (g, rng.gen_range(90.0..110.0))).collect();
    let v = VoltageAssignment::new(amps, DriveConfig::default());
    let w = VoltageAssignment::new(relabel(&v.amplitudes, &image), DriveConfig::default());
    let s = settings([-400.0, 400.0], 2.0);
    let a = evaluate(&basis, &l, &v, &IonSpecies::YB171, PathMode::Linear, &s).unwrap();
    let b = evaluate(&basis, &l, &w, &IonSpecies::YB171, PathMode::Linear, &s).unwrap();
    let (ma, mb) = (metrics(&a).unwrap(), metrics(&b).unwrap());
    assert!(rel_err(ma.barrier, mb.barrier) <= 1e-6, "{} vs {}", ma.barrier, mb.barrier);
    assert!((ma.height_var - mb.height_var).abs() <= 1e-6);
    assert!((ma.barrier_pos[0] + mb.barrier_pos[0]).abs() <= 1e-6);
}

#[test]
fn corner_swap_image_traces_the_same_barrier() {
    let l = baseline();
    let basis = build_basis(&l).unwrap();
    let image = group_image(&l, swap_xy);
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let amps = l.rf_groups().into_iter().map(|g| (g, rng.gen_range(90.0..110.0))).collect();
    let v = VoltageAssignment::new(amps, DriveConfig::default());
    let w = VoltageAssignment::new(relabel(&v.amplitudes, &image), DriveConfig::default());
    // The reversed run samples mirrored points only on a grid symmetric about the diagonal.
    let probe = evaluate(&basis, &l, &v, &IonSpecies::YB171, PathMode::Corner, &settings([-300.0, 300.0], 50.0)).unwrap();
    let s = settings([-300.0, 300.0], 2.0 * probe.samples[0].s / 290.0);
    let a = evaluate(&basis, &l, &v, &IonSpecies::YB171, PathMode::Corner, &s).unwrap();
    let b = evaluate(&basis, &l, &w, &IonSpecies::YB171, PathMode::Corner, &s).unwrap();
    let (ma, mb) = (metrics(&a).unwrap(), metrics(&b).unwrap());
    assert!(rel_err(ma.barrier, mb.barrier) <= 1e-6, "{ma:?} {mb:?}");
    assert!((ma.height_var - mb.height_var).abs() <= 1e-5);
    assert!((ma.barrier_pos[0] - mb.barrier_pos[1]).abs() <= 1e-5);
}

#[test]
fn trace_is_continuous_and_non_negative() {
    let l = add_finger(&baseline(), FingerParams::default()).unwrap();
    let basis = build_basis(&l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for mode in [PathMode::Corner, PathMode::Linear] {
        let v = tied(&l, mode.into(), &mut rng);
        let range = if mode == PathMode::Linear { [-500.0, 500.0] } else { [0.0, 500.0] };
        let t = evaluate(&basis, &l, &v, &IonSpecies::YB171, mode, &settings(range, 1.0)).unwrap();
        for w in t.samples.windows(2) {
            let d: f64 = (0..3).map(|k| (w[1].pos[k] - w[0].pos[k]).powi(2)).sum::<f64>().sqrt();
            assert!(d < 10.0, "{mode}: jump of {d} μm between {:?} and {:?}", w[0], w[1]);
            assert!(w[1].s < w[0].s);
        }
        assert!(t.samples.iter().all(|s| s.psi >= 0.0 && s.psi.is_finite()));
    }
}

#[test]
fn all_zero_voltages_are_unconfined() {
    let l = baseline();
    let basis = build_basis(&l).unwrap();
    let err = evaluate(&basis, &l, &uniform(&l, 0.0), &IonSpecies::YB171, PathMode::Corner, &TraceSettings::default()).unwrap_err();
    assert!(matches!(err, TraceError::Unconfined), "{err}");
}

#[test]
fn doubling_voltages_quadruples_the_map() {
    let l = baseline();
    let basis = build_basis(&l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let v = tied(&l, TieMode::Corner, &mut rng);
    let (a, b) = (GridAxis::with_step(-50.0, 250.0, 5.0), GridAxis::with_step(20.0, 200.0, 5.0));
    let plane = MapPlane::Xz { y: 0.0 };
    let m1 = sample_map(&basis, &v, &IonSpecies::YB171, plane, a, b).unwrap();
    let m2 = sample_map(&basis, &v.scaled(2.0), &IonSpecies::YB171, plane, a, b).unwrap();
    for (p, q) in m1.psi.iter().zip(&m2.psi) {
        assert!(rel_err(*q, 4.0 * p) <= 1e-12);
    }
}

#[test]
fn axial_map_ridge_sits_at_the_traced_barrier() {
    let l = baseline();
    let basis = build_basis(&l).unwrap();
    let v = uniform(&l, 100.0);
    let t = evaluate(&basis, &l, &v, &IonSpecies::YB171, PathMode::Linear, &settings([0.0, 300.0], 1.0)).unwrap();
    let m = metrics(&t).unwrap();
    let (a, b) = (GridAxis::with_step(0.0, 300.0, 1.0), GridAxis::with_step(40.0, 200.0, 0.25));
    let map = sample_map(&basis, &v, &IonSpecies::YB171, MapPlane::Xz { y: 0.0 }, a, b).unwrap();
    // On the y = 0 axis the null is the minimum over z of each column.
    let floor: Vec<f64> = (0..a.n)
        .map(|ia| (0..b.n).map(|ib| map.get(ia, ib)).fold(f64::INFINITY, f64::min))
        .collect();
    let (ridge, top) = floor
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &f)| if f > acc.1 { (i, f) } else { acc });
    let ridge_x = a.value(ridge);
    assert!((ridge_x - m.barrier_pos[0]).abs() <= 2.0, "ridge at {ridge_x}, trace at {:?}", m.barrier_pos);
    assert!((70.0..=130.0).contains(&ridge_x));
    assert!(rel_err(top, m.barrier) < 0.01, "{top} vs {}", m.barrier);
}
