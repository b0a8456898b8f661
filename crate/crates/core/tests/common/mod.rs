//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use junctionforge_core::field::Point;
use junctionforge_core::geometry::Polygon;

// Gauss–Kronrod 7/15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let d = h * XGK[i];
        let s = f(c - d) + f(c + d);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod integral of `f` over `[a, b]` to absolute `tol`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol || depth == 0 || (b - a).abs() < 1e-12 {
            return v;
        }
        let m = 0.5 * (a + b);
        rec(f, a, m, 0.5 * tol, depth - 1) + rec(f, m, b, 0.5 * tol, depth - 1)
    }
    rec(f, a, b, tol, 40)
}

/// x intervals where the horizontal line at `y` is inside the polygon.
fn scanline(poly: &Polygon, y: f64) -> Vec<(f64, f64)> {
    let mut xs = Vec::new();
    for (a, b) in poly.edges() {
        let (lo, hi) = if a[1] < b[1] { (a, b) } else { (b, a) };
        if y >= lo[1] && y < hi[1] {
            let t = (y - lo[1]) / (hi[1] - lo[1]);
            xs.push(lo[0] + t * (hi[0] - lo[0]));
        }
    }
    xs.sort_by(f64::total_cmp);
    xs.chunks(2).filter(|c| c.len() == 2).map(|c| (c[0], c[1])).collect()
}

/// Potential fraction of a unit-voltage patch by direct quadrature of the
/// plane kernel `(z/2π) ∬ dA' / |r − r'|³`.
pub fn quadrature_potential(poly: &Polygon, p: &Point) -> f64 {
    let kernel = |x: f64, y: f64| {
        let r2 = (x - p.x).powi(2) + (y - p.y).powi(2) + p.z * p.z;
        p.z / (2.0 * PI) / (r2 * r2.sqrt())
    };
    let mut ys: Vec<f64> = poly.vertices.iter().map(|v| v[1]).collect();
    ys.push(p.y);
    ys.sort_by(f64::total_cmp);
    ys.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let (ymin, ymax) = (poly.bbox().y1, poly.bbox().y2);
    let row = |y: f64| -> f64 {
        scanline(poly, y)
            .into_iter()
            .map(|(x0, x1)| {
                let mut cuts = vec![x0, x1];
                if p.x > x0 && p.x < x1 {
                    cuts.insert(1, p.x);
                }
                cuts.windows(2).map(|w| integrate(&|x| kernel(x, y), w[0], w[1], 1e-15)).sum::<f64>()
            })
            .sum()
    };
    ys.windows(2)
        .filter(|w| w[0] >= ymin && w[1] <= ymax)
        .map(|w| integrate(&row, w[0], w[1], 1e-13))
        .sum()
}

/// Brute-force minimiser of `f` on a uniform 1D grid.
pub fn scan_min_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64, step: f64) -> (f64, f64) {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n)
        .map(|i| lo + i as f64 * step)
        .map(|x| (x, f(x)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty scan")
}

/// Brute-force minimiser of `f` on a uniform 2D grid.
pub fn scan_min_2d(f: impl Fn(f64, f64) -> f64, a: [f64; 2], b: [f64; 2], step: f64) -> ([f64; 2], f64) {
    let na = ((a[1] - a[0]) / step).round() as usize;
    let nb = ((b[1] - b[0]) / step).round() as usize;
    let mut best = ([a[0], b[0]], f64::INFINITY);
    for i in 0..=na {
        let u = a[0] + i as f64 * step;
        for k in 0..=nb {
            let v = b[0] + k as f64 * step;
            let val = f(u, v);
            if val < best.1 {
                best = ([u, v], val);
            }
        }
    }
    best
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Group relabelling induced by a plane isometry, found by matching
/// electrode centroids; panics when an image has no counterpart.
pub fn group_image(
    layout: &junctionforge_core::layout::Layout,
    f: impl Fn([f64; 2]) -> [f64; 2],
) -> std::collections::BTreeMap<String, String> {
    let mut map = std::collections::BTreeMap::new();
    for e in &layout.electrodes {
        let c = f(e.polygon.centroid());
        let twin = layout
            .electrodes
            .iter()
            .find(|o| {
                let d = o.polygon.centroid();
                (d[0] - c[0]).abs() < 1e-6 && (d[1] - c[1]).abs() < 1e-6
            })
            .unwrap_or_else(|| panic!("no image for electrode {}", e.id));
        let prev = map.insert(e.group.clone(), twin.group.clone());
        assert!(prev.is_none() || prev.as_deref() == Some(twin.group.as_str()), "inconsistent image of {}", e.group);
    }
    map
}

/// Amplitudes moved along `image`: the image group receives the source amplitude.
pub fn relabel(
    amps: &std::collections::BTreeMap<String, f64>,
    image: &std::collections::BTreeMap<String, String>,
) -> std::collections::BTreeMap<String, f64> {
    amps.iter().map(|(g, a)| (image[g].clone(), *a)).collect()
}
