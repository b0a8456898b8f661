//! Pseudo-potential, RF-null tracing and the derived barrier metrics.
//!
//! The ponderomotive pseudo-potential of an ion of charge `Ze` and mass `m`
//! in an RF field of amplitude `E` at drive `Ω` is `Z²e²|E|² / (4 m Ω²)`;
//! it is reported in meV (joules divided by `e`, times 1000).
//!
//! A trace follows the curve of in-section minima of `|E|²` along a shuttling
//! path. Sections are vertical planes: `x = const` along an arm, and for
//! corner turning a fan of half-planes hinged on the vertical line through the
//! pivot `(c, c)` that carries the path from arm A into arm B.

use std::f64::consts::FRAC_PI_4;
use std::fmt;

use nalgebra::{Matrix2, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{BasisEvaluator, DriveConfig, FieldError, FieldSample, Point, VoltageAssignment, Weights};

/// CODATA 2018 elementary charge (C).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// CODATA 2018 atomic mass constant (kg).
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonSpecies {
    /// Atomic mass units.
    pub mass_u: f64,
    /// Elementary charges.
    pub charge: u32,
}

impl IonSpecies {
    /// ¹⁷¹Yb⁺
    pub const YB171: IonSpecies = IonSpecies {
        mass_u: 171.0,
        charge: 1,
    };
}

impl Default for IonSpecies {
    fn default() -> Self {
        Self::YB171
    }
}

/// meV per (V/m)² for this ion and drive.
pub fn psi_coefficient(ion: &IonSpecies, drive: &DriveConfig) -> f64 {
    let z = ion.charge as f64;
    let m = ion.mass_u * ATOMIC_MASS_UNIT;
    z * z * ELEMENTARY_CHARGE / (4.0 * m * drive.omega_rf * drive.omega_rf) * 1e3
}

/// Pseudo-potential (meV) of a superposed field sample.
pub fn pseudopotential_at(sample: &FieldSample, ion: &IonSpecies, drive: &DriveConfig) -> f64 {
    psi_coefficient(ion, drive) * sample.e.norm_squared()
}

/// Basis + resolved amplitudes + ion, ready for repeated Ψ evaluation.
#[derive(Debug, Clone)]
pub struct PseudoField<'a> {
    basis: &'a BasisEvaluator,
    weights: Weights,
    coeff: f64,
}

impl<'a> PseudoField<'a> {
    pub fn new(basis: &'a BasisEvaluator, v: &VoltageAssignment, ion: &IonSpecies) -> Result<Self, FieldError> {
        Ok(Self {
            basis,
            weights: basis.weights(v)?,
            coeff: psi_coefficient(ion, &v.drive),
        })
    }

    pub fn basis(&self) -> &BasisEvaluator {
        self.basis
    }

    /// meV per (V/m)².
    pub fn coefficient(&self) -> f64 {
        self.coeff
    }

    /// Ψ in meV. `p.z` must be positive.
    pub fn psi(&self, p: &Point) -> f64 {
        self.coeff * self.basis.field(&self.weights, p).norm_squared()
    }

    pub fn field(&self, p: &Point) -> Vector3<f64> {
        self.basis.field(&self.weights, p)
    }

    fn field_and_jacobian(&self, p: &Point) -> (Vector3<f64>, nalgebra::Matrix3<f64>) {
        let d = self.basis.field_derivatives(&self.weights, p);
        // dE/dr = −H, in V/m per μm.
        (d.e, -d.hessian * 1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathMode {
    /// Arm A into arm B around the +x/+y corner.
    Corner,
    /// Arm A straight through the centre towards arm C.
    Linear,
}

impl fmt::Display for PathMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathMode::Corner => "corner",
            PathMode::Linear => "linear",
        })
    }
}

impl From<PathMode> for crate::layout::TieMode {
    fn from(m: PathMode) -> Self {
        match m {
            PathMode::Corner => crate::layout::TieMode::Corner,
            PathMode::Linear => crate::layout::TieMode::Linear,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("trace jumps by {jump:.3} μm near s = {s:.3} μm")]
    Discontinuity { s: f64, jump: f64 },
    #[error("no RF null found at the start of the path (s = {s:.3} μm)")]
    NoStart { s: f64 },
    #[error("invalid trace settings: {0}")]
    Settings(String),
    #[error("trace is empty")]
    Empty,
    #[error("all RF amplitudes are zero; there is no confining field")]
    Unconfined,
    #[error("section solve did not converge; last iterate {last:?}")]
    NoConvergence { last: [f64; 3] },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Settings of a saddle trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSettings {
    /// Arm coordinates `[s_min, s_max]` in μm. The trace starts on arm A at
    /// `x = s_max`. Linear traces end at `x = s_min`. Corner traces end on the
    /// x = y diagonal when `s_min ≥ 0`, otherwise on arm B at `y = −s_min`.
    pub range: [f64; 2],
    /// Path step, μm.
    pub step: f64,
    /// Corner pivot coordinate `c` (μm); `None` uses the inner edge of the corner electrode.
    #[serde(default)]
    pub pivot: Option<f64>,
    /// Admissible ion heights, μm.
    #[serde(default = "default_z_bounds")]
    pub z_bounds: [f64; 2],
}

fn default_z_bounds() -> [f64; 2] {
    [2.0, 400.0]
}

impl Default for TraceSettings {
    fn default() -> Self {
        Self {
            range: [0.0, 500.0],
            step: 1.0,
            pivot: None,
            z_bounds: default_z_bounds(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    /// Path coordinate, μm.
    pub s: f64,
    /// RF null position, μm.
    pub pos: [f64; 3],
    /// Pseudo-potential, meV.
    pub psi: f64,
}

/// Curve of RF nulls along a shuttling path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleTrace {
    pub mode: PathMode,
    pub path_range: [f64; 2],
    pub samples: Vec<TraceSample>,
    /// Sections whose minimum left the admissible region.
    pub omitted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    /// Max Ψ over the trace, meV.
    pub barrier: f64,
    /// max z − min z over the trace, μm.
    pub height_var: f64,
    pub barrier_pos: [f64; 3],
}

/// A vertical section plane: points are `origin + ρ·dir + z·ẑ`.
#[derive(Debug, Clone, Copy)]
struct Section {
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    rho_bounds: (f64, f64),
}

impl Section {
    fn point(&self, c: &Vector2<f64>) -> Point {
        self.origin + self.dir * c.x + Vector3::z() * c.y
    }

    fn project(&self, p: &Point) -> Vector2<f64> {
        Vector2::new((p - self.origin).dot(&self.dir), p.z)
    }
}

/// Maps path coordinates onto section planes.
#[derive(Debug, Clone, Copy)]
struct PathGeometry {
    mode: PathMode,
    pivot: f64,
    transverse_limit: f64,
}

impl PathGeometry {
    /// Guide length of the fan from arm A to the diagonal.
    fn fan_half(&self) -> f64 {
        self.pivot * FRAC_PI_4
    }

    /// Path coordinate of arm-A position `x` (corner paths measure along the guide arc).
    fn s_of_arm(&self, x: f64) -> f64 {
        match self.mode {
            PathMode::Linear => x,
            PathMode::Corner => x - self.pivot + self.fan_half(),
        }
    }

    fn section(&self, s: f64) -> Section {
        let lim = self.transverse_limit;
        match self.mode {
            PathMode::Linear => Section {
                origin: Vector3::new(s, 0.0, 0.0),
                dir: Vector3::y(),
                rho_bounds: (-lim, lim),
            },
            PathMode::Corner => {
                let c = self.pivot;
                let half = self.fan_half();
                if s >= half {
                    Section {
                        origin: Vector3::new(s - half + c, 0.0, 0.0),
                        dir: Vector3::y(),
                        rho_bounds: (-lim, lim),
                    }
                } else if s <= -half {
                    Section {
                        origin: Vector3::new(0.0, -s - half + c, 0.0),
                        dir: Vector3::x(),
                        rho_bounds: (-lim, lim),
                    }
                } else {
                    let theta = FRAC_PI_4 * (1.0 - s / half);
                    Section {
                        origin: Vector3::new(c, c, 0.0),
                        dir: Vector3::new(-theta.sin(), -theta.cos(), 0.0),
                        rho_bounds: (0.0, 2.0 * std::f64::consts::SQRT_2 * c),
                    }
                }
            }
        }
    }
}

/// Outcome of one in-section minimisation.
struct SectionSolution {
    coords: Vector2<f64>,
    e2: f64,
}

const MAX_ITERS: usize = 100;

/// Levenberg–Marquardt on the residual E(ρ, z) within a section. A failed
/// solve returns the last iterate.
fn solve_section(field: &PseudoField, sec: &Section, guess: Vector2<f64>) -> Result<SectionSolution, Vector2<f64>> {
    let mut c = guess;
    let eval = |c: &Vector2<f64>| {
        let p = sec.point(c);
        if p.z <= 0.0 {
            return None;
        }
        let (e, jac3) = field.field_and_jacobian(&p);
        let mut j = nalgebra::Matrix3x2::zeros();
        j.set_column(0, &(jac3 * sec.dir));
        j.set_column(1, &jac3.column(2).into_owned());
        Some((e, j))
    };
    let (mut e, mut j) = eval(&c).ok_or(c)?;
    let mut f = e.norm_squared();
    let g0 = (j.transpose() * e).norm();
    let mut mu = 1e-3;
    for _ in 0..MAX_ITERS {
        let grad = j.transpose() * e;
        if f == 0.0 || grad.norm() <= 1e-9 * g0.max(f64::MIN_POSITIVE) {
            return Ok(SectionSolution { coords: c, e2: f });
        }
        let a = j.transpose() * j;
        let damped = a + Matrix2::from_diagonal(&a.diagonal()) * mu;
        let Some(mut step) = damped.lu().solve(&(-grad)) else {
            return Err(c);
        };
        let len = step.norm();
        if len > 5.0 {
            step *= 5.0 / len;
        }
        let trial = c + step;
        match eval(&trial) {
            Some((et, jt)) if et.norm_squared() <= f => {
                c = trial;
                e = et;
                j = jt;
                f = e.norm_squared();
                mu = (mu * 0.1).max(1e-12);
                if step.norm() < 1e-8 {
                    return Ok(SectionSolution { coords: c, e2: f });
                }
            }
            _ => {
                mu *= 10.0;
                if mu > 1e10 {
                    // Stalled on a flat valley floor: accept if no descent direction is left.
                    return if step.norm() < 1e-6 {
                        Ok(SectionSolution { coords: c, e2: f })
                    } else {
                        Err(c)
                    };
                }
            }
        }
    }
    Err(c)
}

/// 11×11 scan around `centre` (±`half` μm) followed by a fresh solve from the best node.
fn reseed(field: &PseudoField, sec: &Section, centre: Vector2<f64>, half: f64, z_min: f64) -> Option<SectionSolution> {
    let mut best: Option<(f64, Vector2<f64>)> = None;
    for i in 0..11 {
        for k in 0..11 {
            let c = Vector2::new(
                centre.x + half * (i as f64 / 5.0 - 1.0),
                (centre.y + half * (k as f64 / 5.0 - 1.0)).max(z_min),
            );
            let e2 = field.field(&sec.point(&c)).norm_squared();
            if best.map_or(true, |(b, _)| e2 < b) {
                best = Some((e2, c));
            }
        }
    }
    best.and_then(|(_, c)| solve_section(field, sec, c).ok())
}

/// In-section minimiser of |E|² on the vertical plane `x = x`, starting from
/// `guess`; a failed solve is retried from an 11×11 scan around the guess.
pub fn find_null_in_section(field: &PseudoField, x: f64, guess: &Point) -> Result<Point, TraceError> {
    if !(guess.z > 0.0) {
        return Err(FieldError::Domain { z: guess.z }.into());
    }
    let sec = Section {
        origin: Vector3::new(x, 0.0, 0.0),
        dir: Vector3::y(),
        rho_bounds: (f64::NEG_INFINITY, f64::INFINITY),
    };
    let start = sec.project(guess);
    match solve_section(field, &sec, start) {
        Ok(sol) => Ok(sec.point(&sol.coords)),
        Err(last) => reseed(field, &sec, start, 10.0, 1e-3)
            .map(|sol| sec.point(&sol.coords))
            .ok_or(TraceError::NoConvergence {
                last: sec.point(&last).into(),
            }),
    }
}

/// Ψ-minimising height on the section centre line from a coarse scan, used to start a trace.
fn initial_guess(field: &PseudoField, sec: &Section, z_bounds: [f64; 2]) -> Vector2<f64> {
    let (r_lo, r_hi) = (sec.rho_bounds.0.max(-30.0), sec.rho_bounds.1.min(30.0));
    let mut best = (f64::INFINITY, Vector2::new(r_lo.max(0.0).min(r_hi), z_bounds[0]));
    let mut rho = r_lo;
    while rho <= r_hi {
        let mut z = z_bounds[0].max(2.0);
        while z <= z_bounds[1].min(300.0) {
            let c = Vector2::new(rho, z);
            let e2 = field.field(&sec.point(&c)).norm_squared();
            if e2 < best.0 {
                best = (e2, c);
            }
            z += 2.0;
        }
        rho += 2.0;
    }
    best.1
}

/// Follows the RF null along the path from the far end of arm A inwards.
pub fn trace_saddle_path(
    basis: &BasisEvaluator,
    v: &VoltageAssignment,
    ion: &IonSpecies,
    mode: PathMode,
    settings: &TraceSettings,
    pivot_default: f64,
    transverse_limit: f64,
) -> Result<SaddleTrace, TraceError> {
    let field = PseudoField::new(basis, v, ion)?;
    trace_with_field(&field, mode, settings, pivot_default, transverse_limit)
}

pub fn trace_with_field(
    field: &PseudoField,
    mode: PathMode,
    settings: &TraceSettings,
    pivot_default: f64,
    transverse_limit: f64,
) -> Result<SaddleTrace, TraceError> {
    let [s_min, s_max] = settings.range;
    if field.weights.as_slice().iter().all(|&w| w == 0.0) {
        return Err(TraceError::Unconfined);
    }
    if !(settings.step > 0.0 && settings.step.is_finite()) {
        return Err(TraceError::Settings(format!("step must be > 0, got {}", settings.step)));
    }
    if !(s_max > s_min) {
        return Err(TraceError::Settings(format!("empty range [{s_min}, {s_max}]")));
    }
    let geo = PathGeometry {
        mode,
        pivot: settings.pivot.unwrap_or(pivot_default),
        transverse_limit,
    };
    if mode == PathMode::Corner && s_max <= geo.pivot {
        return Err(TraceError::Settings(format!(
            "corner trace must start beyond the pivot at {} μm",
            geo.pivot
        )));
    }
    let s_start = geo.s_of_arm(s_max);
    let s_end = match mode {
        PathMode::Linear => s_min,
        PathMode::Corner if s_min >= 0.0 => 0.0,
        PathMode::Corner => -geo.s_of_arm(-s_min),
    };
    let [z_lo, z_hi] = settings.z_bounds;

    let admissible = |sec: &Section, sol: &SectionSolution| {
        let p = sec.point(&sol.coords);
        p.z >= z_lo && p.z <= z_hi && sol.coords.x >= sec.rho_bounds.0 && sol.coords.x <= sec.rho_bounds.1
    };

    let first = geo.section(s_start);
    let guess = initial_guess(field, &first, settings.z_bounds);
    let sol = solve_section(field, &first, guess)
        .ok()
        .filter(|s| admissible(&first, s))
        .or_else(|| reseed(field, &first, guess, 4.0, z_lo).filter(|s| admissible(&first, s)))
        .ok_or(TraceError::NoStart { s: s_start })?;
    let mut prev = first.point(&sol.coords);
    let mut samples = vec![TraceSample {
        s: s_start,
        pos: prev.into(),
        psi: field.coeff * sol.e2,
    }];
    let mut omitted = 0;
    let step = settings.step;
    let min_ds = step / 64.0;
    let mut s_cur = s_start;
    let mut ds = step;
    while s_cur > s_end + 1e-9 {
        // Next grid node below s_cur, or a shorter step while refining.
        let k = ((s_start - s_cur) / step + 1e-9).floor() + 1.0;
        let s_next = (s_start - k * step).max(s_cur - ds).max(s_end);
        let sec = geo.section(s_next);
        let guess = sec.project(&prev);
        let sol = solve_section(field, &sec, guess)
            .ok()
            .filter(|s| admissible(&sec, s))
            .or_else(|| reseed(field, &sec, guess, 10.0, z_lo).filter(|s| admissible(&sec, s)));
        let Some(sol) = sol else {
            // Carry on from the predicted position; the null may re-enter the domain.
            omitted += 1;
            prev = sec.point(&guess);
            s_cur = s_next;
            ds = step;
            continue;
        };
        let p = sec.point(&sol.coords);
        let jump = (p - prev).norm();
        if jump >= 2.0 * step {
            if ds > min_ds {
                ds = (s_cur - s_next) * 0.5;
                continue;
            }
            return Err(TraceError::Discontinuity { s: s_next, jump });
        }
        samples.push(TraceSample {
            s: s_next,
            pos: p.into(),
            psi: field.coeff * sol.e2,
        });
        prev = p;
        s_cur = s_next;
        ds = (ds * 2.0).min(step);
    }
    Ok(SaddleTrace {
        mode,
        path_range: [s_end, s_start],
        samples,
        omitted,
    })
}

/// Summary metrics of a trace.
pub fn metrics(trace: &SaddleTrace) -> Result<TraceMetrics, TraceError> {
    let first = trace.samples.first().ok_or(TraceError::Empty)?;
    let mut best = first;
    let (mut zmin, mut zmax) = (first.pos[2], first.pos[2]);
    for s in &trace.samples {
        if s.psi > best.psi {
            best = s;
        }
        zmin = zmin.min(s.pos[2]);
        zmax = zmax.max(s.pos[2]);
    }
    Ok(TraceMetrics {
        barrier: best.psi,
        height_var: zmax - zmin,
        barrier_pos: best.pos,
    })
}

impl SaddleTrace {
    /// CSV with columns `s_um,x_um,y_um,z_um,psi_meV`.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "s_um,x_um,y_um,z_um,psi_meV")?;
        for s in &self.samples {
            writeln!(out, "{},{},{},{},{}", s.s, s.pos[0], s.pos[1], s.pos[2], s.psi)?;
        }
        Ok(())
    }

    /// Smallest arm-A x among samples lying within `tol` μm of the y = 0 plane.
    pub fn min_on_axis_x(&self, tol: f64) -> Option<f64> {
        self.samples
            .iter()
            .filter(|s| s.pos[0] >= 0.0 && s.pos[1].abs() <= tol)
            .map(|s| s.pos[0])
            .min_by(f64::total_cmp)
    }
}

/// Uniform grid axis `n` points from `min` to `max` inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, n: usize) -> Self {
        Self { min, max, n }
    }

    /// Axis with spacing as close as possible to `step`.
    pub fn with_step(min: f64, max: f64, step: f64) -> Self {
        let n = ((max - min) / step).round().max(1.0) as usize + 1;
        Self { min, max, n }
    }

    pub fn value(&self, i: usize) -> f64 {
        if self.n <= 1 {
            self.min
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.n - 1) as f64
        }
    }

    pub fn spacing(&self) -> f64 {
        if self.n <= 1 {
            0.0
        } else {
            (self.max - self.min) / (self.n - 1) as f64
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.value(i)).collect()
    }
}

/// Plane on which a map is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plane", rename_all = "snake_case")]
pub enum MapPlane {
    /// The x–z plane at fixed y; axes (x, z).
    Xz { y: f64 },
    /// The y–z plane at fixed x; axes (y, z).
    Yz { x: f64 },
    /// The x–y plane at fixed height; axes (x, y).
    Xy { z: f64 },
    /// The vertical x = y plane; axes (distance along the diagonal from the origin, z).
    Diagonal,
}

impl MapPlane {
    pub fn point(&self, a: f64, b: f64) -> Point {
        match *self {
            MapPlane::Xz { y } => Point::new(a, y, b),
            MapPlane::Yz { x } => Point::new(x, a, b),
            MapPlane::Xy { z } => Point::new(a, b, z),
            MapPlane::Diagonal => {
                let d = a / std::f64::consts::SQRT_2;
                Point::new(d, d, b)
            }
        }
    }

    pub fn axis_names(&self) -> (&'static str, &'static str) {
        match self {
            MapPlane::Xz { .. } => ("x_um", "z_um"),
            MapPlane::Yz { .. } => ("y_um", "z_um"),
            MapPlane::Xy { .. } => ("x_um", "y_um"),
            MapPlane::Diagonal => ("d_um", "z_um"),
        }
    }
}

/// Ψ sampled on a rectilinear plane grid (row-major in `a`, then `b`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialMap {
    pub plane: MapPlane,
    pub a: GridAxis,
    pub b: GridAxis,
    /// `psi[ib * a.n + ia]`, meV.
    pub psi: Vec<f64>,
    pub assignment_hash: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("grid needs at least 2 points per axis")]
    GridTooSmall,
    #[error("grid axis is not increasing")]
    NotMonotone,
    #[error("map reaches z ≤ 0")]
    BelowPlane,
    #[error(transparent)]
    Field(#[from] FieldError),
}

fn check_axis(ax: &GridAxis) -> Result<(), MapError> {
    if ax.n < 2 {
        return Err(MapError::GridTooSmall);
    }
    if !(ax.max > ax.min) {
        return Err(MapError::NotMonotone);
    }
    Ok(())
}

/// Samples Ψ on a plane grid; rows are evaluated in parallel.
pub fn sample_map(
    basis: &BasisEvaluator,
    v: &VoltageAssignment,
    ion: &IonSpecies,
    plane: MapPlane,
    a: GridAxis,
    b: GridAxis,
) -> Result<PotentialMap, MapError> {
    check_axis(&a)?;
    check_axis(&b)?;
    let field = PseudoField::new(basis, v, ion)?;
    let min_z = match plane {
        MapPlane::Xy { z } => z,
        _ => b.min,
    };
    if min_z <= 0.0 {
        return Err(MapError::BelowPlane);
    }
    let psi: Vec<f64> = (0..b.n)
        .into_par_iter()
        .flat_map_iter(|ib| {
            let field = &field;
            (0..a.n).map(move |ia| field.psi(&plane.point(a.value(ia), b.value(ib))))
        })
        .collect();
    Ok(PotentialMap {
        plane,
        a,
        b,
        psi,
        assignment_hash: v.hash(),
    })
}

impl PotentialMap {
    pub fn get(&self, ia: usize, ib: usize) -> f64 {
        self.psi[ib * self.a.n + ia]
    }

    /// CSV with the two plane axes and `psi_meV` (e.g. `x_um,z_um,psi_meV`).
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        let (an, bn) = self.plane.axis_names();
        writeln!(out, "{an},{bn},psi_meV")?;
        for ib in 0..self.b.n {
            for ia in 0..self.a.n {
                writeln!(out, "{},{},{}", self.a.value(ia), self.b.value(ib), self.get(ia, ib))?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::build_basis;
    use crate::layout::{build_x_junction, LayoutDims};
    use nalgebra::Matrix3;

    fn sample_with_e(e: Vector3<f64>) -> FieldSample {
        FieldSample {
            phi: 0.0,
            e,
            hessian: Matrix3::zeros(),
        }
    }

    /// Constant-by-constant arithmetic, independent of `psi_coefficient`.
    fn psi_oracle(e_v_per_m: f64) -> f64 {
        let q = 1.602176634e-19_f64;
        let m = 171.0 * 1.66053906660e-27;
        let omega = 2.0 * std::f64::consts::PI * 30.0e6;
        let joules = q * q * e_v_per_m * e_v_per_m / (4.0 * m * omega * omega);
        joules / q * 1000.0
    }

    #[test]
    fn psi_reference_value() {
        let ion = IonSpecies::YB171;
        let drive = DriveConfig::from_mhz(30.0);
        let psi = pseudopotential_at(&sample_with_e(Vector3::new(1e5, 0.0, 0.0)), &ion, &drive);
        let oracle = psi_oracle(1e5);
        assert!((psi - oracle).abs() < 1e-12 * oracle);
        assert!((psi - 39.70).abs() < 0.01, "{psi}");
        assert_eq!(pseudopotential_at(&sample_with_e(Vector3::zeros()), &ion, &drive), 0.0);
    }

    #[test]
    fn psi_scaling_laws() {
        let ion = IonSpecies::YB171;
        let d1 = DriveConfig::from_mhz(30.0);
        let d2 = DriveConfig::from_mhz(60.0);
        let e = Vector3::new(3e4, -1e4, 2e4);
        let p1 = pseudopotential_at(&sample_with_e(e), &ion, &d1);
        let p2 = pseudopotential_at(&sample_with_e(2.0 * e), &ion, &d1);
        let p3 = pseudopotential_at(&sample_with_e(e), &ion, &d2);
        assert!((p2 / p1 - 4.0).abs() < 1e-14);
        assert!((p3 / p1 - 0.25).abs() < 1e-14);
    }

    #[test]
    fn constant_trace_metrics() {
        let trace = SaddleTrace {
            mode: PathMode::Linear,
            path_range: [0.0, 2.0],
            samples: (0..3)
                .map(|i| TraceSample {
                    s: i as f64,
                    pos: [i as f64, 0.0, 56.0],
                    psi: 1.0,
                })
                .collect(),
            omitted: 0,
        };
        let m = metrics(&trace).unwrap();
        assert_eq!(m.barrier, 1.0);
        assert_eq!(m.height_var, 0.0);
        let empty = SaddleTrace {
            samples: vec![],
            ..trace
        };
        assert_eq!(metrics(&empty), Err(TraceError::Empty));
    }

    #[test]
    fn zero_map() {
        let l = build_x_junction(LayoutDims::default()).unwrap();
        let b = build_basis(&l).unwrap();
        let v = VoltageAssignment::uniform(&l.rf_groups(), 0.0, DriveConfig::default());
        let m = sample_map(
            &b,
            &v,
            &IonSpecies::YB171,
            MapPlane::Xz { y: 0.0 },
            GridAxis::new(0.0, 10.0, 2),
            GridAxis::new(20.0, 30.0, 2),
        )
        .unwrap();
        assert!(m.psi.iter().all(|&p| p == 0.0));
        assert_eq!(m.psi.len(), 4);
    }

    #[test]
    fn map_grid_checks() {
        let l = build_x_junction(LayoutDims::default()).unwrap();
        let b = build_basis(&l).unwrap();
        let v = VoltageAssignment::uniform(&l.rf_groups(), 100.0, DriveConfig::default());
        let ion = IonSpecies::YB171;
        let r = sample_map(&b, &v, &ion, MapPlane::Xz { y: 0.0 }, GridAxis::new(0.0, 1.0, 1), GridAxis::new(1.0, 2.0, 2));
        assert_eq!(r.unwrap_err(), MapError::GridTooSmall);
        let r = sample_map(&b, &v, &ion, MapPlane::Xz { y: 0.0 }, GridAxis::new(0.0, 1.0, 2), GridAxis::new(-1.0, 2.0, 2));
        assert_eq!(r.unwrap_err(), MapError::BelowPlane);
    }
}
