//! Barrier minimisation over RF amplitudes and over finger/wedge geometry.
//!
//! Both searches use a bounded Nelder–Mead simplex in box-normalised
//! coordinates, restarted around the incumbent with seeded random simplices,
//! followed by an optional coordinate-descent polish.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{build_basis, BasisEvaluator, DriveConfig, FieldError, VoltageAssignment};
use crate::geometry::Rect;
use crate::layout::{
    add_finger, add_wedges, build_x_junction, symmetry_ties, Electrode, FingerParams, Layout, LayoutDims, LayoutError,
    TieMap, Variant, WedgeParams,
};
use crate::pseudo::{metrics, trace_with_field, IonSpecies, PathMode, PseudoField, SaddleTrace, TraceError, TraceMetrics, TraceSettings};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid optimisation spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("best point could not be re-evaluated: {0}")]
    Trace(#[from] TraceError),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<OptimizeError>,
    },
}

/// Barrier plus `lambda`·heightVar, in meV.
pub fn objective(trace: &SaddleTrace, lambda: f64) -> Result<f64, TraceError> {
    let m = metrics(trace)?;
    Ok(m.barrier + lambda * m.height_var)
}

/// Settings of the direct search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSettings {
    /// Restarts after the first simplex run.
    pub restarts: usize,
    /// Total objective evaluations across all runs.
    pub max_evals: usize,
    /// Simplex spread in objective units at which a run stops.
    pub f_tol: f64,
    /// Simplex size (fraction of each box side) at which a run stops.
    pub x_tol: f64,
    /// Initial simplex edge as a fraction of each box side.
    pub initial_step: f64,
    /// Coordinate-descent polish after the simplex runs.
    pub polish: bool,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_evals: 6000,
            f_tol: 1e-6,
            x_tol: 1e-4,
            initial_step: 0.1,
            polish: true,
        }
    }
}

/// Outcome of [`minimize_bounded`].
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    /// Best-so-far objective after each evaluation.
    pub history: Vec<f64>,
}

struct Tracker<'f> {
    f: &'f mut dyn FnMut(&[f64]) -> f64,
    lo: Vec<f64>,
    span: Vec<f64>,
    free: Vec<usize>,
    template: Vec<f64>,
    best_u: Vec<f64>,
    best_f: f64,
    history: Vec<f64>,
    budget: usize,
}

impl Tracker<'_> {
    fn point(&self, u: &[f64]) -> Vec<f64> {
        let mut x = self.template.clone();
        for (k, &i) in self.free.iter().enumerate() {
            x[i] = self.lo[i] + u[k].clamp(0.0, 1.0) * self.span[i];
        }
        x
    }

    fn exhausted(&self) -> bool {
        self.history.len() >= self.budget
    }

    fn eval(&mut self, u: &[f64]) -> f64 {
        let x = self.point(u);
        let v = (self.f)(&x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v < self.best_f {
            self.best_f = v;
            self.best_u = u.to_vec();
        }
        self.history.push(self.best_f);
        v
    }
}

fn clamp_unit(u: &mut [f64]) {
    for x in u {
        *x = x.clamp(0.0, 1.0);
    }
}

/// One Nelder–Mead run with adaptive coefficients, stopping at `limit` total evaluations.
fn nelder_mead(t: &mut Tracker, mut simplex: Vec<Vec<f64>>, settings: &SearchSettings, limit: usize) {
    let n = simplex.len() - 1;
    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 0.5 / nf, 1.0 - 1.0 / nf);
    let mut fs: Vec<f64> = Vec::with_capacity(n + 1);
    for v in &simplex {
        if t.history.len() >= limit {
            return;
        }
        fs.push(t.eval(v));
    }
    loop {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| fs[a].total_cmp(&fs[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        fs = order.iter().map(|&i| fs[i]).collect();

        let spread = fs[n] - fs[0];
        let size = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (spread <= settings.f_tol && size <= settings.x_tol) || size < 1e-12 || t.history.len() >= limit {
            return;
        }

        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|v| v[k]).sum::<f64>() / nf)
            .collect();
        let along = |c: f64| {
            let mut p: Vec<f64> = centroid.iter().zip(&simplex[n]).map(|(m, w)| m + c * (m - w)).collect();
            clamp_unit(&mut p);
            p
        };

        let xr = along(alpha);
        let fr = t.eval(&xr);
        if fr < fs[0] {
            let xe = along(alpha * gamma);
            let fe = t.eval(&xe);
            if fe < fr {
                simplex[n] = xe;
                fs[n] = fe;
            } else {
                simplex[n] = xr;
                fs[n] = fr;
            }
            continue;
        }
        if fr < fs[n - 1] {
            simplex[n] = xr;
            fs[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < fs[n] {
            let xc = along(alpha * rho);
            let fc = t.eval(&xc);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = t.eval(&xc);
            (xc, fc)
        };
        if fc < fs[n].min(fr) {
            simplex[n] = xc;
            fs[n] = fc;
            continue;
        }
        for i in 1..=n {
            if t.history.len() >= limit {
                return;
            }
            let p: Vec<f64> = simplex[0].iter().zip(&simplex[i]).map(|(b, v)| b + sigma * (v - b)).collect();
            fs[i] = t.eval(&p);
            simplex[i] = p;
        }
    }
}

fn polish(t: &mut Tracker, settings: &SearchSettings) {
    let n = t.free.len();
    let mut h = settings.initial_step * 0.5;
    while h > settings.x_tol && !t.exhausted() {
        let mut improved = false;
        for k in 0..n {
            for dir in [1.0, -1.0] {
                if t.exhausted() {
                    return;
                }
                let mut u = t.best_u.clone();
                u[k] = (u[k] + dir * h).clamp(0.0, 1.0);
                if u[k] == t.best_u[k] {
                    continue;
                }
                let before = t.best_f;
                if t.eval(&u) < before {
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
}

/// Minimises `f` over the box `[lower, upper]` starting from `x0`.
///
/// Coordinates whose bounds coincide are held fixed. The evaluation sequence
/// depends only on the inputs and `seed`.
pub fn minimize_bounded(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    settings: &SearchSettings,
    seed: u64,
) -> Minimum {
    let n_all = x0.len();
    assert!(lower.len() == n_all && upper.len() == n_all, "bounds must match the start point");
    let span: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| u - l).collect();
    let free: Vec<usize> = (0..n_all).filter(|&i| span[i] > 0.0).collect();
    let template: Vec<f64> = (0..n_all).map(|i| x0[i].clamp(lower[i], upper[i])).collect();
    let u0: Vec<f64> = free.iter().map(|&i| (template[i] - lower[i]) / span[i]).collect();
    let mut t = Tracker {
        f,
        lo: lower.to_vec(),
        span,
        free,
        template,
        best_u: u0.clone(),
        best_f: f64::INFINITY,
        history: Vec::new(),
        budget: settings.max_evals.max(1),
    };
    t.eval(&u0);
    let n = t.free.len();
    if n > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let runs = settings.restarts + 1 + usize::from(settings.polish);
        for r in 0..=settings.restarts {
            if t.exhausted() {
                break;
            }
            let remaining = t.budget - t.history.len();
            let limit = t.history.len() + remaining / (runs - r).max(1);
            // Nothing feasible yet: start the restart from a random point instead.
            let centre = if r > 0 && t.best_f.is_infinite() {
                (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
            } else {
                t.best_u.clone()
            };
            let mut simplex = vec![centre.clone()];
            for k in 0..n {
                let mut v = centre.clone();
                let step = if r == 0 {
                    settings.initial_step
                } else {
                    let mag: f64 = rng.gen_range(0.5..2.0) * settings.initial_step;
                    if rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag
                    }
                };
                v[k] += step;
                if !(0.0..=1.0).contains(&v[k]) {
                    v[k] = centre[k] - step;
                }
                clamp_unit(&mut v);
                simplex.push(v);
            }
            let limit = limit.max(t.history.len() + n + 2);
            nelder_mead(&mut t, simplex, settings, limit);
        }
        if settings.polish {
            polish(&mut t, settings);
        }
    }
    let x = t.point(&t.best_u);
    Minimum {
        x,
        f: t.best_f,
        history: t.history,
    }
}

/// Voltage search over one amplitude per tie class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationSpec {
    pub mode: PathMode,
    /// Tie classes; `None` derives them from the layout symmetry for `mode`.
    pub ties: Option<TieMap>,
    /// Default amplitude interval per class, volts.
    pub bounds: [f64; 2],
    /// Per-class overrides keyed by any label in the class.
    pub class_bounds: BTreeMap<String, [f64; 2]>,
    /// Starting amplitude of every class and fixed value of the bulk rails, volts.
    pub base_amplitude: f64,
    /// Let the bulk rails vary too.
    pub free_bulk: bool,
    /// Height-variation weight, meV/μm.
    pub lambda: f64,
    pub trace: TraceSettings,
    pub search: SearchSettings,
    pub seed: u64,
    /// Start point per group label; unlisted classes start at `base_amplitude`.
    pub initial: BTreeMap<String, f64>,
    pub ion: IonSpecies,
    pub drive: DriveConfig,
}

impl Default for OptimizationSpec {
    fn default() -> Self {
        Self {
            mode: PathMode::Corner,
            ties: None,
            bounds: [0.0, 200.0],
            class_bounds: BTreeMap::new(),
            base_amplitude: 100.0,
            free_bulk: false,
            lambda: 0.0,
            trace: TraceSettings::default(),
            search: SearchSettings::default(),
            seed: 0,
            initial: BTreeMap::new(),
            ion: IonSpecies::default(),
            drive: DriveConfig::default(),
        }
    }
}

impl OptimizationSpec {
    pub fn new(mode: PathMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<(), OptimizeError> {
        let ok = |b: &[f64; 2]| b[0].is_finite() && b[1].is_finite() && b[0] <= b[1];
        if !ok(&self.bounds) || !self.class_bounds.values().all(ok) {
            return Err(OptimizeError::Spec("amplitude bounds must be finite and non-empty".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(OptimizeError::Spec(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Finger and wedge parameters of a geometry result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    pub finger: Option<FingerParams>,
    pub wedge: Option<WedgeParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationResult {
    pub mode: PathMode,
    pub variant: Variant,
    pub layout_hash: String,
    pub best_assignment: VoltageAssignment,
    /// Amplitude per tie class, keyed by the class's first label.
    pub class_amplitudes: BTreeMap<String, f64>,
    pub geometry: Option<GeometryParams>,
    pub start_objective: f64,
    pub objective: f64,
    pub final_metrics: TraceMetrics,
    pub history: Vec<f64>,
    pub evaluations: usize,
    pub wall_time_s: f64,
    pub seed: u64,
    /// No evaluated point beat the start point.
    pub no_improvement: bool,
}

#[derive(Serialize)]
struct Report<'a> {
    mode: PathMode,
    variant: Variant,
    layout_hash: &'a str,
    #[serde(rename = "bestAmplitudes")]
    best_amplitudes: &'a BTreeMap<String, f64>,
    #[serde(rename = "geometryParams")]
    geometry_params: &'a Option<GeometryParams>,
    #[serde(rename = "barrier_meV")]
    barrier_mev: f64,
    #[serde(rename = "heightVar_um")]
    height_var_um: f64,
    #[serde(rename = "objective_meV")]
    objective_mev: f64,
    evaluations: usize,
    seed: u64,
    no_improvement: bool,
}

impl OptimizationResult {
    /// Summary JSON.
    pub fn report_json(&self) -> serde_json::Value {
        serde_json::to_value(Report {
            mode: self.mode,
            variant: self.variant,
            layout_hash: &self.layout_hash,
            best_amplitudes: &self.class_amplitudes,
            geometry_params: &self.geometry,
            barrier_mev: self.final_metrics.barrier,
            height_var_um: self.final_metrics.height_var,
            objective_mev: self.objective,
            evaluations: self.evaluations,
            seed: self.seed,
            no_improvement: self.no_improvement,
        })
        .expect("report serialises")
    }

    /// CSV `eval_index,best_objective_meV`.
    pub fn write_convergence_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "eval_index,best_objective_meV")?;
        for (i, v) in self.history.iter().enumerate() {
            writeln!(out, "{i},{v}")?;
        }
        Ok(())
    }
}

/// Traces `v` on `basis` and returns the trace when every section was admissible.
pub fn evaluate(
    basis: &BasisEvaluator,
    layout: &Layout,
    v: &VoltageAssignment,
    ion: &IonSpecies,
    mode: PathMode,
    settings: &TraceSettings,
) -> Result<SaddleTrace, TraceError> {
    let field = PseudoField::new(basis, v, ion)?;
    trace_with_field(&field, mode, settings, layout.dims.rail_inner(), layout.dims.rail_outer())
}

fn strict_objective(trace: Result<SaddleTrace, TraceError>, lambda: f64) -> f64 {
    match trace {
        Ok(t) if t.omitted == 0 => objective(&t, lambda).unwrap_or(f64::INFINITY),
        _ => f64::INFINITY,
    }
}

fn is_bulk(label: &str) -> bool {
    label.starts_with("BULK")
}

fn class_name(class: &[String]) -> String {
    class[0].clone()
}

/// Multi-RF amplitude search on a fixed layout; the basis is built once.
pub fn optimize_voltages(layout: &Layout, spec: &OptimizationSpec) -> Result<OptimizationResult, OptimizeError> {
    let basis = build_basis(layout)?;
    optimize_voltages_on(layout, &basis, spec)
}

/// As [`optimize_voltages`] with a prebuilt basis.
pub fn optimize_voltages_on(
    layout: &Layout,
    basis: &BasisEvaluator,
    spec: &OptimizationSpec,
) -> Result<OptimizationResult, OptimizeError> {
    spec.check()?;
    if basis.layout_hash() != layout.hash() {
        return Err(OptimizeError::Spec("basis was built for a different layout".into()));
    }
    let started = Instant::now();
    let ties = spec.ties.clone().unwrap_or_else(|| symmetry_ties(layout, spec.mode.into()));
    if ties.labels() != layout.rf_groups() {
        return Err(OptimizeError::Spec("tie classes must partition the layout's rf groups".into()));
    }
    for label in spec.class_bounds.keys().chain(spec.initial.keys()) {
        if ties.class_of(label).is_none() {
            return Err(OptimizeError::Spec(format!("unknown group {label}")));
        }
    }
    let n = ties.classes.len();
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut x0 = vec![spec.base_amplitude; n];
    for (i, class) in ties.classes.iter().enumerate() {
        let start = class.iter().find_map(|g| spec.initial.get(g)).copied();
        let fixed = !spec.free_bulk && class.iter().any(|g| is_bulk(g));
        if fixed {
            let v = start.unwrap_or(spec.base_amplitude);
            lower[i] = v;
            upper[i] = v;
            x0[i] = v;
            continue;
        }
        let b = class
            .iter()
            .find_map(|g| spec.class_bounds.get(g))
            .copied()
            .unwrap_or(spec.bounds);
        lower[i] = b[0];
        upper[i] = b[1];
        x0[i] = start.unwrap_or(spec.base_amplitude).clamp(b[0], b[1]);
    }

    let assignment = |x: &[f64]| VoltageAssignment::new(ties.expand(x), spec.drive);
    let mut f = |x: &[f64]| {
        let v = assignment(x);
        strict_objective(evaluate(basis, layout, &v, &spec.ion, spec.mode, &spec.trace), spec.lambda)
    };
    let min = minimize_bounded(&mut f, &x0, &lower, &upper, &spec.search, spec.seed);

    let best = assignment(&min.x);
    let trace = evaluate(basis, layout, &best, &spec.ion, spec.mode, &spec.trace)?;
    let final_metrics = metrics(&trace)?;
    let start_objective = min.history[0];
    Ok(OptimizationResult {
        mode: spec.mode,
        variant: layout.variant,
        layout_hash: layout.hash(),
        class_amplitudes: ties.classes.iter().zip(&min.x).map(|(c, v)| (class_name(c), *v)).collect(),
        best_assignment: best,
        geometry: None,
        start_objective,
        objective: min.f,
        final_metrics,
        evaluations: min.history.len(),
        history: min.history,
        wall_time_s: started.elapsed().as_secs_f64(),
        seed: spec.seed,
        no_improvement: !(min.f < start_objective),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeometryTarget {
    /// Free (α, d1) of the finger with b fixed.
    Finger,
    /// Free (w2, l2w, d2) of the wedges with β fixed, on a fixed finger.
    Wedge,
}

/// Geometry search at fixed voltages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometrySpec {
    pub target: GeometryTarget,
    pub mode: PathMode,
    pub dims: LayoutDims,
    /// Start point of the finger search, or the fixed finger of the wedge search.
    pub finger: FingerParams,
    /// Start point (and fixed β) of the wedge search.
    pub wedge: WedgeParams,
    /// Parameter bounds keyed `alpha_deg`, `d1` (finger) or `w2`, `l2w`, `d2` (wedge).
    pub bounds: BTreeMap<String, [f64; 2]>,
    /// Amplitude of every group not listed in `overrides`, volts.
    pub base_amplitude: f64,
    pub overrides: BTreeMap<String, f64>,
    pub lambda: f64,
    pub trace: TraceSettings,
    pub search: SearchSettings,
    pub seed: u64,
    pub ion: IonSpecies,
    pub drive: DriveConfig,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self::finger(PathMode::Corner)
    }
}

impl GeometrySpec {
    /// Finger search: α ∈ [5, 45]°, d1 ∈ [6, 80] μm, b = 60 μm, all groups at 100 V.
    pub fn finger(mode: PathMode) -> Self {
        Self {
            target: GeometryTarget::Finger,
            mode,
            dims: LayoutDims::default(),
            finger: FingerParams::default(),
            wedge: WedgeParams::default(),
            bounds: [("alpha_deg", [5.0, 45.0]), ("d1", [6.0, 80.0])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            base_amplitude: 100.0,
            overrides: BTreeMap::new(),
            lambda: 0.0,
            trace: TraceSettings::default(),
            search: SearchSettings {
                restarts: 3,
                max_evals: 400,
                ..SearchSettings::default()
            },
            seed: 0,
            ion: IonSpecies::default(),
            drive: DriveConfig::default(),
        }
    }

    /// Wedge search: w2 ∈ [10, 80], l2w ∈ [10, 120], d2 ∈ [60, 240] μm, β = 53°, RF2f at 85 V.
    pub fn wedge(mode: PathMode, finger: FingerParams) -> Self {
        Self {
            target: GeometryTarget::Wedge,
            finger,
            bounds: [("w2", [10.0, 80.0]), ("l2w", [10.0, 120.0]), ("d2", [60.0, 240.0])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            overrides: [("RF2f".to_string(), 85.0)].into_iter().collect(),
            ..Self::finger(mode)
        }
    }

    fn names(&self) -> &'static [&'static str] {
        match self.target {
            GeometryTarget::Finger => &["alpha_deg", "d1"],
            GeometryTarget::Wedge => &["w2", "l2w", "d2"],
        }
    }

    fn start(&self) -> Vec<f64> {
        match self.target {
            GeometryTarget::Finger => vec![self.finger.alpha_deg, self.finger.d1],
            GeometryTarget::Wedge => vec![self.wedge.w2, self.wedge.l2w, self.wedge.d2],
        }
    }

    fn params(&self, x: &[f64]) -> GeometryParams {
        match self.target {
            GeometryTarget::Finger => GeometryParams {
                finger: Some(FingerParams {
                    alpha_deg: x[0],
                    d1: x[1],
                    ..self.finger
                }),
                wedge: None,
            },
            GeometryTarget::Wedge => GeometryParams {
                finger: Some(self.finger),
                wedge: Some(WedgeParams {
                    w2: x[0],
                    l2w: x[1],
                    d2: x[2],
                    ..self.wedge
                }),
            },
        }
    }

    /// Voltages applied to `layout` during the search.
    pub fn assignment(&self, layout: &Layout) -> VoltageAssignment {
        let mut v = VoltageAssignment::uniform(&layout.rf_groups(), self.base_amplitude, self.drive);
        for (g, a) in &self.overrides {
            if let Some(slot) = v.amplitudes.get_mut(g) {
                *slot = *a;
            }
        }
        v
    }
}

/// Builds the layout described by geometry parameters on `dims`.
pub fn build_geometry(dims: LayoutDims, g: &GeometryParams) -> Result<Layout, LayoutError> {
    let mut l = build_x_junction(dims)?;
    if let Some(f) = g.finger {
        l = add_finger(&l, f)?;
    }
    if let Some(w) = g.wedge {
        l = add_wedges(&l, w)?;
    }
    Ok(l)
}

/// Direct search over finger or wedge parameters; each candidate rebuilds layout and basis.
pub fn optimize_geometry(spec: &GeometrySpec) -> Result<OptimizationResult, OptimizeError> {
    let started = Instant::now();
    let names = spec.names();
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for name in names {
        let b = spec
            .bounds
            .get(*name)
            .ok_or_else(|| OptimizeError::Spec(format!("missing bounds for {name}")))?;
        if !(b[0].is_finite() && b[1].is_finite() && b[0] <= b[1]) {
            return Err(OptimizeError::Spec(format!("empty bounds for {name}")));
        }
        lower.push(b[0]);
        upper.push(b[1]);
    }
    if let Some(extra) = spec.bounds.keys().find(|k| !names.contains(&k.as_str())) {
        return Err(OptimizeError::Spec(format!("{extra} is not a free parameter of this search")));
    }
    let eval = |x: &[f64]| -> f64 {
        let Ok(layout) = build_geometry(spec.dims, &spec.params(x)) else {
            return f64::INFINITY;
        };
        let Ok(basis) = build_basis(&layout) else {
            return f64::INFINITY;
        };
        let v = spec.assignment(&layout);
        strict_objective(evaluate(&basis, &layout, &v, &spec.ion, spec.mode, &spec.trace), spec.lambda)
    };
    let mut f = eval;
    let min = minimize_bounded(&mut f, &spec.start(), &lower, &upper, &spec.search, spec.seed);
    let geometry = spec.params(&min.x);
    let layout = build_geometry(spec.dims, &geometry)?;
    let basis = build_basis(&layout)?;
    let v = spec.assignment(&layout);
    let trace = evaluate(&basis, &layout, &v, &spec.ion, spec.mode, &spec.trace)?;
    let start_objective = min.history[0];
    Ok(OptimizationResult {
        mode: spec.mode,
        variant: layout.variant,
        layout_hash: layout.hash(),
        class_amplitudes: v.amplitudes.clone(),
        best_assignment: v,
        geometry: Some(geometry),
        start_objective,
        objective: min.f,
        final_metrics: metrics(&trace)?,
        evaluations: min.history.len(),
        history: min.history,
        wall_time_s: started.elapsed().as_secs_f64(),
        seed: spec.seed,
        no_improvement: !(min.f < start_objective),
    })
}

/// Both stages of a hybrid run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridResult {
    pub geometry: OptimizationResult,
    pub voltages: OptimizationResult,
}

/// Geometry search followed by a voltage search on the resulting layout.
///
/// The voltage stage starts from the geometry stage's fixed voltages.
pub fn hybrid_optimize(geometry: &GeometrySpec, voltages: &OptimizationSpec) -> Result<HybridResult, OptimizeError> {
    let stage = |stage: &'static str| move |e: OptimizeError| OptimizeError::Stage { stage, source: Box::new(e) };
    let g = optimize_geometry(geometry).map_err(stage("geometry"))?;
    let params = g.geometry.expect("geometry result carries parameters");
    let layout = build_geometry(geometry.dims, &params)
        .map_err(OptimizeError::from)
        .map_err(stage("voltage"))?;
    let mut spec = voltages.clone();
    spec.mode = geometry.mode;
    for (k, v) in &g.best_assignment.amplitudes {
        spec.initial.entry(k.clone()).or_insert(*v);
    }
    let mut v = optimize_voltages(&layout, &spec).map_err(stage("voltage"))?;
    v.geometry = Some(params);
    Ok(HybridResult { geometry: g, voltages: v })
}

/// Carries a corner-turning (A→B) amplitude set over to linear A→C transport:
/// arm A keeps its values, arm B's values move to arm C and arm B returns to `base`.
pub fn transplant_corner_to_linear(amplitudes: &BTreeMap<String, f64>, base: f64) -> BTreeMap<String, f64> {
    let mut out = amplitudes.clone();
    for (label, v) in amplitudes {
        let Some(rest) = label.strip_prefix("RF") else { continue };
        let mut chars: Vec<char> = rest.chars().collect();
        match chars.last().copied() {
            Some(c @ ('B' | 'b')) => {
                let last = chars.len() - 1;
                chars[last] = if c == 'B' { 'C' } else { 'c' };
                let target = format!("RF{}", chars.iter().collect::<String>());
                if out.contains_key(&target) {
                    out.insert(target, *v);
                }
                out.insert(label.clone(), base);
            }
            _ => {}
        }
    }
    out
}

/// Segment refinement rule.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRule {
    /// Segment groups to halve; each half keeps a gap `g` from the other.
    pub halve: BTreeSet<String>,
}

impl SplitRule {
    /// Halves every labelled arm segment `RF{i}{X}`.
    pub fn all_segments(layout: &Layout) -> Self {
        Self {
            halve: layout.rf_groups().into_iter().filter(|g| segment_arm(g).is_some()).collect(),
        }
    }
}

/// Arm letter of a segment label `RF<digits><letter>`.
fn segment_arm(label: &str) -> Option<char> {
    let rest = label.strip_prefix("RF")?;
    let digits = rest.trim_end_matches(|c: char| c.is_ascii_alphabetic());
    let letter = &rest[digits.len()..];
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) || letter.len() != 1 {
        return None;
    }
    let c = letter.chars().next()?;
    "AaBbCcDd".contains(c).then_some(c)
}

/// Splits named segments in two along their arm; halves are labelled `<label>_1` (inner) and `<label>_2`.
pub fn refine_segmentation(layout: &Layout, rule: &SplitRule) -> Result<Layout, OptimizeError> {
    if rule.halve.is_empty() {
        return Ok(layout.clone());
    }
    let g = layout.dims.g;
    let groups = layout.rf_groups();
    for label in &rule.halve {
        if !groups.contains(label) || segment_arm(label).is_none() {
            return Err(OptimizeError::Spec(format!("{label} is not a segment of this layout")));
        }
    }
    let mut out = layout.clone();
    out.electrodes.clear();
    let mut next = layout.electrodes.iter().map(|e| e.id).max().map_or(0, |m| m + 1);
    for e in &layout.electrodes {
        if !rule.halve.contains(&e.group) {
            out.electrodes.push(e.clone());
            continue;
        }
        let r: Rect = e
            .polygon
            .as_rect()
            .ok_or_else(|| OptimizeError::Spec(format!("{} is not rectangular", e.group)))?;
        let along_x = matches!(segment_arm(&e.group), Some('A' | 'a' | 'C' | 'c'));
        let (lo, hi) = if along_x { (r.x1, r.x2) } else { (r.y1, r.y2) };
        let half = 0.5 * (hi - lo - g);
        if half < 2.0 * g {
            return Err(LayoutError::Geometry(format!(
                "halving {} leaves {half:.3} μm segments, below 2g = {}",
                e.group,
                2.0 * g
            ))
            .into());
        }
        // Inner piece is the one nearer the junction centre.
        let near_first = lo.abs() < hi.abs();
        let pieces = [(lo, lo + half), (hi - half, hi)];
        let (inner, outer) = if near_first { (pieces[0], pieces[1]) } else { (pieces[1], pieces[0]) };
        for (suffix, (a, b), id) in [("_1", inner, e.id), ("_2", outer, next)] {
            let rect = if along_x {
                Rect::new(a, b, r.y1, r.y2)
            } else {
                Rect::new(r.x1, r.x2, a, b)
            };
            out.electrodes.push(Electrode {
                id,
                group: format!("{}{suffix}", e.group),
                role: e.role,
                polygon: rect.to_polygon(),
            });
        }
        next += 1;
    }
    let diags = crate::layout::validate(&out);
    if let Some(d) = diags.first() {
        return Err(LayoutError::Geometry(d.to_string()).into());
    }
    Ok(out)
}

/// Amplitudes of a coarse layout carried onto its refinement: each half inherits its parent's value.
pub fn embed_amplitudes(coarse: &BTreeMap<String, f64>, refined: &Layout) -> BTreeMap<String, f64> {
    refined
        .rf_groups()
        .into_iter()
        .filter_map(|g| {
            let parent = g.strip_suffix("_1").or_else(|| g.strip_suffix("_2")).unwrap_or(&g);
            coarse.get(parent).or_else(|| coarse.get(&g)).map(|v| (g.clone(), *v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pseudo::TraceSample;

    fn trace(points: &[(f64, f64)]) -> SaddleTrace {
        SaddleTrace {
            mode: PathMode::Linear,
            path_range: [0.0, 1.0],
            samples: points
                .iter()
                .enumerate()
                .map(|(i, &(psi, z))| TraceSample {
                    s: i as f64,
                    pos: [i as f64, 0.0, z],
                    psi,
                })
                .collect(),
            omitted: 0,
        }
    }

    #[test]
    fn objective_examples() {
        let t = trace(&[(5.265, 100.0), (1.0, 100.0)]);
        assert_eq!(objective(&t, 0.0).unwrap(), 5.265);
        let t = trace(&[(1.0, 100.0), (0.5, 50.0)]);
        assert!((objective(&t, 0.01).unwrap() - 1.5).abs() < 1e-15);
        assert!(objective(&trace(&[]), 0.0).is_err());
    }

    #[test]
    fn rosenbrock_in_box() {
        let mut f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = minimize_bounded(&mut f, &[-1.0, 1.5], &[-2.0, -2.0], &[2.0, 2.0], &SearchSettings::default(), 7);
        assert!((m.x[0] - 1.0).abs() < 1e-2 && (m.x[1] - 1.0).abs() < 2e-2, "{:?}", m.x);
        assert!(m.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn bound_active_minimum() {
        let mut f = |x: &[f64]| (x[0] - 5.0).powi(2) + (x[1] + 1.0).powi(2);
        let m = minimize_bounded(&mut f, &[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0], &SearchSettings::default(), 1);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && m.x[1].abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn collapsed_box_evaluates_once() {
        let mut calls = 0;
        let mut f = |x: &[f64]| {
            calls += 1;
            x[0]
        };
        let m = minimize_bounded(&mut f, &[3.0], &[100.0], &[100.0], &SearchSettings::default(), 0);
        assert_eq!(m.x, vec![100.0]);
        assert_eq!(m.history.len(), 1);
        assert_eq!(calls, 1);
    }

    #[test]
    fn infinite_start_recovers() {
        let mut f = |x: &[f64]| if x[0] < 0.2 { f64::INFINITY } else { (x[0] - 0.7).powi(2) };
        let m = minimize_bounded(&mut f, &[0.0], &[0.0], &[1.0], &SearchSettings::default(), 3);
        assert!((m.x[0] - 0.7).abs() < 1e-3);
    }

    #[test]
    fn transplant_moves_b_to_c() {
        let amps: BTreeMap<String, f64> = [("RF1A", 90.0), ("RF1B", 80.0), ("RF1b", 70.0), ("RF1C", 100.0), ("RF1c", 100.0), ("e", 120.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let t = transplant_corner_to_linear(&amps, 100.0);
        assert_eq!(t["RF1A"], 90.0);
        assert_eq!(t["RF1C"], 80.0);
        assert_eq!(t["RF1c"], 70.0);
        assert_eq!(t["RF1B"], 100.0);
        assert_eq!(t["RF1b"], 100.0);
        assert_eq!(t["e"], 120.0);
    }

    #[test]
    fn segment_labels() {
        assert_eq!(segment_arm("RF1A"), Some('A'));
        assert_eq!(segment_arm("RF3d"), Some('d'));
        assert_eq!(segment_arm("RF1f"), None);
        assert_eq!(segment_arm("BULK_A"), None);
        assert_eq!(segment_arm("e"), None);
    }
}
