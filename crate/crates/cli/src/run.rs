//! Subcommand implementations. Every command writes its artifacts and a
//! `report.json` that echoes the config hash.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use junctionforge_core::field::{build_basis, BasisEvaluator, VoltageAssignment};
use junctionforge_core::isosurface::{extract_isosurface, sample_volume};
use junctionforge_core::layout::{validate, Layout};
use junctionforge_core::optimize::{
    evaluate, hybrid_optimize, optimize_geometry, optimize_voltages_on, OptimizationResult,
};
use junctionforge_core::pseudo::{
    metrics, sample_map, IonSpecies, PathMode, PotentialMap, SaddleTrace, TraceError, TraceMetrics, TraceSettings,
};

use crate::config::{MapConfig, MeshFormat, OptimizeKind, RunConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    #[serde(rename = "barrier_meV")]
    pub barrier_mev: f64,
    #[serde(rename = "heightVar_um")]
    pub height_var_um: f64,
    #[serde(rename = "barrierPos_um")]
    pub barrier_pos_um: [f64; 3],
}

impl From<&TraceMetrics> for MetricsReport {
    fn from(m: &TraceMetrics) -> Self {
        Self {
            barrier_mev: m.barrier,
            height_var_um: m.height_var,
            barrier_pos_um: m.barrier_pos,
        }
    }
}

/// Trace and metrics of one assignment, with an optional plane map.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub assignment_hash: String,
    pub trace: Result<SaddleTrace, TraceError>,
    pub metrics: Option<TraceMetrics>,
    pub map: Option<PotentialMap>,
}

/// The single evaluation path shared by `evaluate` and the HTTP service.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_assignment(
    layout: &Layout,
    basis: &BasisEvaluator,
    v: &VoltageAssignment,
    ion: &IonSpecies,
    mode: PathMode,
    trace: &TraceSettings,
    map: Option<&MapConfig>,
) -> Result<Evaluation> {
    basis.weights(v)?;
    let trace = evaluate(basis, layout, v, ion, mode, trace);
    let m = trace.as_ref().ok().and_then(|t| metrics(t).ok());
    let map = match map {
        Some(mc) => {
            let (a, b) = mc.axes();
            Some(sample_map(basis, v, ion, mc.plane, a, b)?)
        }
        None => None,
    };
    Ok(Evaluation {
        assignment_hash: v.hash(),
        trace,
        metrics: m,
        map,
    })
}

fn versions() -> Value {
    json!({ "junctionforge": VERSION })
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok((path, BufWriter::new(f)))
}

fn write_report(dir: &Path, report: &Value) -> Result<PathBuf> {
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(path)
}

fn out_dir(config: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&config.out_dir).with_context(|| format!("creating {}", config.out_dir.display()))?;
    Ok(&config.out_dir)
}

fn paths(p: &[PathBuf]) -> Vec<String> {
    p.iter().map(|p| p.display().to_string()).collect()
}

/// Builds and validates the layout; writes `layout.json`.
pub fn cmd_layout(config: &RunConfig) -> Result<Layout> {
    let dir = out_dir(config)?;
    let layout = config.layout.build()?;
    let diags = validate(&layout);
    let path = dir.join("layout.json");
    fs::write(&path, layout.to_json())?;
    write_report(
        dir,
        &json!({
            "command": "layout",
            "config_hash": config.hash(),
            "layout_hash": layout.hash(),
            "variant": layout.variant,
            "electrodes": layout.electrodes.len(),
            "rf_electrodes": layout.rf_electrodes().count(),
            "diagnostics": diags.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
            "artifacts": paths(&[path]),
            "versions": versions(),
        }),
    )?;
    if !diags.is_empty() {
        let list: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        bail!("layout has {} diagnostics: {}", diags.len(), list.join("; "));
    }
    Ok(layout)
}

/// Traces the configured assignment and writes `trace.csv`, `map.csv` and `report.json`.
pub fn cmd_evaluate(config: &RunConfig) -> Result<Value> {
    let dir = out_dir(config)?;
    let layout = config.layout.build()?;
    let basis = build_basis(&layout)?;
    let v = config.assignment(&layout)?;
    let default_map = MapConfig::default();
    let map_cfg = config.map.as_ref().unwrap_or(&default_map);
    let ev = evaluate_assignment(&layout, &basis, &v, &config.ion(), config.mode, &(&config.trace).into(), Some(map_cfg))?;
    let mut artifacts = Vec::new();
    if let Ok(t) = &ev.trace {
        let (p, w) = create(dir, "trace.csv")?;
        t.write_csv(w)?;
        artifacts.push(p);
    }
    if let Some(m) = &ev.map {
        let (p, w) = create(dir, "map.csv")?;
        m.write_csv(w)?;
        artifacts.push(p);
    }
    let report = json!({
        "command": "evaluate",
        "config_hash": config.hash(),
        "layout_hash": layout.hash(),
        "assignment_hash": ev.assignment_hash,
        "mode": config.mode,
        "metrics": ev.metrics.as_ref().map(MetricsReport::from),
        "omitted_sections": ev.trace.as_ref().map(|t| t.omitted).ok(),
        "error": ev.trace.as_ref().err().map(|e| e.to_string()),
        "artifacts": paths(&artifacts),
        "versions": versions(),
    });
    write_report(dir, &report)?;
    if let Err(e) = ev.trace {
        bail!("tracing failed: {e}");
    }
    Ok(report)
}

fn write_result(dir: &Path, r: &OptimizationResult, prefix: &str) -> Result<Vec<PathBuf>> {
    let (c, w) = create(dir, &format!("{prefix}convergence.csv"))?;
    r.write_convergence_csv(w)?;
    let best = dir.join(format!("{prefix}best_assignment.json"));
    fs::write(
        &best,
        serde_json::to_string_pretty(&json!({
            "assignment": r.best_assignment,
            "classAmplitudes": r.class_amplitudes,
            "geometryParams": r.geometry,
        }))?,
    )?;
    Ok(vec![c, best])
}

/// Runs the configured search and writes its report and artifacts.
pub fn cmd_optimize(config: &RunConfig) -> Result<Value> {
    let dir = out_dir(config)?;
    let o = config.optimize.clone().context("config has no optimize section")?;
    let mut report = match o.kind {
        OptimizeKind::Voltages => {
            let layout = config.layout.build()?;
            let basis = build_basis(&layout)?;
            let r = optimize_voltages_on(&layout, &basis, &config.optimization_spec()?)?;
            let artifacts = write_result(dir, &r, "")?;
            let mut rep = r.report_json();
            rep["metrics"] = json!(MetricsReport::from(&r.final_metrics));
            rep["artifacts"] = json!(paths(&artifacts));
            rep
        }
        OptimizeKind::Geometry => {
            let r = optimize_geometry(&config.geometry_spec()?)?;
            let artifacts = write_result(dir, &r, "")?;
            let mut rep = r.report_json();
            rep["metrics"] = json!(MetricsReport::from(&r.final_metrics));
            rep["artifacts"] = json!(paths(&artifacts));
            rep
        }
        OptimizeKind::Hybrid => {
            let h = hybrid_optimize(&config.geometry_spec()?, &config.optimization_spec()?)?;
            let mut artifacts = write_result(dir, &h.geometry, "geometry_")?;
            artifacts.extend(write_result(dir, &h.voltages, "")?);
            let mut rep = h.voltages.report_json();
            rep["metrics"] = json!(MetricsReport::from(&h.voltages.final_metrics));
            rep["geometryStage"] = h.geometry.report_json();
            rep["artifacts"] = json!(paths(&artifacts));
            rep
        }
    };
    report["command"] = json!("optimize");
    report["kind"] = serde_json::to_value(o.kind)?;
    report["config_hash"] = json!(config.hash());
    report["versions"] = versions();
    write_report(dir, &report)?;
    Ok(report)
}

/// Samples the Ψ volume and writes the level-set mesh.
pub fn cmd_isosurface(config: &RunConfig) -> Result<Value> {
    let dir = out_dir(config)?;
    let layout = config.layout.build()?;
    let basis = build_basis(&layout)?;
    let v = config.assignment(&layout)?;
    let vc = &config.volume;
    let [x, y, z] = vc.axes();
    let vol = sample_volume(&basis, &v, &config.ion(), x, y, z)?;
    let mesh = extract_isosurface(&vol, vc.level_mev);
    let path = match vc.format {
        MeshFormat::Stl => {
            let (p, w) = create(dir, "mesh.stl")?;
            mesh.write_stl(w, "psi")?;
            p
        }
        MeshFormat::Obj => {
            let (p, w) = create(dir, "mesh.obj")?;
            mesh.write_obj(w)?;
            p
        }
    };
    let (lo, hi) = vol.min_max();
    let report = json!({
        "command": "isosurface",
        "config_hash": config.hash(),
        "layout_hash": layout.hash(),
        "assignment_hash": v.hash(),
        "level_meV": vc.level_mev,
        "volume_range_meV": [lo, hi],
        "vertices": mesh.vertices.len(),
        "faces": mesh.triangles.len(),
        "components": mesh.components().len(),
        "boundary_edges": mesh.boundary_edge_count(),
        "artifacts": paths(&[path]),
        "versions": versions(),
    });
    write_report(dir, &report)?;
    Ok(report)
}
