//! JSON run configuration. Field names carry their units.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use junctionforge_core::field::{DriveConfig, VoltageAssignment};
use junctionforge_core::layout::{
    add_finger, add_wedges, build_x_junction_with, CornerLabels, FingerParams, Layout, LayoutDims, Variant, WedgeParams,
};
use junctionforge_core::optimize::{GeometrySpec, GeometryTarget, OptimizationSpec, SearchSettings};
use junctionforge_core::pseudo::{GridAxis, IonSpecies, MapPlane, PathMode, TraceSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerConfig {
    pub alpha_deg: f64,
    pub b_um: f64,
    pub d1_um: f64,
}

impl Default for FingerConfig {
    fn default() -> Self {
        let p = FingerParams::default();
        Self {
            alpha_deg: p.alpha_deg,
            b_um: p.b,
            d1_um: p.d1,
        }
    }
}

impl From<&FingerConfig> for FingerParams {
    fn from(c: &FingerConfig) -> Self {
        FingerParams {
            alpha_deg: c.alpha_deg,
            b: c.b_um,
            d1: c.d1_um,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WedgeConfig {
    pub beta_deg: f64,
    pub w2_um: f64,
    pub l2w_um: f64,
    pub d2_um: f64,
}

impl Default for WedgeConfig {
    fn default() -> Self {
        let p = WedgeParams::default();
        Self {
            beta_deg: p.beta_deg,
            w2_um: p.w2,
            l2w_um: p.l2w,
            d2_um: p.d2,
        }
    }
}

impl From<&WedgeConfig> for WedgeParams {
    fn from(c: &WedgeConfig) -> Self {
        WedgeParams {
            beta_deg: c.beta_deg,
            w2: c.w2_um,
            l2w: c.l2w_um,
            d2: c.d2_um,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub w1_um: f64,
    pub l1_um: f64,
    pub l2_um: f64,
    pub l3_um: f64,
    pub wgnd_um: f64,
    pub g_um: f64,
    pub arm_length_um: f64,
    pub variant: Variant,
    pub corner_labels: CornerLabels,
    pub finger: Option<FingerConfig>,
    pub wedge: Option<WedgeConfig>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        let d = LayoutDims::default();
        Self {
            w1_um: d.w1,
            l1_um: d.l1,
            l2_um: d.l2,
            l3_um: d.l3,
            wgnd_um: d.wgnd,
            g_um: d.g,
            arm_length_um: d.arm_length,
            variant: Variant::Baseline,
            corner_labels: CornerLabels::Tied,
            finger: None,
            wedge: None,
        }
    }
}

impl LayoutConfig {
    pub fn dims(&self) -> LayoutDims {
        LayoutDims {
            w1: self.w1_um,
            l1: self.l1_um,
            l2: self.l2_um,
            l3: self.l3_um,
            wgnd: self.wgnd_um,
            g: self.g_um,
            arm_length: self.arm_length_um,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match self.variant {
            Variant::Baseline => self.finger.is_none() && self.wedge.is_none(),
            Variant::Finger => self.finger.is_some() && self.wedge.is_none(),
            Variant::FingerWedge => self.finger.is_some() && self.wedge.is_some(),
        };
        if !ok {
            bail!(
                "layout variant {} does not match the given finger/wedge parameters",
                self.variant
            );
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Layout> {
        self.check()?;
        let mut l = build_x_junction_with(self.dims(), self.corner_labels)?;
        if let Some(f) = &self.finger {
            l = add_finger(&l, f.into())?;
        }
        if let Some(w) = &self.wedge {
            l = add_wedges(&l, w.into())?;
        }
        Ok(l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IonConfig {
    pub mass_u: f64,
    pub charge: u32,
}

impl Default for IonConfig {
    fn default() -> Self {
        Self {
            mass_u: IonSpecies::YB171.mass_u,
            charge: IonSpecies::YB171.charge,
        }
    }
}

/// Explicit amplitudes; groups not listed take `uniform_v` when given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoltageConfig {
    pub uniform_v: Option<f64>,
    pub amplitudes_v: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub range_um: [f64; 2],
    pub step_um: f64,
    pub z_bounds_um: [f64; 2],
    pub pivot_um: Option<f64>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        let t = TraceSettings::default();
        Self {
            range_um: t.range,
            step_um: t.step,
            z_bounds_um: t.z_bounds,
            pivot_um: t.pivot,
        }
    }
}

impl From<&TraceConfig> for TraceSettings {
    fn from(c: &TraceConfig) -> Self {
        TraceSettings {
            range: c.range_um,
            step: c.step_um,
            pivot: c.pivot_um,
            z_bounds: c.z_bounds_um,
        }
    }
}

/// Plane map on a `step`-spaced grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub plane: MapPlane,
    pub a_um: [f64; 2],
    pub b_um: [f64; 2],
    pub step_a_um: f64,
    pub step_b_um: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            plane: MapPlane::Xz { y: 0.0 },
            a_um: [0.0, 500.0],
            b_um: [20.0, 150.0],
            step_a_um: 2.0,
            step_b_um: 1.0,
        }
    }
}

impl MapConfig {
    pub fn axes(&self) -> (GridAxis, GridAxis) {
        (
            GridAxis::with_step(self.a_um[0], self.a_um[1], self.step_a_um),
            GridAxis::with_step(self.b_um[0], self.b_um[1], self.step_b_um),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshFormat {
    Stl,
    Obj,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VolumeConfig {
    pub x_um: [f64; 2],
    pub y_um: [f64; 2],
    pub z_um: [f64; 2],
    pub step_um: f64,
    pub level_mev: f64,
    pub format: MeshFormat,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            x_um: [-40.0, 340.0],
            y_um: [-40.0, 340.0],
            z_um: [8.0, 200.0],
            step_um: 4.0,
            level_mev: 0.4,
            format: MeshFormat::Stl,
        }
    }
}

impl VolumeConfig {
    pub fn axes(&self) -> [GridAxis; 3] {
        [self.x_um, self.y_um, self.z_um].map(|r| GridAxis::with_step(r[0], r[1], self.step_um))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizeKind {
    Voltages,
    Geometry,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub kind: OptimizeKind,
    /// Geometry target of `geometry` and `hybrid` runs.
    pub target: GeometryTarget,
    pub restarts: usize,
    pub max_evals: usize,
    pub geometry_restarts: usize,
    pub geometry_max_evals: usize,
    pub initial_step: f64,
    pub f_tol: f64,
    pub x_tol: f64,
    pub polish: bool,
    pub bounds_v: [f64; 2],
    pub class_bounds_v: BTreeMap<String, [f64; 2]>,
    pub base_v: f64,
    pub free_bulk: bool,
    pub lambda_mev_per_um: f64,
    /// Geometry bounds keyed `alpha_deg`, `d1_um`, `w2_um`, `l2w_um`, `d2_um`.
    pub geometry_bounds: BTreeMap<String, [f64; 2]>,
    /// Fixed amplitudes during a geometry search (default RF2f = 85 V for wedges).
    pub geometry_overrides_v: Option<BTreeMap<String, f64>>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        let s = SearchSettings::default();
        let g = GeometrySpec::default().search;
        Self {
            kind: OptimizeKind::Voltages,
            target: GeometryTarget::Finger,
            restarts: s.restarts,
            max_evals: s.max_evals,
            geometry_restarts: g.restarts,
            geometry_max_evals: g.max_evals,
            initial_step: s.initial_step,
            f_tol: s.f_tol,
            x_tol: s.x_tol,
            polish: s.polish,
            bounds_v: [0.0, 200.0],
            class_bounds_v: BTreeMap::new(),
            base_v: 100.0,
            free_bulk: false,
            lambda_mev_per_um: 0.0,
            geometry_bounds: BTreeMap::new(),
            geometry_overrides_v: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub layout: LayoutConfig,
    pub ion: IonConfig,
    pub drive_mhz: f64,
    pub mode: PathMode,
    pub voltages: Option<VoltageConfig>,
    pub trace: TraceConfig,
    pub map: Option<MapConfig>,
    pub volume: VolumeConfig,
    pub optimize: Option<OptimizeConfig>,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            layout: LayoutConfig::default(),
            ion: IonConfig::default(),
            drive_mhz: 30.0,
            mode: PathMode::Corner,
            voltages: None,
            trace: TraceConfig::default(),
            map: None,
            volume: VolumeConfig::default(),
            optimize: None,
            out_dir: PathBuf::from("out"),
            seed: None,
        }
    }
}

impl RunConfig {
    /// Parses without [`RunConfig::check`], so command-line overrides can still apply.
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).context("parsing run config")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&s).with_context(|| format!("in {}", path.display()))
    }

    pub fn check(&self) -> Result<()> {
        self.layout.check()?;
        if !(self.drive_mhz > 0.0) {
            bail!("drive_mhz must be > 0, got {}", self.drive_mhz);
        }
        if !(self.ion.mass_u > 0.0) || self.ion.charge < 1 {
            bail!("ion needs mass_u > 0 and charge ≥ 1");
        }
        if self.optimize.is_some() && self.seed.is_none() {
            bail!("an optimisation run needs a seed");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, leaving out `out_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        v.as_object_mut().expect("config is an object").remove("out_dir");
        let json = serde_json::to_vec(&v).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn drive(&self) -> DriveConfig {
        DriveConfig::from_mhz(self.drive_mhz)
    }

    pub fn ion(&self) -> IonSpecies {
        IonSpecies {
            mass_u: self.ion.mass_u,
            charge: self.ion.charge,
        }
    }

    /// Explicit voltage assignment for `layout`.
    pub fn assignment(&self, layout: &Layout) -> Result<VoltageAssignment> {
        let Some(vc) = &self.voltages else {
            bail!("config has no voltages section");
        };
        let groups = layout.rf_groups();
        if let Some(extra) = vc.amplitudes_v.keys().find(|g| !groups.contains(*g)) {
            bail!("amplitude given for unknown group {extra:?}");
        }
        let mut amps = BTreeMap::new();
        for g in &groups {
            let v = match (vc.amplitudes_v.get(g), vc.uniform_v) {
                (Some(v), _) => *v,
                (None, Some(u)) => u,
                (None, None) => bail!("no amplitude for group {g:?}"),
            };
            amps.insert(g.clone(), v);
        }
        Ok(VoltageAssignment::new(amps, self.drive()))
    }

    fn search(&self, o: &OptimizeConfig, geometry: bool) -> SearchSettings {
        SearchSettings {
            restarts: if geometry { o.geometry_restarts } else { o.restarts },
            max_evals: if geometry { o.geometry_max_evals } else { o.max_evals },
            f_tol: o.f_tol,
            x_tol: o.x_tol,
            initial_step: o.initial_step,
            polish: o.polish,
        }
    }

    pub fn optimization_spec(&self) -> Result<OptimizationSpec> {
        let o = self.optimize.clone().unwrap_or_default();
        let mut s = OptimizationSpec::new(self.mode);
        s.bounds = o.bounds_v;
        s.class_bounds = o.class_bounds_v.clone();
        s.base_amplitude = o.base_v;
        s.free_bulk = o.free_bulk;
        s.lambda = o.lambda_mev_per_um;
        s.trace = (&self.trace).into();
        s.search = self.search(&o, false);
        s.seed = self.seed.context("an optimisation run needs a seed")?;
        s.ion = self.ion();
        s.drive = self.drive();
        if let Some(vc) = &self.voltages {
            s.initial = vc.amplitudes_v.clone();
        }
        Ok(s)
    }

    pub fn geometry_spec(&self) -> Result<GeometrySpec> {
        let o = self.optimize.clone().unwrap_or_default();
        let finger = self.layout.finger.as_ref().map(FingerParams::from).unwrap_or_default();
        let mut g = match o.target {
            GeometryTarget::Finger => GeometrySpec::finger(self.mode),
            GeometryTarget::Wedge => GeometrySpec::wedge(self.mode, finger),
        };
        g.dims = self.layout.dims();
        g.finger = finger;
        if let Some(w) = &self.layout.wedge {
            g.wedge = w.into();
        }
        for (k, v) in &o.geometry_bounds {
            g.bounds.insert(k.trim_end_matches("_um").to_string(), *v);
        }
        g.base_amplitude = o.base_v;
        if let Some(ov) = &o.geometry_overrides_v {
            g.overrides = ov.clone();
        }
        g.lambda = o.lambda_mev_per_um;
        g.trace = (&self.trace).into();
        g.search = self.search(&o, true);
        g.seed = self.seed.context("an optimisation run needs a seed")?;
        g.ion = self.ion();
        g.drive = self.drive();
        Ok(g)
    }
}
