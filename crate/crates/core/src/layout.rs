//! Segmented RF electrode layout of a surface-trap X-junction.
//!
//! The junction is built from a five-wire trap crossed with itself: a central
//! ground cross of width `wgnd`, flanked on every arm by two RF rails of width
//! `w1`. Near the junction each rail is cut into three labelled segments
//! followed by one bulk rail, and the four rail corners become square
//! electrodes (group `e`). Everything that is not an RF polygon is ground.
//!
//! Labels follow `RF{i}{X}` where `X` is the arm letter (A = +x, B = +y,
//! C = −x, D = −y). Upper case marks the rail on the positive side of the
//! transverse axis (y > 0 for arms A/C, x > 0 for arms B/D), lower case the
//! negative side.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{reflect_x, reflect_y, swap_xy, Polygon, Rect, Vertex};

/// Vertex tolerance for symmetry checks (μm).
pub const SYMMETRY_TOL_UM: f64 = 1e-9;

pub const GROUND_LABEL: &str = "GND";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("electrodes {a} ({group_a}) and {b} ({group_b}) collide: {detail}")]
    Collision {
        a: u32,
        group_a: String,
        b: u32,
        group_b: String,
        detail: String,
    },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("operation requires a {expected} layout, got {found}")]
    WrongVariant { expected: Variant, found: Variant },
}

/// Parametric dimensions of the junction, all in μm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutDims {
    /// RF rail width.
    pub w1: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    /// Width of the central ground rail.
    pub wgnd: f64,
    /// Inter-electrode gap.
    pub g: f64,
    /// Extent of the bulk rails measured from the junction centre.
    pub arm_length: f64,
}

impl Default for LayoutDims {
    fn default() -> Self {
        Self {
            w1: 80.0,
            l1: 45.0,
            l2: 45.0,
            l3: 45.0,
            wgnd: 100.0,
            g: 4.0,
            arm_length: 2000.0,
        }
    }
}

impl LayoutDims {
    pub fn segment_lengths(&self) -> [f64; 3] {
        [self.l1, self.l2, self.l3]
    }

    /// Distance from an axis to the inner edge of its RF rails.
    pub fn rail_inner(&self) -> f64 {
        0.5 * self.wgnd + self.g
    }

    pub fn rail_outer(&self) -> f64 {
        self.rail_inner() + self.w1
    }

    /// Axial coordinate where the bulk rail starts.
    pub fn bulk_start(&self) -> f64 {
        self.rail_outer() + 4.0 * self.g + self.l1 + self.l2 + self.l3
    }

    /// Checks every invariant except the sign of `g`, which is caught as a geometric collision.
    fn check(&self) -> Result<(), LayoutError> {
        let all = [
            ("w1", self.w1),
            ("l1", self.l1),
            ("l2", self.l2),
            ("l3", self.l3),
            ("wgnd", self.wgnd),
            ("arm_length", self.arm_length),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v > 0.0) {
                return Err(LayoutError::InvalidDims(format!("{name} must be > 0, got {v}")));
            }
        }
        if !self.g.is_finite() {
            return Err(LayoutError::InvalidDims("g must be finite".into()));
        }
        if self.g >= self.w1 {
            return Err(LayoutError::InvalidDims(format!(
                "gap g = {} must be smaller than w1 = {}",
                self.g, self.w1
            )));
        }
        if self.arm_length <= self.bulk_start() {
            return Err(LayoutError::InvalidDims(format!(
                "arm_length = {} must exceed the bulk rail start at {}",
                self.arm_length,
                self.bulk_start()
            )));
        }
        Ok(())
    }
}

/// Finger reshaping of the four corner electrodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FingerParams {
    /// Half-angle of the finger tip about the quadrant diagonal (degrees).
    pub alpha_deg: f64,
    /// Diagonal coordinate (x = y = b) of the finger base, μm.
    pub b: f64,
    /// Distance between diagonally opposite finger tips, μm.
    pub d1: f64,
}

impl Default for FingerParams {
    fn default() -> Self {
        Self {
            alpha_deg: 12.6,
            b: 60.0,
            d1: 34.0,
        }
    }
}

/// Wedge electrodes in the ground strips of arms B and D, pointing at the junction centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WedgeParams {
    /// Apex angle (degrees).
    pub beta_deg: f64,
    /// Width across the wedge axis, μm.
    pub w2: f64,
    /// Length of the outer rectangular segment, μm.
    pub l2w: f64,
    /// Distance between the apexes of the two inner wedges, μm.
    pub d2: f64,
}

impl Default for WedgeParams {
    fn default() -> Self {
        Self {
            beta_deg: 53.0,
            w2: 29.0,
            l2w: 40.0,
            d2: 152.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Rf,
    Ground,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Finger,
    FingerWedge,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Finger => "finger",
            Variant::FingerWedge => "finger_wedge",
        })
    }
}

/// How the four corner electrodes are labelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CornerLabels {
    /// All four share group `e`.
    #[default]
    Tied,
    /// `e1`..`e4`, counter-clockwise from the +x/+y quadrant.
    PerSquare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Electrode {
    pub id: u32,
    pub group: String,
    pub role: Role,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub dims: LayoutDims,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finger: Option<FingerParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wedge: Option<WedgeParams>,
    pub electrodes: Vec<Electrode>,
}

const ARMS: [char; 4] = ['A', 'B', 'C', 'D'];

/// Maps a point given in arm-A coordinates (axial, transverse) onto `arm`.
fn arm_transform(arm: char, axial: f64, transverse: f64) -> Vertex {
    match arm {
        'A' => [axial, transverse],
        'B' => [transverse, axial],
        'C' => [-axial, transverse],
        'D' => [transverse, -axial],
        _ => unreachable!("unknown arm {arm}"),
    }
}

fn rail_letter(arm: char, positive_side: bool) -> char {
    if positive_side {
        arm
    } else {
        arm.to_ascii_lowercase()
    }
}

/// The quadrant images of a polygon drawn in the +x/+y quadrant, counter-clockwise from Q1.
fn quadrant_images(p: &Polygon) -> [Polygon; 4] {
    [
        p.clone(),
        p.reflected(reflect_x),
        p.map(|v| [-v[0], -v[1]]).to_ccw(),
        p.reflected(reflect_y),
    ]
}

fn corner_label(labels: CornerLabels, quadrant: usize) -> String {
    match labels {
        CornerLabels::Tied => "e".to_string(),
        CornerLabels::PerSquare => format!("e{}", quadrant + 1),
    }
}

fn is_corner_label(group: &str) -> bool {
    group == "e" || (group.len() == 2 && group.starts_with('e'))
}

/// Builds the baseline segmented X-junction with tied corner labels.
pub fn build_x_junction(dims: LayoutDims) -> Result<Layout, LayoutError> {
    build_x_junction_with(dims, CornerLabels::Tied)
}

pub fn build_x_junction_with(dims: LayoutDims, labels: CornerLabels) -> Result<Layout, LayoutError> {
    dims.check()?;
    let inner = dims.rail_inner();
    let outer = dims.rail_outer();
    let mut electrodes = Vec::new();
    let mut push = |group: String, polygon: Polygon| {
        let id = electrodes.len() as u32;
        electrodes.push(Electrode {
            id,
            group,
            role: Role::Rf,
            polygon,
        });
    };

    let square = Rect::new(inner, outer, inner, outer).to_polygon();
    for (q, poly) in quadrant_images(&square).into_iter().enumerate() {
        push(corner_label(labels, q), poly);
    }

    let mut spans = Vec::new();
    let mut start = outer + dims.g;
    for (i, len) in dims.segment_lengths().into_iter().enumerate() {
        spans.push((format!("RF{}", i + 1), start, start + len));
        start += len + dims.g;
    }
    spans.push(("BULK_".to_string(), start, dims.arm_length));

    for arm in ARMS {
        for (prefix, a0, a1) in &spans {
            for positive in [true, false] {
                let (t0, t1) = if positive { (inner, outer) } else { (-outer, -inner) };
                let p = arm_transform(arm, *a0, t0);
                let q = arm_transform(arm, *a1, t1);
                let poly = Rect::new(p[0], q[0], p[1], q[1]).to_polygon();
                push(format!("{prefix}{}", rail_letter(arm, positive)), poly);
            }
        }
    }

    let layout = Layout {
        dims,
        variant: Variant::Baseline,
        finger: None,
        wedge: None,
        electrodes,
    };
    ensure_valid(&layout)?;
    Ok(layout)
}

/// Finger polygon in the +x/+y quadrant, counter-clockwise.
fn finger_polygon(dims: &LayoutDims, p: &FingerParams) -> Result<Polygon, LayoutError> {
    if !(p.alpha_deg > 0.0 && p.alpha_deg < 90.0) {
        return Err(LayoutError::InvalidParams(format!(
            "finger half-angle must lie in (0, 90) degrees, got {}",
            p.alpha_deg
        )));
    }
    if !(p.b > 0.0 && p.b.is_finite()) {
        return Err(LayoutError::InvalidParams(format!("finger base b must be > 0, got {}", p.b)));
    }
    if !(p.d1 > 0.0 && p.d1.is_finite()) {
        return Err(LayoutError::Geometry(format!(
            "finger tips cross the junction centre (d1 = {})",
            p.d1
        )));
    }
    let inner = dims.rail_inner();
    let outer = dims.rail_outer();
    let tip = p.d1 / (2.0 * std::f64::consts::SQRT_2);
    if p.b <= tip {
        return Err(LayoutError::Geometry(format!(
            "finger base b = {} lies inside the tip at {tip:.3}",
            p.b
        )));
    }
    if p.b >= outer {
        return Err(LayoutError::Geometry(format!(
            "finger base b = {} lies beyond the corner electrode",
            p.b
        )));
    }
    // Side at 45° − α from the x axis meets the base line x + y = 2b.
    let theta = (45.0 - p.alpha_deg).to_radians();
    let (c, s) = (theta.cos(), theta.sin());
    let lambda = 2.0 * (p.b - tip) / (c + s);
    let mut side = vec![[tip + lambda * c, tip + lambda * s]];
    // Wide tips are clipped at the quadrant boundary so mirrored fingers keep the gap.
    let floor = 0.5 * dims.g;
    if side[0][1] < floor && tip > floor {
        let mu = (floor - tip) / s;
        side = vec![[tip + mu * c, floor]];
        let base_end = 2.0 * p.b - floor;
        if base_end > side[0][0] {
            side.push([base_end, floor]);
        }
    }
    let mut vertices = vec![[tip, tip]];
    vertices.extend(side.iter().copied());
    vertices.extend([[outer, inner], [outer, outer], [inner, outer]]);
    vertices.extend(side.iter().rev().map(|&v| swap_xy(v)));
    let poly = Polygon::new(vertices)
    .simplified(SYMMETRY_TOL_UM);
    if !poly.is_simple() || poly.signed_area() <= 0.0 {
        return Err(LayoutError::Geometry(format!(
            "finger with α = {}°, b = {}, d1 = {} is self-intersecting",
            p.alpha_deg, p.b, p.d1
        )));
    }
    Ok(poly)
}

/// Replaces the four corner squares with finger electrodes.
pub fn add_finger(layout: &Layout, p: FingerParams) -> Result<Layout, LayoutError> {
    if layout.variant != Variant::Baseline {
        return Err(LayoutError::WrongVariant {
            expected: Variant::Baseline,
            found: layout.variant,
        });
    }
    let base = finger_polygon(&layout.dims, &p)?;
    let images = quadrant_images(&base);
    let mut out = layout.clone();
    let mut quadrant = 0;
    for e in out.electrodes.iter_mut().filter(|e| is_corner_label(&e.group)) {
        let c = e.polygon.centroid();
        quadrant = match (c[0] > 0.0, c[1] > 0.0) {
            (true, true) => 0,
            (false, true) => 1,
            (false, false) => 2,
            (true, false) => 3,
        };
        e.polygon = images[quadrant].clone();
    }
    debug_assert!(quadrant < 4);
    out.variant = Variant::Finger;
    out.finger = Some(p);
    ensure_valid(&out)?;
    Ok(out)
}

/// Wedge pair on the +y axis: (pointed inner segment, rectangular outer segment).
fn wedge_polygons(dims: &LayoutDims, p: &WedgeParams) -> Result<(Polygon, Polygon), LayoutError> {
    if !(p.beta_deg > 0.0 && p.beta_deg < 180.0) {
        return Err(LayoutError::InvalidParams(format!(
            "wedge apex angle must lie in (0, 180) degrees, got {}",
            p.beta_deg
        )));
    }
    for (name, v) in [("w2", p.w2), ("l2w", p.l2w), ("d2", p.d2)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(LayoutError::InvalidParams(format!("wedge {name} must be > 0, got {v}")));
        }
    }
    let half = 0.5 * p.w2;
    let apex = 0.5 * p.d2;
    let tip_len = half / (0.5 * p.beta_deg).to_radians().tan();
    let back_start = apex + tip_len + dims.g;
    let back_end = back_start + p.l2w;
    let tip = Polygon::new(vec![[0.0, apex], [half, apex + tip_len], [-half, apex + tip_len]]);
    let back = Rect::new(-half, half, back_start, back_end).to_polygon();
    Ok((tip, back))
}

/// Inserts two wedge electrodes (inner `RF1f`, outer `RF2f`) on each of arms B and D.
pub fn add_wedges(layout: &Layout, p: WedgeParams) -> Result<Layout, LayoutError> {
    if layout.variant != Variant::Finger {
        return Err(LayoutError::WrongVariant {
            expected: Variant::Finger,
            found: layout.variant,
        });
    }
    let (tip, back) = wedge_polygons(&layout.dims, &p)?;
    let mut out = layout.clone();
    let mut next = out.electrodes.iter().map(|e| e.id).max().map_or(0, |m| m + 1);
    for (group, poly) in [("RF1f", &tip), ("RF2f", &back)] {
        for image in [poly.clone(), poly.reflected(reflect_y)] {
            out.electrodes.push(Electrode {
                id: next,
                group: group.to_string(),
                role: Role::Rf,
                polygon: image,
            });
            next += 1;
        }
    }
    out.variant = Variant::FingerWedge;
    out.wedge = Some(p);
    ensure_valid(&out)?;
    Ok(out)
}

fn ensure_valid(layout: &Layout) -> Result<(), LayoutError> {
    let diags = validate(layout);
    let first = match diags.into_iter().next() {
        None => return Ok(()),
        Some(d) => d,
    };
    let group = |id: u32| {
        layout
            .electrodes
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.group.clone())
            .unwrap_or_default()
    };
    Err(match first {
        Diagnostic::Overlap { a, b } => LayoutError::Collision {
            a,
            group_a: group(a),
            b,
            group_b: group(b),
            detail: "interiors overlap".into(),
        },
        Diagnostic::Clearance { a, b, distance } => LayoutError::Collision {
            a,
            group_a: group(a),
            b,
            group_b: group(b),
            detail: if distance <= SYMMETRY_TOL_UM {
                "boundaries overlap with zero clearance".into()
            } else {
                format!("clearance {distance:.4} μm below gap {}", layout.dims.g)
            },
        },
        other => LayoutError::Geometry(other.to_string()),
    })
}

/// One violated layout invariant.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    SelfIntersection { id: u32 },
    DegenerateArea { id: u32 },
    Overlap { a: u32, b: u32 },
    Clearance { a: u32, b: u32, distance: f64 },
    BrokenSymmetry { id: u32, axis: char },
    MissingGroup { id: u32 },
    GroundLabel { id: u32, group: String },
    DuplicateId { id: u32 },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::SelfIntersection { id } => write!(f, "electrode {id}: polygon is not simple"),
            Diagnostic::DegenerateArea { id } => write!(f, "electrode {id}: polygon has no area"),
            Diagnostic::Overlap { a, b } => write!(f, "electrodes {a} and {b} overlap"),
            Diagnostic::Clearance { a, b, distance } => {
                write!(f, "electrodes {a} and {b} are {distance:.6} μm apart")
            }
            Diagnostic::BrokenSymmetry { id, axis } => {
                write!(f, "electrode {id} has no mirror image under {axis} -> -{axis}")
            }
            Diagnostic::MissingGroup { id } => write!(f, "rf electrode {id} has no group label"),
            Diagnostic::GroundLabel { id, group } => {
                write!(f, "ground electrode {id} is labelled {group:?} instead of GND")
            }
            Diagnostic::DuplicateId { id } => write!(f, "electrode id {id} is used more than once"),
        }
    }
}

fn bboxes_within(a: &Rect, b: &Rect, margin: f64) -> bool {
    a.x1 <= b.x2 + margin && b.x1 <= a.x2 + margin && a.y1 <= b.y2 + margin && b.y1 <= a.y2 + margin
}

/// Lists every violated invariant; empty when the layout is sound.
pub fn validate(layout: &Layout) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for e in &layout.electrodes {
        if !ids.insert(e.id) {
            out.push(Diagnostic::DuplicateId { id: e.id });
        }
        if !e.polygon.is_simple() {
            out.push(Diagnostic::SelfIntersection { id: e.id });
        } else if e.polygon.area() <= 0.0 {
            out.push(Diagnostic::DegenerateArea { id: e.id });
        }
        match e.role {
            Role::Rf if e.group.trim().is_empty() => out.push(Diagnostic::MissingGroup { id: e.id }),
            Role::Ground if e.group != GROUND_LABEL => out.push(Diagnostic::GroundLabel {
                id: e.id,
                group: e.group.clone(),
            }),
            _ => {}
        }
    }

    let gap = layout.dims.g.max(0.0);
    let boxes: Vec<Rect> = layout.electrodes.iter().map(|e| e.polygon.bbox()).collect();
    for i in 0..layout.electrodes.len() {
        for j in (i + 1)..layout.electrodes.len() {
            if !bboxes_within(&boxes[i], &boxes[j], gap + 1e-6) {
                continue;
            }
            let (a, b) = (&layout.electrodes[i], &layout.electrodes[j]);
            if a.polygon.interiors_overlap(&b.polygon) {
                out.push(Diagnostic::Overlap { a: a.id, b: b.id });
                continue;
            }
            let d = a.polygon.boundary_distance(&b.polygon);
            if d <= SYMMETRY_TOL_UM || d < gap - SYMMETRY_TOL_UM {
                out.push(Diagnostic::Clearance {
                    a: a.id,
                    b: b.id,
                    distance: d,
                });
            }
        }
    }

    for (axis, f) in [('x', reflect_x as fn(Vertex) -> Vertex), ('y', reflect_y)] {
        for e in &layout.electrodes {
            let image = e.polygon.map(f);
            let found = layout
                .electrodes
                .iter()
                .any(|o| o.role == e.role && o.polygon.same_vertex_set(&image, SYMMETRY_TOL_UM));
            if !found {
                out.push(Diagnostic::BrokenSymmetry { id: e.id, axis });
            }
        }
    }
    out
}

impl Layout {
    pub fn rf_electrodes(&self) -> impl Iterator<Item = &Electrode> {
        self.electrodes.iter().filter(|e| e.role == Role::Rf)
    }

    /// Sorted set of RF group labels.
    pub fn rf_groups(&self) -> BTreeSet<String> {
        self.rf_electrodes().map(|e| e.group.clone()).collect()
    }

    pub fn electrode(&self, id: u32) -> Option<&Electrode> {
        self.electrodes.iter().find(|e| e.id == id)
    }

    /// Total area of all RF polygons, μm².
    pub fn rf_area(&self) -> f64 {
        self.rf_electrodes().map(|e| e.polygon.area()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn from_json(s: &str) -> Result<Layout, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("layout serializes");
        hex(&Sha256::digest(canonical))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Which symmetry the tie classes encode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieMode {
    /// Reflection across x = y (turning from arm A into arm B).
    Corner,
    /// Reflection x → −x (straight transport from arm A to arm C).
    Linear,
    /// A single amplitude for every RF group.
    Uniform,
}

impl fmt::Display for TieMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TieMode::Corner => "corner",
            TieMode::Linear => "linear",
            TieMode::Uniform => "uniform",
        })
    }
}

/// Partition of RF group labels into classes that share one amplitude.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieMap {
    pub mode: TieMode,
    pub classes: Vec<Vec<String>>,
}

impl TieMap {
    pub fn class_of(&self, group: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.iter().any(|g| g == group))
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.classes.iter().flatten().cloned().collect()
    }

    /// Per-group amplitudes from one value per class.
    pub fn expand(&self, class_values: &[f64]) -> BTreeMap<String, f64> {
        assert_eq!(class_values.len(), self.classes.len(), "one value per tie class");
        self.classes
            .iter()
            .zip(class_values)
            .flat_map(|(c, v)| c.iter().map(move |g| (g.clone(), *v)))
            .collect()
    }

    /// True when every class carries a single amplitude in `amplitudes`.
    pub fn respected_by(&self, amplitudes: &BTreeMap<String, f64>) -> bool {
        self.classes.iter().all(|c| {
            let vals: Vec<f64> = c.iter().filter_map(|g| amplitudes.get(g).copied()).collect();
            vals.len() == c.len() && vals.windows(2).all(|w| w[0] == w[1])
        })
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let p = self.0[i];
        if p == i {
            return i;
        }
        let r = self.find(p);
        self.0[i] = r;
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Groups RF labels whose electrodes map onto each other under the mode's reflection.
pub fn symmetry_ties(layout: &Layout, mode: TieMode) -> TieMap {
    let labels: Vec<String> = layout.rf_groups().into_iter().collect();
    let index: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut uf = UnionFind((0..labels.len()).collect());
    match mode {
        TieMode::Uniform => {
            for i in 1..labels.len() {
                uf.union(0, i);
            }
        }
        TieMode::Corner | TieMode::Linear => {
            let f: fn(Vertex) -> Vertex = if mode == TieMode::Corner { swap_xy } else { reflect_x };
            let rf: Vec<&Electrode> = layout.rf_electrodes().collect();
            for e in &rf {
                let image = e.polygon.map(f);
                if let Some(o) = rf
                    .iter()
                    .find(|o| o.polygon.same_vertex_set(&image, 1e-6))
                {
                    uf.union(index[e.group.as_str()], index[o.group.as_str()]);
                }
            }
        }
    }
    let mut classes: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        classes.entry(uf.find(i)).or_default().push(l.clone());
    }
    TieMap {
        mode,
        classes: classes.into_values().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_layout() -> Layout {
        build_x_junction(LayoutDims::default()).unwrap()
    }

    #[test]
    fn baseline_counts() {
        let l = default_layout();
        assert_eq!(l.rf_electrodes().count(), 36);
        assert_eq!(l.electrodes.iter().filter(|e| e.group == "e").count(), 4);
        let segments = l
            .electrodes
            .iter()
            .filter(|e| e.group.starts_with("RF"))
            .count();
        assert_eq!(segments, 24);
        assert_eq!(l.electrodes.iter().filter(|e| e.group.starts_with("BULK_")).count(), 8);
        assert!(validate(&l).is_empty());
    }

    #[test]
    fn segments_are_45_by_80() {
        let l = default_layout();
        for e in l.electrodes.iter().filter(|e| e.group.starts_with("RF")) {
            let r = e.polygon.as_rect().expect("segments are rectangles");
            let (a, b) = (r.width().min(r.height()), r.width().max(r.height()));
            assert!((a - 45.0).abs() < 1e-12 && (b - 80.0).abs() < 1e-12, "{}: {:?}", e.group, r);
        }
    }

    #[test]
    fn zero_gap_collides() {
        let dims = LayoutDims {
            g: 0.0,
            ..LayoutDims::default()
        };
        match build_x_junction(dims) {
            Err(LayoutError::Collision { detail, .. }) => assert!(detail.contains("overlap")),
            other => panic!("expected collision, got {other:?}"),
        }
    }

    #[test]
    fn dims_invariants() {
        let bad = LayoutDims {
            g: 90.0,
            ..LayoutDims::default()
        };
        assert!(matches!(build_x_junction(bad), Err(LayoutError::InvalidDims(_))));
        let short = LayoutDims {
            arm_length: 200.0,
            ..LayoutDims::default()
        };
        assert!(matches!(build_x_junction(short), Err(LayoutError::InvalidDims(_))));
    }

    #[test]
    fn reference_finger_is_valid() {
        let l = add_finger(&default_layout(), FingerParams::default()).unwrap();
        assert_eq!(l.variant, Variant::Finger);
        assert!(validate(&l).is_empty());
        let tips: Vec<Vertex> = l
            .electrodes
            .iter()
            .filter(|e| e.group == "e")
            .map(|e| {
                *e.polygon
                    .vertices
                    .iter()
                    .min_by(|a, b| (a[0].hypot(a[1])).total_cmp(&b[0].hypot(b[1])))
                    .unwrap()
            })
            .collect();
        assert_eq!(tips.len(), 4);
        let d = ((tips[0][0] - tips[2][0]).powi(2) + (tips[0][1] - tips[2][1]).powi(2)).sqrt();
        assert!((d - 34.0).abs() < 1e-9, "diagonal tip distance {d}");
    }

    #[test]
    fn right_angle_finger_at_corner_is_the_square() {
        let base = default_layout();
        let inner = base.dims.rail_inner();
        let p = FingerParams {
            alpha_deg: 45.0,
            b: 60.0,
            d1: 2.0 * inner * std::f64::consts::SQRT_2,
        };
        let l = add_finger(&base, p).unwrap();
        for (a, b) in base.electrodes.iter().zip(&l.electrodes) {
            assert!(a.polygon.same_vertex_set(&b.polygon, SYMMETRY_TOL_UM), "electrode {}", a.id);
        }
    }

    #[test]
    fn negative_d1_rejected() {
        let p = FingerParams {
            d1: -5.0,
            ..FingerParams::default()
        };
        assert!(matches!(add_finger(&default_layout(), p), Err(LayoutError::Geometry(_))));
    }

    #[test]
    fn finger_requires_baseline() {
        let l = add_finger(&default_layout(), FingerParams::default()).unwrap();
        assert!(matches!(
            add_finger(&l, FingerParams::default()),
            Err(LayoutError::WrongVariant { .. })
        ));
    }

    #[test]
    fn wedges() {
        let f = add_finger(&default_layout(), FingerParams::default()).unwrap();
        let w = add_wedges(&f, WedgeParams::default()).unwrap();
        assert_eq!(w.rf_electrodes().count(), 40);
        assert!(validate(&w).is_empty());
        let groups = w.rf_groups();
        assert!(groups.contains("RF1f") && groups.contains("RF2f"));
        let big = WedgeParams {
            w2: 300.0,
            ..WedgeParams::default()
        };
        assert!(matches!(add_wedges(&f, big), Err(LayoutError::Collision { .. })));
    }

    #[test]
    fn perturbed_vertex_breaks_symmetry() {
        let mut l = default_layout();
        l.electrodes[10].polygon.vertices[0][0] += 1.0;
        let d = validate(&l);
        assert!(d
            .iter()
            .any(|d| matches!(d, Diagnostic::BrokenSymmetry { id: 10, .. })));
    }

    #[test]
    fn overlapping_squares_reported() {
        let mut l = default_layout();
        let n = l.electrodes.len() as u32;
        for (k, x0) in [(0, -500.0), (1, -495.0)] {
            l.electrodes.push(Electrode {
                id: n + k,
                group: format!("X{k}"),
                role: Role::Rf,
                polygon: Rect::new(x0, x0 + 10.0, 600.0, 610.0).to_polygon(),
            });
        }
        let d = validate(&l);
        assert!(d.contains(&Diagnostic::Overlap { a: n, b: n + 1 }), "{d:?}");
    }

    #[test]
    fn tie_modes() {
        let l = default_layout();
        let u = symmetry_ties(&l, TieMode::Uniform);
        assert_eq!(u.classes.len(), 1);
        let lin = symmetry_ties(&l, TieMode::Linear);
        let c = lin.class_of("RF1A").unwrap();
        assert!(lin.classes[c].contains(&"RF1C".to_string()));
        let b = lin.class_of("RF2B").unwrap();
        assert_eq!(lin.classes[b], vec!["RF2B".to_string(), "RF2b".to_string()]);
        let corner = symmetry_ties(&l, TieMode::Corner);
        let c = corner.class_of("RF1A").unwrap();
        assert_eq!(corner.classes[c], vec!["RF1A".to_string(), "RF1B".to_string()]);
        for t in [&u, &lin, &corner] {
            assert_eq!(t.labels(), l.rf_groups());
            let total: usize = t.classes.iter().map(Vec::len).sum();
            assert_eq!(total, l.rf_groups().len());
        }
    }

    #[test]
    fn json_round_trip_and_hash() {
        let l = default_layout();
        let back = Layout::from_json(&l.to_json()).unwrap();
        assert_eq!(back, l);
        assert_eq!(back.hash(), l.hash());
        let f = add_finger(&l, FingerParams::default()).unwrap();
        assert_ne!(f.hash(), l.hash());
    }
}
