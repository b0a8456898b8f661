//! Gapless-plane electrostatics of planar electrodes.
//!
//! An electrode held at unit voltage in an otherwise grounded plane produces
//! the potential `Ω(r) / 2π`, where `Ω` is the solid angle the electrode
//! subtends at `r`. Its gradient is a sum of closed-form line integrals over
//! the polygon edges, and the Hessian is obtained by differentiating those
//! edge terms analytically. Positions are in μm; derivatives are returned in
//! SI units (1/m and 1/m²).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::SystemTime;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Polygon, Rect};
use crate::layout::{validate, Diagnostic, Layout};

/// Observation point in μm; the electrode plane is z = 0.
pub type Point = Vector3<f64>;

const UM_TO_M: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("field evaluation requires z > 0, got z = {z} μm")]
    Domain { z: f64 },
    #[error("electrode polygon is not simple")]
    SelfIntersecting,
    #[error("voltage assignment has no amplitude for group {0:?}")]
    MissingGroup(String),
    #[error("negative or non-finite amplitude {value} for group {group:?}")]
    BadAmplitude { group: String, value: f64 },
    #[error("layout is invalid: {0:?}")]
    InvalidLayout(Vec<Diagnostic>),
}

fn check_domain(p: &Point) -> Result<(), FieldError> {
    if p.z > 0.0 && p.z.is_finite() {
        Ok(())
    } else {
        Err(FieldError::Domain { z: p.z })
    }
}

/// Potential fraction of an axis-aligned rectangle at unit voltage.
pub fn rect_unit_potential(rect: &Rect, p: &Point) -> Result<f64, FieldError> {
    check_domain(p)?;
    Ok(rect_phi(rect, p))
}

fn rect_phi(rect: &Rect, p: &Point) -> f64 {
    let z = p.z;
    let mut sum = 0.0;
    for (xi, sx) in [(rect.x1, -1.0), (rect.x2, 1.0)] {
        for (yj, sy) in [(rect.y1, -1.0), (rect.y2, 1.0)] {
            let dx = xi - p.x;
            let dy = yj - p.y;
            let r = (dx * dx + dy * dy + z * z).sqrt();
            sum += sx * sy * (dx * dy / (z * r)).atan();
        }
    }
    sum / (2.0 * PI)
}

/// Potential fraction of a simple polygon at unit voltage (any orientation).
pub fn polygon_unit_potential(poly: &Polygon, p: &Point) -> Result<f64, FieldError> {
    check_domain(p)?;
    if !poly.is_simple() {
        return Err(FieldError::SelfIntersecting);
    }
    let phi = polygon_phi(poly, p);
    Ok(if poly.signed_area() < 0.0 { -phi } else { phi })
}

/// Solid angle by fanning triangles from the foot of the perpendicular.
fn polygon_phi(poly: &Polygon, p: &Point) -> f64 {
    let a = Vector3::new(0.0, 0.0, -p.z);
    let la = p.z;
    let mut omega = 0.0;
    for (v0, v1) in poly.edges() {
        let b = Vector3::new(v0[0] - p.x, v0[1] - p.y, -p.z);
        let c = Vector3::new(v1[0] - p.x, v1[1] - p.y, -p.z);
        let (lb, lc) = (b.norm(), c.norm());
        let num = a.dot(&b.cross(&c));
        let den = la * lb * lc + a.dot(&b) * lc + a.dot(&c) * lb + b.dot(&c) * la;
        omega += 2.0 * num.atan2(den);
    }
    // The triple product is negative for a counter-clockwise fan seen from above.
    -omega / (2.0 * PI)
}

fn cross_matrix(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Gradient (1/μm) and Hessian (1/μm²) contributions of one directed edge.
#[inline]
fn edge_terms(v0: [f64; 2], v1: [f64; 2], p: &Point, with_hessian: bool) -> (Vector3<f64>, Matrix3<f64>) {
    let a = Vector3::new(v0[0] - p.x, v0[1] - p.y, -p.z);
    let b = Vector3::new(v1[0] - p.x, v1[1] - p.y, -p.z);
    let seg = b - a;
    let t = seg / seg.norm();
    let n = t.cross(&a);
    let d2 = n.norm_squared();
    let (la, lb) = (a.norm(), b.norm());
    let (at, bt) = (a.dot(&t), b.dot(&t));
    let f = bt / lb - at / la;
    let g = n * (f / d2);
    if !with_hessian {
        return (g, Matrix3::zeros());
    }
    let grad_f = (-t / lb + b * (bt / (lb * lb * lb))) - (-t / la + a * (at / (la * la * la)));
    let grad_d2 = 2.0 * t.cross(&n);
    let h = -cross_matrix(&t) * (f / d2) + n * grad_f.transpose() / d2
        - n * grad_d2.transpose() * (f / (d2 * d2));
    (g, h)
}

/// Gradient (1/m) and Hessian (1/m²) of a unit-voltage polygon.
fn polygon_derivatives(poly: &Polygon, p: &Point, with_hessian: bool) -> (Vector3<f64>, Matrix3<f64>) {
    let mut g = Vector3::zeros();
    let mut h = Matrix3::zeros();
    for (v0, v1) in poly.edges() {
        let (ge, he) = edge_terms(v0, v1, p, with_hessian);
        g += ge;
        h += he;
    }
    let scale = 1.0 / (2.0 * PI);
    let h = if with_hessian {
        // Individual edge terms are not symmetric; their closed sum is.
        0.5 * (h + h.transpose()) * (scale * UM_TO_M * UM_TO_M)
    } else {
        h
    };
    (g * (scale * UM_TO_M), h)
}

/// Geometry of one basis element.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Rect(Rect),
    /// Counter-clockwise simple polygon.
    Polygon(Polygon),
}

impl Shape {
    pub fn from_polygon(poly: &Polygon) -> Shape {
        match poly.as_rect() {
            Some(r) => Shape::Rect(r),
            None => Shape::Polygon(poly.to_ccw()),
        }
    }

    fn boundary(&self) -> std::borrow::Cow<'_, Polygon> {
        match self {
            Shape::Rect(r) => std::borrow::Cow::Owned(r.to_polygon()),
            Shape::Polygon(p) => std::borrow::Cow::Borrowed(p),
        }
    }

    pub fn phi(&self, p: &Point) -> f64 {
        match self {
            Shape::Rect(r) => rect_phi(r, p),
            Shape::Polygon(poly) => polygon_phi(poly, p),
        }
    }

    /// Gradient of the unit potential (1/m).
    pub fn gradient(&self, p: &Point) -> Vector3<f64> {
        self.derivatives(p, false).0
    }

    /// Gradient (1/m) and Hessian (1/m²).
    pub fn gradient_hessian(&self, p: &Point) -> (Vector3<f64>, Matrix3<f64>) {
        self.derivatives(p, true)
    }

    fn derivatives(&self, p: &Point, with_hessian: bool) -> (Vector3<f64>, Matrix3<f64>) {
        match self {
            Shape::Rect(r) => {
                let corners = [[r.x1, r.y1], [r.x2, r.y1], [r.x2, r.y2], [r.x1, r.y2]];
                let mut g = Vector3::zeros();
                let mut h = Matrix3::zeros();
                for i in 0..4 {
                    let (ge, he) = edge_terms(corners[i], corners[(i + 1) % 4], p, with_hessian);
                    g += ge;
                    h += he;
                }
                let scale = 1.0 / (2.0 * PI);
                let h = if with_hessian {
                    0.5 * (h + h.transpose()) * (scale * UM_TO_M * UM_TO_M)
                } else {
                    h
                };
                (g * (scale * UM_TO_M), h)
            }
            Shape::Polygon(poly) => polygon_derivatives(poly, p, with_hessian),
        }
    }
}

/// Unit-voltage response of one electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisElement {
    pub electrode_id: u32,
    pub group: String,
    pub shape: Shape,
}

/// Per-electrode closed-form evaluators for one layout, built once and shared read-only.
#[derive(Debug, Clone)]
pub struct BasisEvaluator {
    layout_hash: String,
    built_at: SystemTime,
    elements: Vec<BasisElement>,
}

/// Builds one evaluator per RF electrode of a valid layout.
pub fn build_basis(layout: &Layout) -> Result<BasisEvaluator, FieldError> {
    let diags = validate(layout);
    if !diags.is_empty() {
        return Err(FieldError::InvalidLayout(diags));
    }
    let elements = layout
        .rf_electrodes()
        .map(|e| BasisElement {
            electrode_id: e.id,
            group: e.group.clone(),
            shape: Shape::from_polygon(&e.polygon),
        })
        .collect();
    Ok(BasisEvaluator {
        layout_hash: layout.hash(),
        built_at: SystemTime::now(),
        elements,
    })
}

/// Angular drive frequency shared by all RF electrodes; the common phase is fixed at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveConfig {
    /// rad/s
    pub omega_rf: f64,
    pub phase: f64,
}

impl DriveConfig {
    pub fn from_mhz(f_mhz: f64) -> Self {
        Self {
            omega_rf: 2.0 * PI * f_mhz * 1e6,
            phase: 0.0,
        }
    }
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self::from_mhz(30.0)
    }
}

/// RF amplitude (volts) per group label under one drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageAssignment {
    pub amplitudes: BTreeMap<String, f64>,
    #[serde(default)]
    pub drive: DriveConfig,
}

impl VoltageAssignment {
    pub fn new(amplitudes: BTreeMap<String, f64>, drive: DriveConfig) -> Self {
        Self { amplitudes, drive }
    }

    /// Same amplitude on every listed group.
    pub fn uniform<'a>(groups: impl IntoIterator<Item = &'a String>, volts: f64, drive: DriveConfig) -> Self {
        Self {
            amplitudes: groups.into_iter().map(|g| (g.clone(), volts)).collect(),
            drive,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            amplitudes: self.amplitudes.iter().map(|(g, v)| (g.clone(), v * c)).collect(),
            drive: self.drive,
        }
    }

    /// Hex SHA-256 over the sorted (group, amplitude bits) pairs and drive.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (g, v) in &self.amplitudes {
            h.update(g.as_bytes());
            h.update([0u8]);
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(self.drive.omega_rf.to_bits().to_le_bytes());
        crate::layout::hex(&h.finalize())
    }
}

/// Superposed potential (V), field (V/m) and potential Hessian (V/m²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub phi: f64,
    pub e: Vector3<f64>,
    pub hessian: Matrix3<f64>,
}

/// Electric field and potential Hessian at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldDerivatives {
    pub e: Vector3<f64>,
    pub hessian: Matrix3<f64>,
}

/// Per-element amplitudes resolved from a [`VoltageAssignment`].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl BasisEvaluator {
    pub fn layout_hash(&self) -> &str {
        &self.layout_hash
    }

    pub fn built_at(&self) -> SystemTime {
        self.built_at
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[BasisElement] {
        &self.elements
    }

    /// Unit-voltage potential fraction of element `i`.
    pub fn phi(&self, i: usize, p: &Point) -> Result<f64, FieldError> {
        check_domain(p)?;
        Ok(self.elements[i].shape.phi(p))
    }

    /// Unit-voltage gradient (1/m) and Hessian (1/m²) of element `i`.
    pub fn derivatives(&self, i: usize, p: &Point) -> Result<(Vector3<f64>, Matrix3<f64>), FieldError> {
        check_domain(p)?;
        Ok(self.elements[i].shape.gradient_hessian(p))
    }

    /// Resolves group amplitudes into one weight per element.
    pub fn weights(&self, v: &VoltageAssignment) -> Result<Weights, FieldError> {
        self.elements
            .iter()
            .map(|e| match v.amplitudes.get(&e.group) {
                None => Err(FieldError::MissingGroup(e.group.clone())),
                Some(&a) if !(a.is_finite() && a >= 0.0) => Err(FieldError::BadAmplitude {
                    group: e.group.clone(),
                    value: a,
                }),
                Some(&a) => Ok(a),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Weights)
    }

    /// Field and Hessian only; skips zero-weight elements.
    pub fn field_derivatives(&self, w: &Weights, p: &Point) -> FieldDerivatives {
        let mut grad = Vector3::zeros();
        let mut hess = Matrix3::zeros();
        for (el, &a) in self.elements.iter().zip(&w.0) {
            if a == 0.0 {
                continue;
            }
            let (g, h) = el.shape.gradient_hessian(p);
            grad += g * a;
            hess += h * a;
        }
        FieldDerivatives { e: -grad, hessian: hess }
    }

    /// Electric field only (V/m).
    pub fn field(&self, w: &Weights, p: &Point) -> Vector3<f64> {
        let mut grad = Vector3::zeros();
        for (el, &a) in self.elements.iter().zip(&w.0) {
            if a != 0.0 {
                grad += el.shape.gradient(p) * a;
            }
        }
        -grad
    }

    pub fn sample_weighted(&self, w: &Weights, p: &Point) -> FieldSample {
        let mut phi = 0.0;
        for (el, &a) in self.elements.iter().zip(&w.0) {
            if a != 0.0 {
                phi += a * el.shape.phi(p);
            }
        }
        let d = self.field_derivatives(w, p);
        FieldSample {
            phi,
            e: d.e,
            hessian: d.hessian,
        }
    }
}

/// Linear superposition of the basis under an assignment.
pub fn superpose(basis: &BasisEvaluator, v: &VoltageAssignment, p: &Point) -> Result<FieldSample, FieldError> {
    check_domain(p)?;
    let w = basis.weights(v)?;
    Ok(basis.sample_weighted(&w, p))
}

/// Grid cache dump: per-group potential fraction and field fraction on a rectilinear grid.
///
/// Rows are `ix,iy,iz,group,phi,Ex_frac,Ey_frac,Ez_frac` where the field
/// fractions are `−∇φ` of the unit-voltage group in 1/m.
pub fn write_grid_cache<W: std::io::Write>(
    basis: &BasisEvaluator,
    xs: &[f64],
    ys: &[f64],
    zs: &[f64],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(
        out,
        "# layout={} nx={} ny={} nz={} x_um={:?} y_um={:?} z_um={:?}",
        basis.layout_hash,
        xs.len(),
        ys.len(),
        zs.len(),
        (xs.first(), xs.last()),
        (ys.first(), ys.last()),
        (zs.first(), zs.last())
    )?;
    writeln!(out, "ix,iy,iz,group,phi,Ex_frac,Ey_frac,Ez_frac")?;
    let mut groups: BTreeMap<&str, Vec<&BasisElement>> = BTreeMap::new();
    for e in &basis.elements {
        groups.entry(e.group.as_str()).or_default().push(e);
    }
    for (iz, z) in zs.iter().enumerate() {
        for (iy, y) in ys.iter().enumerate() {
            for (ix, x) in xs.iter().enumerate() {
                let p = Point::new(*x, *y, *z);
                for (g, els) in &groups {
                    let phi: f64 = els.iter().map(|e| e.shape.phi(&p)).sum();
                    let grad: Vector3<f64> = els.iter().map(|e| e.shape.gradient(&p)).sum();
                    writeln!(
                        out,
                        "{ix},{iy},{iz},{g},{phi:e},{:e},{:e},{:e}",
                        -grad.x, -grad.y, -grad.z
                    )?;
                }
            }
        }
    }
    Ok(())
}

impl Shape {
    /// Boundary polygon (rectangles expanded to four vertices).
    pub fn polygon(&self) -> Polygon {
        self.boundary().into_owned()
    }
}
