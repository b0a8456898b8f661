//! Planar polygon primitives used by the electrode layout.
//!
//! All coordinates are in micrometres in the electrode plane (z = 0).

use serde::{Deserialize, Serialize};

/// A vertex in the electrode plane, `[x, y]` in μm.
pub type Vertex = [f64; 2];

/// Relative tolerance used for orientation predicates.
const ORIENT_EPS: f64 = 1e-12;

/// A closed polygon given by its ordered vertex list (the closing edge is implicit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<Vertex>,
}

/// Axis-aligned rectangle `[x1, x2] × [y1, y2]` in μm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: f64,
    pub x2: f64,
    pub y1: f64,
    pub y2: f64,
}

impl Rect {
    pub fn new(x1: f64, x2: f64, y1: f64, y2: f64) -> Self {
        Self {
            x1: x1.min(x2),
            x2: x1.max(x2),
            y1: y1.min(y2),
            y2: y1.max(y2),
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Counter-clockwise polygon with the same footprint.
    pub fn to_polygon(&self) -> Polygon {
        Polygon::new(vec![
            [self.x1, self.y1],
            [self.x2, self.y1],
            [self.x2, self.y2],
            [self.x1, self.y2],
        ])
    }
}

fn cross(o: Vertex, a: Vertex, b: Vertex) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn orient(o: Vertex, a: Vertex, b: Vertex) -> i8 {
    let c = cross(o, a, b);
    let scale = (a[0] - o[0])
        .abs()
        .max((a[1] - o[1]).abs())
        .max((b[0] - o[0]).abs())
        .max((b[1] - o[1]).abs());
    if c.abs() <= ORIENT_EPS * scale * scale.max(1.0) {
        0
    } else if c > 0.0 {
        1
    } else {
        -1
    }
}

fn on_segment(p: Vertex, a: Vertex, b: Vertex) -> bool {
    p[0] >= a[0].min(b[0]) - 1e-12
        && p[0] <= a[0].max(b[0]) + 1e-12
        && p[1] >= a[1].min(b[1]) - 1e-12
        && p[1] <= a[1].max(b[1]) + 1e-12
}

/// True when the open segments cross at a single interior point.
pub fn segments_cross_properly(a: Vertex, b: Vertex, c: Vertex, d: Vertex) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    o1 * o2 < 0 && o3 * o4 < 0
}

/// True when the closed segments share at least one point.
pub fn segments_intersect(a: Vertex, b: Vertex, c: Vertex, d: Vertex) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if o1 * o2 < 0 && o3 * o4 < 0 {
        return true;
    }
    (o1 == 0 && on_segment(c, a, b))
        || (o2 == 0 && on_segment(d, a, b))
        || (o3 == 0 && on_segment(a, c, d))
        || (o4 == 0 && on_segment(b, c, d))
}

fn point_segment_distance(p: Vertex, a: Vertex, b: Vertex) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (qx * qx + qy * qy).sqrt()
}

/// Euclidean distance between two closed segments.
pub fn segment_distance(a: Vertex, b: Vertex, c: Vertex, d: Vertex) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

impl Polygon {
    pub fn new(vertices: Vec<Vertex>) -> Self {
        Self { vertices }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Iterator over the directed edges `(v_i, v_{i+1})`, including the closing edge.
    pub fn edges(&self) -> impl Iterator<Item = (Vertex, Vertex)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Shoelace area, positive for counter-clockwise order.
    pub fn signed_area(&self) -> f64 {
        0.5 * self
            .edges()
            .map(|(a, b)| a[0] * b[1] - b[0] * a[1])
            .sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn centroid(&self) -> Vertex {
        let a = self.signed_area();
        if a == 0.0 {
            let n = self.vertices.len().max(1) as f64;
            let sx: f64 = self.vertices.iter().map(|v| v[0]).sum();
            let sy: f64 = self.vertices.iter().map(|v| v[1]).sum();
            return [sx / n, sy / n];
        }
        let (mut cx, mut cy) = (0.0, 0.0);
        for (p, q) in self.edges() {
            let w = p[0] * q[1] - q[0] * p[1];
            cx += (p[0] + q[0]) * w;
            cy += (p[1] + q[1]) * w;
        }
        [cx / (6.0 * a), cy / (6.0 * a)]
    }

    pub fn bbox(&self) -> Rect {
        let mut r = Rect {
            x1: f64::INFINITY,
            x2: f64::NEG_INFINITY,
            y1: f64::INFINITY,
            y2: f64::NEG_INFINITY,
        };
        for v in &self.vertices {
            r.x1 = r.x1.min(v[0]);
            r.x2 = r.x2.max(v[0]);
            r.y1 = r.y1.min(v[1]);
            r.y2 = r.y2.max(v[1]);
        }
        r
    }

    /// Returns the rectangle this polygon represents if it is an axis-aligned rectangle.
    pub fn as_rect(&self) -> Option<Rect> {
        if self.vertices.len() != 4 {
            return None;
        }
        let bb = self.bbox();
        let is_corner = |v: &Vertex| {
            (v[0] == bb.x1 || v[0] == bb.x2) && (v[1] == bb.y1 || v[1] == bb.y2)
        };
        let all_corners = self.vertices.iter().all(is_corner);
        let axis_edges = self
            .edges()
            .all(|(a, b)| (a[0] == b[0]) != (a[1] == b[1]));
        (all_corners && axis_edges && bb.width() > 0.0 && bb.height() > 0.0).then_some(bb)
    }

    /// No two non-adjacent edges touch and adjacent edges meet only at their shared vertex.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = edges[i];
                let (c, d) = edges[j];
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    // Shared vertex only: reject folds back along the same line.
                    let shared = if j == i + 1 { b } else { a };
                    let other_i = if j == i + 1 { a } else { b };
                    let other_j = if j == i + 1 { d } else { c };
                    if orient(shared, other_i, other_j) == 0 {
                        let u = [other_i[0] - shared[0], other_i[1] - shared[1]];
                        let w = [other_j[0] - shared[0], other_j[1] - shared[1]];
                        if u[0] * w[0] + u[1] * w[1] > 0.0 {
                            return false;
                        }
                    }
                } else if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    /// Winding-number test; points on the boundary count as outside.
    pub fn contains_strict(&self, p: Vertex) -> bool {
        for (a, b) in self.edges() {
            if point_segment_distance(p, a, b) <= 1e-12 {
                return false;
            }
        }
        let mut winding = 0i32;
        for (a, b) in self.edges() {
            if a[1] <= p[1] {
                if b[1] > p[1] && cross(a, b, p) > 0.0 {
                    winding += 1;
                }
            } else if b[1] <= p[1] && cross(a, b, p) < 0.0 {
                winding -= 1;
            }
        }
        winding != 0
    }

    /// Minimum distance between the two boundaries (0 if they touch or cross).
    pub fn boundary_distance(&self, other: &Polygon) -> f64 {
        let mut best = f64::INFINITY;
        for (a, b) in self.edges() {
            for (c, d) in other.edges() {
                best = best.min(segment_distance(a, b, c, d));
                if best == 0.0 {
                    return 0.0;
                }
            }
        }
        best
    }

    /// True when the open interiors of the two polygons intersect.
    pub fn interiors_overlap(&self, other: &Polygon) -> bool {
        for (a, b) in self.edges() {
            for (c, d) in other.edges() {
                if segments_cross_properly(a, b, c, d) {
                    return true;
                }
            }
        }
        let probe = |p: &Polygon, q: &Polygon| {
            p.vertices.iter().any(|v| q.contains_strict(*v))
                || p.edges().any(|(a, b)| {
                    q.contains_strict([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])])
                })
                || q.contains_strict(p.interior_point())
        };
        probe(self, other) || probe(other, self)
    }

    /// A point strictly inside the polygon (centroid when it lies inside, otherwise an ear midpoint).
    pub fn interior_point(&self) -> Vertex {
        let c = self.centroid();
        if self.contains_strict(c) {
            return c;
        }
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[(i + n - 1) % n];
            let b = self.vertices[i];
            let d = self.vertices[(i + 1) % n];
            let m = [(a[0] + b[0] + d[0]) / 3.0, (a[1] + b[1] + d[1]) / 3.0];
            if self.contains_strict(m) {
                return m;
            }
        }
        c
    }

    /// Copy with vertices in counter-clockwise order.
    pub fn to_ccw(&self) -> Polygon {
        let mut p = self.clone();
        if p.signed_area() < 0.0 {
            p.vertices.reverse();
        }
        p
    }

    /// Drops repeated and collinear vertices (within `tol` μm of the line through neighbours).
    pub fn simplified(&self, tol: f64) -> Polygon {
        let mut v = self.vertices.clone();
        let mut changed = true;
        while changed && v.len() > 3 {
            changed = false;
            let n = v.len();
            for i in 0..n {
                let a = v[(i + n - 1) % n];
                let b = v[i];
                let c = v[(i + 1) % n];
                let dup = (a[0] - b[0]).abs() <= tol && (a[1] - b[1]).abs() <= tol;
                if dup || point_segment_distance(b, a, c) <= tol {
                    v.remove(i);
                    changed = true;
                    break;
                }
            }
        }
        Polygon::new(v)
    }

    pub fn map(&self, f: impl Fn(Vertex) -> Vertex) -> Polygon {
        Polygon::new(self.vertices.iter().map(|v| f(*v)).collect())
    }

    /// Image under an orientation-reversing map, re-ordered counter-clockwise.
    pub fn reflected(&self, f: impl Fn(Vertex) -> Vertex) -> Polygon {
        self.map(f).to_ccw()
    }

    /// True when both polygons have the same vertex set within `tol` (any starting vertex or order).
    pub fn same_vertex_set(&self, other: &Polygon, tol: f64) -> bool {
        if self.vertices.len() != other.vertices.len() {
            return false;
        }
        let mut used = vec![false; other.vertices.len()];
        'outer: for v in &self.vertices {
            for (j, w) in other.vertices.iter().enumerate() {
                if !used[j] && (v[0] - w[0]).abs() <= tol && (v[1] - w[1]).abs() <= tol {
                    used[j] = true;
                    continue 'outer;
                }
            }
            return false;
        }
        true
    }
}

pub fn reflect_x(v: Vertex) -> Vertex {
    [-v[0], v[1]]
}

pub fn reflect_y(v: Vertex) -> Vertex {
    [v[0], -v[1]]
}

pub fn swap_xy(v: Vertex) -> Vertex {
    [v[1], v[0]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64, s: f64) -> Polygon {
        Rect::new(x, x + s, y, y + s).to_polygon()
    }

    #[test]
    fn area_and_orientation() {
        let p = square(0.0, 0.0, 2.0);
        assert_eq!(p.signed_area(), 4.0);
        let mut r = p.clone();
        r.vertices.reverse();
        assert_eq!(r.signed_area(), -4.0);
        assert_eq!(r.to_ccw().signed_area(), 4.0);
        assert_eq!(p.centroid(), [1.0, 1.0]);
    }

    #[test]
    fn bowtie_is_not_simple() {
        let p = Polygon::new(vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!(!p.is_simple());
        assert!(square(0.0, 0.0, 1.0).is_simple());
    }

    #[test]
    fn overlap_and_clearance() {
        let a = square(0.0, 0.0, 10.0);
        let b = square(5.0, 5.0, 10.0);
        let c = square(14.0, 0.0, 10.0);
        let touching = square(10.0, 0.0, 10.0);
        assert!(a.interiors_overlap(&b));
        assert!(!a.interiors_overlap(&c));
        assert!((a.boundary_distance(&c) - 4.0).abs() < 1e-12);
        assert!(!a.interiors_overlap(&touching));
        assert_eq!(a.boundary_distance(&touching), 0.0);
        // Nested squares share no edge crossings.
        let inner = square(2.0, 2.0, 1.0);
        assert!(a.interiors_overlap(&inner));
        assert!(a.interiors_overlap(&a.clone()));
    }

    #[test]
    fn rect_detection_and_simplify() {
        let p = Polygon::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [2.0, 1.0], [0.0, 1.0]]);
        assert!(p.as_rect().is_none());
        let s = p.simplified(1e-9);
        assert_eq!(s.len(), 4);
        assert_eq!(s.as_rect(), Some(Rect::new(0.0, 2.0, 0.0, 1.0)));
        let tri = Polygon::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!(tri.as_rect().is_none());
    }

    #[test]
    fn reflections_keep_ccw() {
        let p = square(1.0, 2.0, 3.0);
        let q = p.reflected(reflect_x);
        assert!(q.signed_area() > 0.0);
        assert!(q.same_vertex_set(&square(-4.0, 2.0, 3.0), 1e-12));
    }
}
