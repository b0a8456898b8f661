//! Ψ volumes and level-set extraction.
//!
//! Surfaces come from marching tetrahedra over the six-tetrahedron (Kuhn)
//! split of every grid cell. Every cell uses the same split, so neighbouring
//! cells share their face diagonals and the mesh is closed wherever the level
//! set does not touch the volume boundary. Vertices are shared through the
//! grid edge they lie on.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::field::{BasisEvaluator, Point, VoltageAssignment};
use crate::pseudo::{GridAxis, IonSpecies, MapError, PseudoField};

/// Scalar samples on a rectilinear 3D grid, x fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub x: GridAxis,
    pub y: GridAxis,
    pub z: GridAxis,
    pub values: Vec<f64>,
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

impl Volume {
    /// Fills the grid from `f(x, y, z)`; z slabs run in parallel.
    pub fn from_fn<F>(x: GridAxis, y: GridAxis, z: GridAxis, f: F) -> Result<Self, MapError>
    where
        F: Fn(f64, f64, f64) -> f64 + Sync,
    {
        check_axis(&x)?;
        check_axis(&y)?;
        check_axis(&z)?;
        let values = (0..z.n)
            .into_par_iter()
            .flat_map_iter(|iz| {
                let f = &f;
                let zv = z.value(iz);
                (0..y.n).flat_map(move |iy| (0..x.n).map(move |ix| f(x.value(ix), y.value(iy), zv)))
            })
            .collect();
        Ok(Self { x, y, z, values })
    }

    fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.y.n + iy) * self.x.n + ix
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.index(ix, iy, iz)]
    }

    fn position(&self, idx: usize) -> [f64; 3] {
        let ix = idx % self.x.n;
        let iy = (idx / self.x.n) % self.y.n;
        let iz = idx / (self.x.n * self.y.n);
        [self.x.value(ix), self.y.value(iy), self.z.value(iz)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Samples Ψ (meV) on a 3D grid above the electrode plane.
pub fn sample_volume(
    basis: &BasisEvaluator,
    v: &VoltageAssignment,
    ion: &IonSpecies,
    x: GridAxis,
    y: GridAxis,
    z: GridAxis,
) -> Result<Volume, MapError> {
    if z.min <= 0.0 {
        return Err(MapError::BelowPlane);
    }
    let field = PseudoField::new(basis, v, ion)?;
    Volume::from_fn(x, y, z, |a, b, c| field.psi(&Point::new(a, b, c)))
}

/// Indexed triangle mesh; triangle normals point toward larger values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

// Cube corners: bit 0 → +x, bit 1 → +y, bit 2 → +z.
const CORNER: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

// Six tetrahedra sharing the 0–6 main diagonal.
const TETS: [[usize; 4]; 6] = [
    [0, 5, 1, 6],
    [0, 1, 2, 6],
    [0, 2, 3, 6],
    [0, 3, 7, 6],
    [0, 7, 4, 6],
    [0, 4, 5, 6],
];

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    dot(sub(a, b), sub(a, b)).sqrt()
}

struct Builder<'v> {
    vol: &'v Volume,
    level: f64,
    mesh: Mesh,
    edge_vertex: HashMap<(usize, usize), u32>,
}

impl Builder<'_> {
    fn vertex(&mut self, a: usize, b: usize) -> u32 {
        let key = if a < b { (a, b) } else { (b, a) };
        if let Some(&i) = self.edge_vertex.get(&key) {
            return i;
        }
        let (va, vb) = (self.vol.values[key.0], self.vol.values[key.1]);
        let t = ((self.level - va) / (vb - va)).clamp(0.0, 1.0);
        let (pa, pb) = (self.vol.position(key.0), self.vol.position(key.1));
        let p = [0, 1, 2].map(|k| pa[k] + t * (pb[k] - pa[k]));
        let i = self.mesh.vertices.len() as u32;
        self.mesh.vertices.push(p);
        self.edge_vertex.insert(key, i);
        i
    }

    fn triangle(&mut self, mut tri: [u32; 3], uphill: [f64; 3]) {
        let [a, b, c] = tri.map(|i| self.mesh.vertices[i as usize]);
        let n = cross(sub(b, a), sub(c, a));
        if dot(n, uphill) < 0.0 {
            tri.swap(1, 2);
        }
        self.mesh.triangles.push(tri);
    }

    fn tet(&mut self, ids: [usize; 4]) {
        let below: Vec<usize> = ids.iter().copied().filter(|&i| self.vol.values[i] < self.level).collect();
        let above: Vec<usize> = ids.iter().copied().filter(|&i| self.vol.values[i] >= self.level).collect();
        let centre = |vs: &[usize], vol: &Volume| {
            let mut c = [0.0; 3];
            for &i in vs {
                let p = vol.position(i);
                for k in 0..3 {
                    c[k] += p[k] / vs.len() as f64;
                }
            }
            c
        };
        let uphill = sub(centre(&above, self.vol), centre(&below, self.vol));
        match below.len() {
            1 | 3 => {
                let (lone, rest) = if below.len() == 1 { (below[0], &above) } else { (above[0], &below) };
                let tri = [0, 1, 2].map(|k| self.vertex(lone, rest[k]));
                self.triangle(tri, uphill);
            }
            2 => {
                let (b0, b1, a0, a1) = (below[0], below[1], above[0], above[1]);
                let q = [self.vertex(b0, a0), self.vertex(b0, a1), self.vertex(b1, a1), self.vertex(b1, a0)];
                self.triangle([q[0], q[1], q[2]], uphill);
                self.triangle([q[0], q[2], q[3]], uphill);
            }
            _ => {}
        }
    }
}

/// Level set `value == level` of a sampled volume. A level outside the
/// sampled range gives an empty mesh.
pub fn extract_isosurface(vol: &Volume, level: f64) -> Mesh {
    let mut b = Builder {
        vol,
        level,
        mesh: Mesh::default(),
        edge_vertex: HashMap::new(),
    };
    let (lo, hi) = vol.min_max();
    if !(level > lo && level <= hi) {
        return b.mesh;
    }
    for iz in 0..vol.z.n - 1 {
        for iy in 0..vol.y.n - 1 {
            for ix in 0..vol.x.n - 1 {
                let ids = CORNER.map(|[dx, dy, dz]| vol.index(ix + dx, iy + dy, iz + dz));
                let (mut any_below, mut any_above) = (false, false);
                for &i in &ids {
                    if vol.values[i] < level {
                        any_below = true;
                    } else {
                        any_above = true;
                    }
                }
                if any_below && any_above {
                    for t in TETS {
                        b.tet(t.map(|k| ids[k]));
                    }
                }
            }
        }
    }
    b.mesh
}

/// Samples Ψ and extracts the `level` (meV) isosurface.
#[allow(clippy::too_many_arguments)]
pub fn isosurface(
    basis: &BasisEvaluator,
    v: &VoltageAssignment,
    ion: &IonSpecies,
    x: GridAxis,
    y: GridAxis,
    z: GridAxis,
    level: f64,
) -> Result<Mesh, MapError> {
    let vol = sample_volume(basis, v, ion, x, y, z)?;
    Ok(extract_isosurface(&vol, level))
}

/// Union-find with path halving.
fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Edges used by exactly one triangle. Zero for a closed surface.
    pub fn boundary_edge_count(&self) -> usize {
        let mut count: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        count.values().filter(|&&c| c == 1).count()
    }

    /// Connected pieces, largest first.
    pub fn components(&self) -> Vec<Mesh> {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        for t in &self.triangles {
            let r0 = find(&mut parent, t[0] as usize);
            for &v in &t[1..] {
                let r = find(&mut parent, v as usize);
                parent[r] = r0;
            }
        }
        let mut groups: HashMap<usize, Vec<[u32; 3]>> = HashMap::new();
        for t in &self.triangles {
            let r = find(&mut parent, t[0] as usize);
            groups.entry(r).or_default().push(*t);
        }
        let mut out: Vec<Mesh> = groups
            .into_values()
            .map(|tris| {
                let mut remap = HashMap::new();
                let mut m = Mesh::default();
                for t in tris {
                    let nt = t.map(|v| {
                        *remap.entry(v).or_insert_with(|| {
                            m.vertices.push(self.vertices[v as usize]);
                            (m.vertices.len() - 1) as u32
                        })
                    });
                    m.triangles.push(nt);
                }
                m
            })
            .collect();
        out.sort_by(|a, b| {
            b.triangles
                .len()
                .cmp(&a.triangles.len())
                .then_with(|| a.vertices[0].partial_cmp(&b.vertices[0]).unwrap_or(std::cmp::Ordering::Equal))
        });
        out
    }

    /// The component with a vertex closest to `p`.
    pub fn component_near(&self, p: [f64; 3]) -> Option<Mesh> {
        self.components().into_iter().min_by(|a, b| {
            let da = a.vertices.iter().map(|&v| dist(v, p)).fold(f64::INFINITY, f64::min);
            let db = b.vertices.iter().map(|&v| dist(v, p)).fold(f64::INFINITY, f64::min);
            da.total_cmp(&db)
        })
    }

    /// Segments where the mesh crosses the plane `normal · r = offset`.
    pub fn slice(&self, normal: [f64; 3], offset: f64) -> Vec<[[f64; 3]; 2]> {
        let mut segs = Vec::new();
        for t in &self.triangles {
            let p = t.map(|i| self.vertices[i as usize]);
            let d = p.map(|q| dot(normal, q) - offset);
            let mut hits = Vec::with_capacity(2);
            for k in 0..3 {
                let (a, b) = (k, (k + 1) % 3);
                if (d[a] < 0.0) != (d[b] < 0.0) {
                    let s = d[a] / (d[a] - d[b]);
                    hits.push([0, 1, 2].map(|c| p[a][c] + s * (p[b][c] - p[a][c])));
                }
            }
            if hits.len() == 2 {
                segs.push([hits[0], hits[1]]);
            }
        }
        segs
    }

    /// Longest distance between two points of the plane section; `None`
    /// when the plane misses the mesh.
    pub fn max_chord(&self, normal: [f64; 3], offset: f64) -> Option<f64> {
        let pts: Vec<[f64; 3]> = self.slice(normal, offset).into_iter().flatten().collect();
        if pts.is_empty() {
            return None;
        }
        let mut best = 0.0_f64;
        for (i, &a) in pts.iter().enumerate() {
            for &b in &pts[i + 1..] {
                best = best.max(dist(a, b));
            }
        }
        Some(best)
    }

    fn normal(&self, t: &[u32; 3]) -> [f64; 3] {
        let [a, b, c] = t.map(|i| self.vertices[i as usize]);
        let n = cross(sub(b, a), sub(c, a));
        let len = dot(n, n).sqrt();
        if len > 0.0 {
            n.map(|v| v / len)
        } else {
            [0.0; 3]
        }
    }

    pub fn write_stl<W: Write>(&self, mut out: W, name: &str) -> std::io::Result<()> {
        writeln!(out, "solid {name}")?;
        for t in &self.triangles {
            let n = self.normal(t);
            writeln!(out, "facet normal {} {} {}", n[0], n[1], n[2])?;
            writeln!(out, "  outer loop")?;
            for &i in t {
                let v = self.vertices[i as usize];
                writeln!(out, "    vertex {} {} {}", v[0], v[1], v[2])?;
            }
            writeln!(out, "  endloop")?;
            writeln!(out, "endfacet")?;
        }
        writeln!(out, "endsolid {name}")
    }

    pub fn write_obj<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}
