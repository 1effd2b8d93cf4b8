use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// An edge shared by two paintable faces. Face ids index `Mesh::sampled_faces`.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedEdge {
    pub faces: (usize, usize),
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
    /// Mesh face ids of the paintable subset, ascending.
    pub sampled_faces: Vec<usize>,
    /// Interior edges of the paintable subset.
    pub edges: Vec<SharedEdge>,
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl Mesh {
    /// Builds a mesh with every face paintable.
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if faces.is_empty() || vertices.is_empty() {
            return Err(Error::Mesh("empty mesh".into()));
        }
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::Mesh(format!("face {i} references a missing vertex")));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Mesh(format!("face {i} is degenerate")));
            }
        }
        let mut users: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &faces {
            for k in 0..3 {
                *users.entry(edge_key(f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        if let Some(((a, b), n)) = users.iter().find(|(_, &n)| n > 2) {
            return Err(Error::Mesh(format!(
                "non-manifold edge ({a}, {b}) shared by {n} faces"
            )));
        }
        let all: Vec<usize> = (0..faces.len()).collect();
        let mut mesh = Self {
            vertices,
            faces,
            sampled_faces: Vec::new(),
            edges: Vec::new(),
        };
        mesh.set_sampled_faces(all)?;
        Ok(mesh)
    }

    /// Restricts painting to `sampled` (mesh face ids) and rebuilds the
    /// interior edge list.
    pub fn set_sampled_faces(&mut self, mut sampled: Vec<usize>) -> Result<()> {
        sampled.sort_unstable();
        sampled.dedup();
        if sampled.iter().any(|&f| f >= self.faces.len()) {
            return Err(Error::Mesh("sampled face out of range".into()));
        }
        let mut owners: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (slot, &f) in sampled.iter().enumerate() {
            let tri = self.faces[f];
            for k in 0..3 {
                owners
                    .entry(edge_key(tri[k], tri[(k + 1) % 3]))
                    .or_default()
                    .push(slot);
            }
        }
        self.edges = owners
            .into_iter()
            .filter(|(_, o)| o.len() == 2)
            .map(|((a, b), o)| SharedEdge {
                faces: (o[0], o[1]),
                length: dist(self.vertices[a], self.vertices[b]),
            })
            .collect();
        self.sampled_faces = sampled;
        Ok(())
    }

    /// Keeps the highest `fraction` of faces (by centroid height, ties by
    /// face id) as the paintable region.
    pub fn sample_upper_fraction(&mut self, fraction: f64) -> Result<()> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Invalid(format!(
                "sampled_face_fraction must be in (0, 1], got {fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.faces.len()).collect();
        let height = |f: usize| {
            self.faces[f]
                .iter()
                .map(|&v| self.vertices[v][2])
                .sum::<f64>()
        };
        order.sort_by(|&a, &b| height(b).total_cmp(&height(a)).then(a.cmp(&b)));
        let n = ((self.faces.len() as f64 * fraction).round() as usize).max(1);
        order.truncate(n);
        self.set_sampled_faces(order)
    }

    pub fn num_sampled(&self) -> usize {
        self.sampled_faces.len()
    }

    /// Slot of a mesh face in the sampled list.
    pub fn sampled_slots(&self) -> Vec<Option<usize>> {
        let mut slots = vec![None; self.faces.len()];
        for (slot, &f) in self.sampled_faces.iter().enumerate() {
            slots[f] = Some(slot);
        }
        slots
    }

    /// Centre and radius of the sphere around the bounding box.
    pub fn bounding_sphere(&self) -> ([f64; 3], f64) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        let c = [
            (lo[0] + hi[0]) / 2.0,
            (lo[1] + hi[1]) / 2.0,
            (lo[2] + hi[2]) / 2.0,
        ];
        let r = self
            .vertices
            .iter()
            .map(|&v| dist(v, c))
            .fold(0.0, f64::max);
        (c, r)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        s
    }
}

pub(crate) fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Parses the `v`/`f` subset of Wavefront OBJ. Face vertices may carry
/// `/vt/vn` suffixes and negative (relative) indices; other records are
/// ignored.
pub fn parse_obj(text: &str, path: &Path) -> Result<Mesh> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(|p| p.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(line_no, format!("bad vertex: {e}")))?;
                if coords.len() != 3 {
                    return Err(parse_err(line_no, "vertex needs three coordinates".into()));
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let refs: Vec<&str> = parts.collect();
                if refs.len() != 3 {
                    return Err(parse_err(
                        line_no,
                        format!("non-triangular face with {} vertices", refs.len()),
                    ));
                }
                let mut tri = [0usize; 3];
                for (k, r) in refs.iter().enumerate() {
                    let head = r.split('/').next().unwrap_or("");
                    let idx: i64 = head
                        .parse()
                        .map_err(|e| parse_err(line_no, format!("bad face index {head:?}: {e}")))?;
                    let resolved = if idx > 0 {
                        idx - 1
                    } else if idx < 0 {
                        vertices.len() as i64 + idx
                    } else {
                        -1
                    };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(parse_err(line_no, format!("face index {idx} out of range")));
                    }
                    tri[k] = resolved as usize;
                }
                faces.push(tri);
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces).map_err(|e| match e {
        Error::Mesh(msg) => Error::Mesh(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

/// Axis-aligned box `[lo, hi]` with each side split into cells no larger
/// than `cell`; two triangles per cell, outward winding.
fn push_box(
    verts: &mut Vec<[f64; 3]>,
    faces: &mut Vec<[usize; 3]>,
    lo: [f64; 3],
    hi: [f64; 3],
    cell: f64,
) {
    let mut lookup: HashMap<[i64; 3], usize> = HashMap::new();
    let mut vid = |p: [f64; 3], verts: &mut Vec<[f64; 3]>| -> usize {
        let key = [
            (p[0] * 1e6).round() as i64,
            (p[1] * 1e6).round() as i64,
            (p[2] * 1e6).round() as i64,
        ];
        *lookup.entry(key).or_insert_with(|| {
            verts.push(p);
            verts.len() - 1
        })
    };
    // (normal axis, side, u axis, v axis) with u × v along the outward normal.
    let sides = [
        (0, 1, 1, 2),
        (0, 0, 2, 1),
        (1, 1, 2, 0),
        (1, 0, 0, 2),
        (2, 1, 0, 1),
        (2, 0, 1, 0),
    ];
    for (axis, side, u_ax, v_ax) in sides {
        let fixed = if side == 1 { hi[axis] } else { lo[axis] };
        let nu = ((hi[u_ax] - lo[u_ax]) / cell).ceil().max(1.0) as usize;
        let nv = ((hi[v_ax] - lo[v_ax]) / cell).ceil().max(1.0) as usize;
        let point = |i: usize, j: usize| {
            let mut p = [0.0; 3];
            p[axis] = fixed;
            p[u_ax] = lo[u_ax] + (hi[u_ax] - lo[u_ax]) * i as f64 / nu as f64;
            p[v_ax] = lo[v_ax] + (hi[v_ax] - lo[v_ax]) * j as f64 / nv as f64;
            p
        };
        for i in 0..nu {
            for j in 0..nv {
                let a = vid(point(i, j), verts);
                let b = vid(point(i + 1, j), verts);
                let c = vid(point(i + 1, j + 1), verts);
                let d = vid(point(i, j + 1), verts);
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
    }
}

/// A boxy car-like body: chassis, cabin and four wheel blocks, about two
/// scene units long, resting on the ground plane `z = 0`.
pub fn procedural_vehicle() -> Mesh {
    procedural_vehicle_with_cell(0.125)
}

/// [`procedural_vehicle`] with body panels tessellated at roughly `cell`
/// scene units.
pub fn procedural_vehicle_with_cell(cell: f64) -> Mesh {
    let mut v = Vec::new();
    let mut f = Vec::new();
    push_box(&mut v, &mut f, [-1.0, -0.45, 0.15], [1.0, 0.45, 0.52], cell);
    push_box(
        &mut v,
        &mut f,
        [-0.5, -0.38, 0.52],
        [0.45, 0.38, 0.85],
        cell,
    );
    for (x, y) in [(-0.62, -0.5), (-0.62, 0.36), (0.6, -0.5), (0.6, 0.36)] {
        push_box(
            &mut v,
            &mut f,
            [x - 0.17, y, 0.0],
            [x + 0.17, y + 0.14, 0.3],
            0.2,
        );
    }
    Mesh::new(v, f).expect("procedural mesh is valid")
}
