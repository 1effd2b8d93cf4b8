use std::sync::Arc;

use diffcore::{SparseLinear, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::mesh::{dist, Mesh};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::image_io::Image;

/// Colour of mesh faces outside the paintable region.
pub const NEUTRAL_GRAY: f64 = 0.5;
const SHADE_MIN: f64 = 0.3;
const SHADE_MAX: f64 = 1.0;
const LIGHT_DIR: [f64; 3] = [0.35, 0.25, 0.9];

/// Per-paintable-face RGB colours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub colors: Vec<[f64; 3]>,
}

impl Texture {
    pub fn uniform(faces: usize, rgb: [f64; 3]) -> Self {
        Self {
            colors: vec![rgb; faces],
        }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    /// `[F, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.colors.len(), 3],
            self.colors.iter().flatten().copied().collect(),
        )
        .expect("texture buffer matches its length")
    }

    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if !data.len().is_multiple_of(3) {
            return Err(Error::Invalid(format!(
                "texture buffer of length {} is not RGB",
                data.len()
            )));
        }
        Ok(Self {
            colors: data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn clamp(&mut self) {
        for c in self.colors.iter_mut().flatten() {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub distance: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub fov_deg: f64,
    pub image_size: usize,
    /// Look-at point on the ground plane.
    #[serde(default)]
    pub target: [f64; 3],
}

impl CameraPose {
    pub fn new(distance: f64, pitch_deg: f64, yaw_deg: f64) -> Self {
        Self {
            distance,
            pitch_deg,
            yaw_deg,
            fov_deg: 45.0,
            image_size: 128,
            target: [0.0; 3],
        }
    }

    pub fn eye(&self) -> [f64; 3] {
        let (p, y) = (self.pitch_deg.to_radians(), self.yaw_deg.to_radians());
        [
            self.target[0] + self.distance * p.cos() * y.cos(),
            self.target[1] + self.distance * p.cos() * y.sin(),
            self.target[2] + self.distance * p.sin(),
        ]
    }

    /// Camera basis `(right, up, forward)`. `right` stays horizontal, so a
    /// straight-down view keeps the yaw rotation.
    fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let eye = self.eye();
        let fwd = normalize(sub(self.target, eye));
        let y = self.yaw_deg.to_radians();
        let right = [-y.sin(), y.cos(), 0.0];
        let up = cross(right, fwd);
        (right, up, fwd)
    }
}

/// Distance-major, then pitch, then yaw.
pub fn pose_grid(distances: &[f64], pitches: &[f64], yaws: &[f64]) -> Result<Vec<CameraPose>> {
    if distances.is_empty() || pitches.is_empty() || yaws.is_empty() {
        return Err(Error::Invalid("pose grid axes must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(distances.len() * pitches.len() * yaws.len());
    for &d in distances {
        for &p in pitches {
            for &y in yaws {
                out.push(CameraPose::new(d, p, y));
            }
        }
    }
    Ok(out)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Flat two-sided Lambertian coefficient of a face.
fn face_shading(mesh: &Mesh, face: usize) -> f64 {
    let [a, b, c] = mesh.faces[face].map(|v| mesh.vertices[v]);
    let n = cross(sub(b, a), sub(c, a));
    let len = dot(n, n).sqrt();
    if len == 0.0 {
        return SHADE_MIN;
    }
    let cos = dot(n, normalize(LIGHT_DIR)).abs() / len;
    (0.25 + 0.75 * cos).clamp(SHADE_MIN, SHADE_MAX)
}

/// Texture-independent rasterization result for one (mesh, pose).
#[derive(Debug, Clone)]
pub struct Fragments {
    pub size: usize,
    /// Paintable-face slot per pixel, −1 elsewhere.
    pub face_index: Vec<i64>,
    /// Any mesh face covers the pixel.
    pub mask: Vec<bool>,
    /// Shading coefficient per covered pixel (1 on background).
    pub shading: Vec<f64>,
    num_sampled: usize,
    /// Texture `[F·3]` → planar image `[3·H·W]`.
    pixel_map: Arc<SparseLinear>,
}

impl Fragments {
    pub fn num_sampled(&self) -> usize {
        self.num_sampled
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect()
    }

    /// Tight pixel box around the mask, `None` when the object is off-frame.
    pub fn mask_bbox(&self) -> Option<BBox> {
        let n = self.size;
        let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0, 0);
        for y in 0..n {
            for x in 0..n {
                if self.mask[y * n + x] {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x1 > x0).then(|| BBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }
}

/// Z-buffered perspective rasterization of `mesh` from `pose`, sampling at
/// pixel centres.
pub fn rasterize_fragments(mesh: &Mesh, pose: &CameraPose) -> Result<Fragments> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
    if !(pose.distance > 0.0) {
        return Err(Error::Invalid(format!(
            "camera distance {} must be positive",
            pose.distance
        )));
    }
    let (centre, radius) = mesh.bounding_sphere();
    let eye = pose.eye();
    let gap = dist(eye, centre);
    if gap <= radius {
        return Err(Error::CameraInsideMesh {
            distance: gap,
            radius,
        });
    }
    let n = pose.image_size;
    let (right, up, fwd) = pose.basis();
    let focal = n as f64 / 2.0 / (pose.fov_deg.to_radians() / 2.0).tan();
    let half = n as f64 / 2.0;
    let near = 1e-3;
    let projected: Vec<Option<(f64, f64, f64)>> = mesh
        .vertices
        .iter()
        .map(|&v| {
            let d = sub(v, eye);
            let z = dot(d, fwd);
            (z > near).then(|| {
                (
                    half + focal * dot(d, right) / z,
                    half - focal * dot(d, up) / z,
                    z,
                )
            })
        })
        .collect();

    let mut depth = vec![0.0f64; n * n]; // 1/z, larger is nearer
    let mut owner = vec![-1i64; n * n];
    for (fi, tri) in mesh.faces.iter().enumerate() {
        let (Some(a), Some(b), Some(c)) = (projected[tri[0]], projected[tri[1]], projected[tri[2]])
        else {
            continue;
        };
        let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
        if area.abs() < 1e-12 {
            continue;
        }
        let xmin = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
        let ymin = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
        let xmax = (a.0.max(b.0).max(c.0).ceil().min(n as f64)).max(0.0) as usize;
        let ymax = (a.1.max(b.1).max(c.1).ceil().min(n as f64)).max(0.0) as usize;
        for y in ymin..ymax {
            for x in xmin..xmax {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let w0 = ((b.0 - px) * (c.1 - py) - (b.1 - py) * (c.0 - px)) / area;
                let w1 = ((c.0 - px) * (a.1 - py) - (c.1 - py) * (a.0 - px)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv_z = w0 / a.2 + w1 / b.2 + w2 / c.2;
                let p = y * n + x;
                if inv_z > depth[p] {
                    depth[p] = inv_z;
                    owner[p] = fi as i64;
                }
            }
        }
    }

    let slots = mesh.sampled_slots();
    let shade_of: Vec<f64> = (0..mesh.faces.len())
        .map(|f| face_shading(mesh, f))
        .collect();
    let mut face_index = vec![-1i64; n * n];
    let mut shading = vec![1.0; n * n];
    let mut mask = vec![false; n * n];
    let mut triplets = Vec::new();
    let plane = n * n;
    for p in 0..plane {
        if owner[p] < 0 {
            continue;
        }
        let f = owner[p] as usize;
        mask[p] = true;
        shading[p] = shade_of[f];
        if let Some(slot) = slots[f] {
            face_index[p] = slot as i64;
            for c in 0..3 {
                triplets.push((c * plane + p, slot * 3 + c, shade_of[f]));
            }
        }
    }
    let num_sampled = mesh.num_sampled();
    let pixel_map = SparseLinear::from_triplets(3 * plane, 3 * num_sampled.max(1), triplets)?;
    Ok(Fragments {
        size: n,
        face_index,
        mask,
        shading,
        num_sampled,
        pixel_map: Arc::new(pixel_map),
    })
}

/// A composited render: `X = m ⊙ (shading · texture[face_index]) + (1 − m) ⊙ B`,
/// with unpainted mesh faces in shaded neutral gray.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub fragments: Arc<Fragments>,
    pub image: Image,
    pub background_id: String,
    /// Texture-independent part of the planar image, flattened.
    base: Arc<Tensor>,
}

impl RenderedScene {
    pub fn size(&self) -> usize {
        self.fragments.size
    }

    pub fn mask(&self) -> &[bool] {
        &self.fragments.mask
    }

    pub fn face_index(&self) -> &[i64] {
        &self.fragments.face_index
    }

    pub fn shading(&self) -> &[f64] {
        &self.fragments.shading
    }

    /// Records the image `[3, H, W]` as a function of the `[F, 3]` texture
    /// variable.
    pub fn image_var<'t>(&self, texture: Var<'t>) -> Result<Var<'t>> {
        let n = self.size();
        let painted = texture.linear_arc(self.fragments.pixel_map.clone(), false)?;
        Ok(painted.add_const(&self.base)?.reshape(&[3, n, n])?)
    }

    /// The image as a constant on `tape`.
    pub fn image_const<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(self.image.to_tensor())
    }
}

/// Builds the texture-independent background/gray layer.
fn base_layer(frag: &Fragments, background: &Image) -> Tensor {
    let n = frag.size;
    let plane = n * n;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = if !frag.mask[p] {
                background.data[c * plane + p]
            } else if frag.face_index[p] < 0 {
                NEUTRAL_GRAY * frag.shading[p]
            } else {
                0.0
            };
        }
    }
    Tensor::from_vec(data)
}

/// Composites `texture` over `background` using precomputed fragments.
pub fn compose(
    fragments: Arc<Fragments>,
    texture: &Texture,
    background: &Image,
    background_id: impl Into<String>,
) -> Result<RenderedScene> {
    let n = fragments.size;
    if background.height != n || background.width != n {
        return Err(Error::Invalid(format!(
            "background is {}x{}, render is {n}x{n}",
            background.width, background.height
        )));
    }
    if texture.len() != fragments.num_sampled {
        return Err(Error::Invalid(format!(
            "texture has {} faces, mesh samples {}",
            texture.len(),
            fragments.num_sampled
        )));
    }
    let base = base_layer(&fragments, background);
    let mut flat: Vec<f64> = texture.colors.iter().flatten().copied().collect();
    if flat.is_empty() {
        flat = vec![0.0; 3];
    }
    let painted = fragments.pixel_map.apply(&flat, false)?;
    let data: Vec<f64> = painted
        .iter()
        .zip(base.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(RenderedScene {
        image: Image {
            height: n,
            width: n,
            data,
        },
        fragments,
        background_id: background_id.into(),
        base: Arc::new(base),
    })
}

pub fn rasterize(
    mesh: &Mesh,
    texture: &Texture,
    pose: &CameraPose,
    background: &Image,
) -> Result<RenderedScene> {
    let frag = rasterize_fragments(mesh, pose)?;
    compose(Arc::new(frag), texture, background, "")
}
