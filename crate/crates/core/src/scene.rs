//! Pinhole cameras, rays, pose files and the synthetic ground-truth scenes
//! used for desk-scale experiments.
//!
//! Convention: right-handed world, the camera looks along its local `-z`,
//! image `v` grows downward, pixel centers sit at `+0.5`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridActivation, VoxelGridField};
use crate::imaging::Image;
use crate::render::{render_image, RenderOptions};

const ORTHO_TOL: f64 = 1e-9;
const CUBE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-from-camera rigid transform, row-major 4x4.
    pub c2w: [f64; 16],
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Camera {
    /// Checks intrinsics, rigidity of the pose and the depth range.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Pose("image size must be >= 1".into()));
        }
        for (name, v) in [("fx", self.fx), ("fy", self.fy), ("cx", self.cx), ("cy", self.cy)] {
            if !v.is_finite() {
                return Err(Error::Pose(format!("{name} is not finite")));
            }
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Pose("focal lengths must be positive".into()));
        }
        if self.c2w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Pose("c2w contains non-finite values".into()));
        }
        let r = |i: usize, j: usize| self.c2w[i * 4 + j];
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r(k, i) * r(k, j)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > ORTHO_TOL {
                    return Err(Error::Pose(format!(
                        "rotation block is not orthonormal (R^T R [{i}][{j}] = {dot})"
                    )));
                }
            }
        }
        let det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) - r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0))
            + r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
        if det < 0.0 {
            return Err(Error::Pose("rotation block has determinant -1".into()));
        }
        if self.c2w[12..16] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Pose("last row of c2w must be 0 0 0 1".into()));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::Pose(format!("need 0 < near < far, got near {} far {}", self.near, self.far)));
        }
        Ok(())
    }

    pub fn origin(&self) -> [f64; 3] {
        [self.c2w[3], self.c2w[7], self.c2w[11]]
    }

    /// Ray through continuous pixel position `(u, v)`; integer values hit
    /// the pixel center.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Result<Ray> {
        if !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64) {
            return Err(Error::Invalid(format!(
                "pixel ({u}, {v}) outside {}x{}",
                self.width, self.height
            )));
        }
        let d = [(u + 0.5 - self.cx) / self.fx, -(v + 0.5 - self.cy) / self.fy, -1.0];
        let m = &self.c2w;
        let world = [
            m[0] * d[0] + m[1] * d[1] + m[2] * d[2],
            m[4] * d[0] + m[5] * d[1] + m[6] * d[2],
            m[8] * d[0] + m[9] * d[1] + m[10] * d[2],
        ];
        Ok(Ray {
            origin: self.origin(),
            direction: normalize(world),
            near: self.near,
            far: self.far,
        })
    }

    /// All pixel rays in row-major order.
    pub fn rays(&self) -> Vec<Ray> {
        let mut out = Vec::with_capacity(self.width * self.height);
        for v in 0..self.height {
            for u in 0..self.width {
                out.push(self.pixel_ray(u as f64, v as f64).expect("pixel in range"));
            }
        }
        out
    }
}

/// World-from-camera transform placing the camera at `eye` looking at
/// `target`, with `up` roughly upward in the image.
pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<[f64; 16]> {
    let f = sub3(target, eye);
    if norm(f) == 0.0 {
        return Err(Error::Scene("camera placed at its look-at point".into()));
    }
    let f = normalize(f);
    let right = cross(f, up);
    if norm(right) < 1e-9 {
        return Err(Error::Scene("view direction parallel to the up vector".into()));
    }
    let right = normalize(right);
    let cam_up = cross(right, f);
    Ok([
        right[0], cam_up[0], -f[0], eye[0], //
        right[1], cam_up[1], -f[1], eye[1], //
        right[2], cam_up[2], -f[2], eye[2], //
        0.0, 0.0, 0.0, 1.0,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub file: String,
    #[serde(flatten)]
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub version: u32,
    pub frames: Vec<PoseFrame>,
}

pub const POSE_VERSION: u32 = 1;

pub fn parse_poses(text: &str) -> Result<Vec<PoseFrame>> {
    let file: PoseFile = serde_json::from_str(text).map_err(|e| Error::Pose(e.to_string()))?;
    if file.version != POSE_VERSION {
        return Err(Error::Pose(format!("unsupported pose file version {}", file.version)));
    }
    for (i, f) in file.frames.iter().enumerate() {
        f.camera
            .validate()
            .map_err(|e| Error::Pose(format!("frame {i} ({}): {e}", f.file)))?;
    }
    Ok(file.frames)
}

pub fn load_poses(path: impl AsRef<Path>) -> Result<Vec<PoseFrame>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&text)
}

pub fn poses_to_json(frames: &[PoseFrame]) -> Result<String> {
    for f in frames {
        f.camera.validate()?;
    }
    let file = PoseFile {
        version: POSE_VERSION,
        frames: frames.to_vec(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_poses(frames: &[PoseFrame], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = poses_to_json(frames)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        density: f64,
        rgb: [f64; 3],
    },
    Box {
        center: [f64; 3],
        half_size: [f64; 3],
        density: f64,
        rgb: [f64; 3],
    },
}

impl Primitive {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Primitive::Sphere { center, radius, .. } => norm(sub3(p, *center)) <= *radius,
            Primitive::Box { center, half_size, .. } => (0..3).all(|a| (p[a] - center[a]).abs() <= half_size[a]),
        }
    }

    fn extent(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Sphere { center, radius, .. } => (*center, [*radius; 3]),
            Primitive::Box { center, half_size, .. } => (*center, *half_size),
        }
    }

    fn appearance(&self) -> (f64, [f64; 3]) {
        match self {
            Primitive::Sphere { density, rgb, .. } | Primitive::Box { density, rgb, .. } => (*density, *rgb),
        }
    }

    fn validate(&self) -> Result<()> {
        let (c, half) = self.extent();
        let (density, rgb) = self.appearance();
        if c.iter().chain(&half).chain(&rgb).any(|v| !v.is_finite()) || !density.is_finite() {
            return Err(Error::Scene("primitive has non-finite values".into()));
        }
        if half.iter().any(|&h| h < 0.0) || density < 0.0 {
            return Err(Error::Scene("primitive size and density must be >= 0".into()));
        }
        if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Scene("primitive color outside [0, 1]".into()));
        }
        for a in 0..3 {
            if c[a] - half[a] < -1.0 - CUBE_TOL || c[a] + half[a] > 1.0 + CUBE_TOL {
                return Err(Error::Scene(format!("primitive {self:?} leaves the scene cube [-1, 1]^3")));
            }
        }
        Ok(())
    }
}

/// Cameras evenly spaced in azimuth on a circle around `look_at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    #[serde(default)]
    pub elevation_deg: f64,
    #[serde(default)]
    pub look_at: [f64; 3],
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    /// Maximum random azimuth offset per camera, degrees.
    #[serde(default)]
    pub jitter_deg: f64,
    /// Ring indices reserved for evaluation.
    #[serde(default)]
    pub heldout: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub grid_resolution: usize,
    pub primitives: Vec<Primitive>,
    pub cameras: CameraRing,
    #[serde(default = "default_gt_samples")]
    pub samples_per_ray: usize,
}

fn default_gt_samples() -> usize {
    64
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_resolution < 2 {
            return Err(Error::Scene("grid_resolution must be >= 2".into()));
        }
        for p in &self.primitives {
            p.validate()?;
        }
        let ring = &self.cameras;
        if ring.count == 0 || ring.width == 0 || ring.height == 0 {
            return Err(Error::Scene("camera ring needs count, width and height >= 1".into()));
        }
        if !(ring.fov_deg > 0.0 && ring.fov_deg < 180.0) {
            return Err(Error::Scene(format!("fov_deg must be in (0, 180), got {}", ring.fov_deg)));
        }
        if !(ring.radius > 0.0) || !ring.jitter_deg.is_finite() || ring.jitter_deg < 0.0 {
            return Err(Error::Scene("ring radius must be > 0 and jitter >= 0".into()));
        }
        if let Some(&bad) = ring.heldout.iter().find(|&&i| i >= ring.count) {
            return Err(Error::Scene(format!("held-out index {bad} out of range")));
        }
        if self.samples_per_ray == 0 {
            return Err(Error::Scene("samples_per_ray must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub field: VoxelGridField,
    pub cameras: Vec<Camera>,
    /// Whether each camera is held out from training.
    pub heldout: Vec<bool>,
}

/// Voxelizes the primitives onto grid nodes (later primitives win) and
/// places the camera ring. Deterministic given `(spec, seed)`.
pub fn make_synthetic_scene(spec: &SyntheticSceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let r = spec.grid_resolution;
    let mut field = VoxelGridField::from_params(r, GridActivation::Linear, vec![0.0; r * r * r * 4])?;
    for z in 0..r {
        for y in 0..r {
            for x in 0..r {
                let p = field.node_position(x, y, z);
                if let Some(prim) = spec.primitives.iter().rev().find(|q| q.contains(p)) {
                    let (density, rgb) = prim.appearance();
                    let node = field.node(x, y, z);
                    field.node_raw_mut(node).copy_from_slice(&[density, rgb[0], rgb[1], rgb[2]]);
                }
            }
        }
    }

    let ring = &spec.cameras;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let el = ring.elevation_deg.to_radians();
    let focal = 0.5 * ring.width as f64 / (0.5 * ring.fov_deg.to_radians()).tan();
    let reach = 3f64.sqrt() + norm(ring.look_at);
    let mut cameras = Vec::with_capacity(ring.count);
    for i in 0..ring.count {
        let jitter = if ring.jitter_deg > 0.0 {
            rng.gen_range(-ring.jitter_deg..=ring.jitter_deg)
        } else {
            0.0
        };
        let az = (360.0 * i as f64 / ring.count as f64 + jitter).to_radians();
        let eye = [
            ring.look_at[0] + ring.radius * el.cos() * az.cos(),
            ring.look_at[1] + ring.radius * el.sin(),
            ring.look_at[2] + ring.radius * el.cos() * az.sin(),
        ];
        let dist = norm(eye);
        let cam = Camera {
            width: ring.width,
            height: ring.height,
            fx: focal,
            fy: focal,
            cx: 0.5 * ring.width as f64,
            cy: 0.5 * ring.height as f64,
            c2w: look_at(eye, ring.look_at, [0.0, 1.0, 0.0])?,
            near: (dist - reach).max(1e-3),
            far: dist + reach,
        };
        cam.validate()?;
        cameras.push(cam);
    }
    let heldout = (0..ring.count).map(|i| ring.heldout.contains(&i)).collect();
    Ok(SyntheticScene {
        field,
        cameras,
        heldout,
    })
}

/// Renders every camera with the deterministic midpoint sampler.
pub fn render_dataset(field: &dyn crate::field::RadianceField, cameras: &[Camera], samples_per_ray: usize) -> Result<Vec<Image>> {
    let opts = RenderOptions::midpoint(samples_per_ray)?;
    cameras.iter().map(|c| render_image(field, c, &opts)).collect()
}
