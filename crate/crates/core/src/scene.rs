//! Deterministic toy dynamic scenes: a textured back plane, rigidly
//! translating rectangles, and a camera moving on a circular arc.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{FlowField, SegmentationRegions};
use crate::pose::{default_intrinsics, CameraPose};
use crate::rng::{derive, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraPath {
    /// Point the camera orbits and looks at.
    pub pivot: [f64; 3],
    /// Orbit radius; zero keeps the camera still.
    pub radius: f64,
    pub start_deg: f64,
    pub step_deg: f64,
}

impl Default for CameraPath {
    fn default() -> Self {
        CameraPath { pivot: [0.0, 0.0, 4.0], radius: 4.0, start_deg: 0.0, step_deg: 2.0 }
    }
}

/// Axis-aligned rectangle facing the camera, translating at constant velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub center: [f64; 3],
    pub half_extent: [f64; 2],
    /// World units per frame.
    pub velocity: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub camera: CameraPath,
    /// World `z` of the static back plane.
    pub plane_z: f64,
    pub objects: Vec<ObjectSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            frames: 8,
            height: 16,
            width: 16,
            patch_size: 4,
            camera: CameraPath::default(),
            plane_z: 8.0,
            objects: vec![ObjectSpec { center: [0.0, 0.0, 4.0], half_extent: [0.8, 0.8], velocity: [0.1, 0.05, 0.0] }],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.patch_size;
        if self.frames == 0 || s == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("frames, image size and patch size must be positive".into()));
        }
        if self.height % s != 0 || self.width % s != 0 {
            return Err(Error::Config(format!("{}x{} is not divisible by patch size {s}", self.height, self.width)));
        }
        let k = default_intrinsics(self.height, self.width);
        let first = camera_pose(&self.camera, 0);
        for (i, o) in self.objects.iter().enumerate() {
            if o.velocity.iter().chain(&o.center).chain(&o.half_extent).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("object {i} has non-finite parameters")));
            }
            if o.half_extent.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::Config(format!("object {i} needs a positive extent")));
            }
            let p = first.inverse().transform_point(&Vector3::from(o.center));
            let q = k * p;
            let (u, v) = (q.x / q.z, q.y / q.z);
            if !(p.z > 0.0) || u < 0.0 || v < 0.0 || u > (self.width - 1) as f64 || v > (self.height - 1) as f64 {
                return Err(Error::Config(format!("object {i} is not inside the first image")));
            }
            if !(o.center[2] < self.plane_z) {
                return Err(Error::Config(format!("object {i} lies behind the back plane")));
            }
        }
        Ok(())
    }
}

pub fn camera_pose(path: &CameraPath, frame: usize) -> CameraPose {
    let phi = (path.start_deg + path.step_deg * frame as f64).to_radians();
    let pivot = Vector3::from(path.pivot);
    let center = pivot + path.radius * Vector3::new(phi.sin(), 0.0, -phi.cos());
    CameraPose::new(UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -phi), center)
}

/// Three seeded sinusoids per channel.
#[derive(Clone, Debug)]
struct Texture {
    waves: [[f64; 3]; 3],
}

impl Texture {
    fn new(rng: &mut SeededRng) -> Self {
        let mut waves = [[0.0; 3]; 3];
        for w in &mut waves {
            *w = [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(0.0..std::f64::consts::TAU)];
        }
        Texture { waves }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        self.waves.map(|[a, b, p]| 0.5 + 0.5 * (a * x + b * y + p).sin())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    /// `[3, H, W]` in `[0, 1]`.
    pub pixels: Tensor,
    /// `[H, W]` camera z-depth.
    pub depth: Tensor,
    pub pose: CameraPose,
    /// `[H, W]`, 1 where a moving object is visible.
    pub motion_mask: Tensor,
    /// `[H, W]`: 0 for the back plane, `i + 1` for object `i`.
    pub object_ids: Tensor,
    /// `[3, H, W]` world coordinates of the visible surface.
    pub world_points: Tensor,
}

/// Flow from frame `t` to `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFlow {
    /// True scene flow projected to the image.
    pub full: FlowField,
    /// Flow the same pixels would have if every surface were static.
    pub ego: FlowField,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub intrinsics: Matrix3<f64>,
    pub frames: Vec<SceneFrame>,
    pub flows: Vec<PairFlow>,
}

struct Hit {
    lambda: f64,
    object: Option<usize>,
    point: Vector3<f64>,
}

fn object_center(o: &ObjectSpec, frame: usize) -> Vector3<f64> {
    Vector3::from(o.center) + frame as f64 * Vector3::from(o.velocity)
}

fn cast(spec: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, frame: usize) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let plane = (spec.plane_z - origin.z) / dir.z;
    if plane > 0.0 {
        best = Some(Hit { lambda: plane, object: None, point: origin + plane * dir });
    }
    for (i, o) in spec.objects.iter().enumerate() {
        let c = object_center(o, frame);
        let lambda = (c.z - origin.z) / dir.z;
        if !(lambda > 0.0) || best.as_ref().is_some_and(|b| b.lambda <= lambda) {
            continue;
        }
        let p = origin + lambda * dir;
        if (p.x - c.x).abs() < o.half_extent[0] && (p.y - c.y).abs() < o.half_extent[1] {
            best = Some(Hit { lambda, object: Some(i), point: p });
        }
    }
    best
}

fn project(k: &Matrix3<f64>, pose: &CameraPose, x: &Vector3<f64>) -> Option<[f64; 2]> {
    let p = k * pose.inverse().transform_point(x);
    (p.z > 0.0).then(|| [p.x / p.z, p.y / p.z])
}

pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let k = default_intrinsics(h, w);
    let k_inv = k.try_inverse().expect("pinhole intrinsics are invertible");
    let mut tex_rng = derive(spec.seed, 1);
    let background = Texture::new(&mut tex_rng);
    let textures: Vec<Texture> = spec.objects.iter().map(|_| Texture::new(&mut tex_rng)).collect();
    let focal = Some([k[(0, 0)], k[(1, 1)]]);

    let poses: Vec<CameraPose> = (0..spec.frames).map(|t| camera_pose(&spec.camera, t).with_focal(focal)).collect();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut hits_per_frame = Vec::with_capacity(spec.frames);
    for (t, pose) in poses.iter().enumerate() {
        let n = h * w;
        let mut pixels = vec![0.0; 3 * n];
        let mut depth = vec![0.0; n];
        let mut mask = vec![0.0; n];
        let mut ids = vec![0.0; n];
        let mut points = vec![0.0; 3 * n];
        let mut hits = Vec::with_capacity(n);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                let ray = k_inv * Vector3::new(c as f64, r as f64, 1.0);
                let dir = pose.rotation * ray;
                let hit = cast(spec, &pose.translation, &dir, t)
                    .ok_or_else(|| Error::Config(format!("pixel ({r}, {c}) of frame {t} sees nothing")))?;
                let color = match hit.object {
                    None => background.color(hit.point.x, hit.point.y),
                    Some(o) => {
                        let local = hit.point - object_center(&spec.objects[o], t);
                        textures[o].color(local.x, local.y)
                    }
                };
                for ch in 0..3 {
                    pixels[ch * n + i] = color[ch];
                    points[ch * n + i] = hit.point[ch];
                }
                depth[i] = hit.lambda * ray.z;
                if let Some(o) = hit.object {
                    ids[i] = (o + 1) as f64;
                    if spec.objects[o].velocity.iter().any(|&v| v != 0.0) {
                        mask[i] = 1.0;
                    }
                }
                hits.push((hit.point, hit.object));
            }
        }
        frames.push(SceneFrame {
            pixels: Tensor::new(vec![3, h, w], pixels)?,
            depth: Tensor::new(vec![h, w], depth)?,
            pose: pose.clone(),
            motion_mask: Tensor::new(vec![h, w], mask)?,
            object_ids: Tensor::new(vec![h, w], ids)?,
            world_points: Tensor::new(vec![3, h, w], points)?,
        });
        hits_per_frame.push(hits);
    }

    let mut flows = Vec::with_capacity(spec.frames.saturating_sub(1));
    for t in 0..spec.frames.saturating_sub(1) {
        let mut full = FlowField::zeros(h, w);
        let mut ego = FlowField::zeros(h, w);
        for (i, (x, obj)) in hits_per_frame[t].iter().enumerate() {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            let moved = match obj {
                Some(o) => x + Vector3::from(spec.objects[*o].velocity),
                None => *x,
            };
            for (field, target) in [(&mut ego, x), (&mut full, &moved)] {
                match project(&k, &poses[t + 1], target) {
                    Some(q) => field.flow[i] = [q[0] - u, q[1] - v],
                    None => field.valid[i] = false,
                }
            }
        }
        flows.push(PairFlow { full, ego });
    }
    Ok(Scene { spec: spec.clone(), intrinsics: k, frames, flows })
}

/// Background split into a `tiles × tiles` grid (labels `1..=tiles²`); object
/// `i` gets label `1000 + i`.
pub fn oracle_segmentation(frame: &SceneFrame, tiles: usize) -> Result<SegmentationRegions> {
    let (h, w) = (frame.depth.rows(), frame.depth.cols());
    if tiles == 0 || tiles > h || tiles > w {
        return Err(Error::contract(format!("cannot split {h}x{w} into {tiles}x{tiles} tiles")));
    }
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let id = frame.object_ids.at(r, c) as i64;
            labels.push(if id > 0 { 999 + id } else { ((r * tiles / h) * tiles + c * tiles / w + 1) as i64 });
        }
    }
    SegmentationRegions::new(h, w, labels)
}

/// Fixed random linear map from `s × s × 3` pixel patches to token features.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbed {
    pub patch_size: usize,
    pub weights: Tensor,
}

impl PatchEmbed {
    pub fn new(patch_size: usize, d_model: usize, seed: u64) -> Self {
        let fan_in = 3 * patch_size * patch_size;
        let mut rng = derive(seed, 7);
        PatchEmbed { patch_size, weights: Tensor::random_normal(&[fan_in, d_model], 1.0 / (fan_in as f64).sqrt(), &mut rng) }
    }

    /// `[(1+P), d]` tokens for `[3, H, W]` pixels; the camera row is zero.
    pub fn tokenize(&self, pixels: &Tensor) -> Result<Tensor> {
        let (h, w) = match pixels.shape() {
            [3, h, w] => (*h, *w),
            other => return Err(Error::dim("tokenize", format!("expected [3, H, W], got {other:?}"))),
        };
        let s = self.patch_size;
        if h % s != 0 || w % s != 0 {
            return Err(Error::dim("tokenize", format!("{h}x{w} not divisible by {s}")));
        }
        let (gh, gw) = (h / s, w / s);
        let n = h * w;
        let mut patches = Vec::with_capacity(gh * gw * 3 * s * s);
        for pr in 0..gh {
            for pc in 0..gw {
                for ch in 0..3 {
                    for r in 0..s {
                        for c in 0..s {
                            let px = pixels.data()[ch * n + (pr * s + r) * w + pc * s + c];
                            patches.push((px - 0.5) * 2.0);
                        }
                    }
                }
            }
        }
        let patches = Tensor::new(vec![gh * gw, 3 * s * s], patches)?;
        let feats = patches.matmul(&self.weights)?;
        Tensor::concat_rows(&[&Tensor::zeros(&[1, self.weights.cols()]), &feats])
    }
}
