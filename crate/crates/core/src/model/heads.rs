use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::pose::CameraPose;
use crate::tensor::{softplus, Tensor};

use super::{ModelConfig, ParamVars, Params};

/// Quaternion (4) + translation (3) + focal pair (2).
pub const CAMERA_DIM: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedCamera {
    pub pose: CameraPose,
    pub raw: [f64; CAMERA_DIM],
    /// Set when the head produced a zero quaternion and identity was substituted.
    pub fallback: bool,
}

/// Splits a raw 9-vector into a pose, normalizing the quaternion.
pub fn camera_from_raw(raw: [f64; CAMERA_DIM]) -> DecodedCamera {
    let q = Quaternion::new(raw[0], raw[1], raw[2], raw[3]);
    let fallback = !(q.norm() > 0.0);
    let rotation = if fallback { UnitQuaternion::identity() } else { UnitQuaternion::from_quaternion(q) };
    let pose = CameraPose::new(rotation, Vector3::new(raw[4], raw[5], raw[6])).with_focal(Some([raw[7], raw[8]]));
    DecodedCamera { pose, raw, fallback }
}

/// Inverse of [`camera_from_raw`] for unit quaternions.
pub fn encode_camera(pose: &CameraPose) -> [f64; CAMERA_DIM] {
    let q = pose.quat_wxyz();
    let t = pose.translation;
    let f = pose.focal.unwrap_or([1.0, 1.0]);
    [q[0], q[1], q[2], q[3], t[0], t[1], t[2], f[0], f[1]]
}

/// Linear camera head on one (final-normalized) camera-token feature.
pub fn decode_camera(feature: &[f64], params: &Params) -> Result<DecodedCamera> {
    let x = Tensor::new(vec![1, feature.len()], feature.to_vec())?;
    let out = x.matmul(params.get("head.camera.w"))?.add_row(params.get("head.camera.b"))?;
    let raw: [f64; CAMERA_DIM] = out.data().try_into().expect("camera head width");
    Ok(camera_from_raw(raw))
}

/// Tape handles for a decoded camera: `rot` is 3×3, `trans` and `focal` are row vectors.
#[derive(Clone, Copy, Debug)]
pub struct CameraVars {
    pub raw: Var,
    pub rot: Var,
    pub trans: Var,
    pub focal: Var,
    pub fallback: bool,
}

pub fn decode_camera_tape(t: &Tape, feature: Var, params: &ParamVars) -> Result<CameraVars> {
    let raw = t.add_row(t.matmul(feature, params.get("head.camera.w"))?, params.get("head.camera.b"))?;
    let q = t.slice_cols(raw, 0, 4)?;
    let qv = t.value(q);
    let fallback = !(qv.data().iter().map(|v| v * v).sum::<f64>() > 0.0);
    let unit = if fallback { t.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0])) } else { t.normalize(q)? };
    Ok(CameraVars {
        raw,
        rot: t.quat_to_rot(unit)?,
        trans: t.slice_cols(raw, 4, 7)?,
        focal: t.slice_cols(raw, 7, 9)?,
        fallback,
    })
}

/// Per-pixel grids decoded from one frame's patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseOutputs {
    /// `[H, W]`, strictly positive.
    pub depth: Tensor,
    /// `[3, H, W]`
    pub points: Tensor,
    /// `[H, W]`
    pub motion_logits: Tensor,
    /// `[H, W]`, at least 1.
    pub confidence: Tensor,
}

impl DenseOutputs {
    pub fn motion_probability(&self) -> Tensor {
        self.motion_logits.map(crate::tensor::sigmoid)
    }
}

/// Flat indices into a `[P, channels·s²]` head output that lay it out as
/// `[channels, H, W]`. Pixel `(r, c)` belongs to patch `(r/s)·(W/s) + c/s`
/// at in-patch offset `(r%s)·s + c%s`.
pub fn pixel_order_indices(config: &ModelConfig, channels: usize) -> Vec<usize> {
    let s = config.patch_size;
    let (h, w) = (config.image_height, config.image_width);
    let gw = w / s;
    let width = channels * s * s;
    let mut idx = Vec::with_capacity(channels * h * w);
    for ch in 0..channels {
        for r in 0..h {
            for c in 0..w {
                let p = (r / s) * gw + c / s;
                let k = (r % s) * s + c % s;
                idx.push(p * width + ch * s * s + k);
            }
        }
    }
    idx
}

fn unpatchify(out: &Tensor, idx: &[usize], shape: &[usize]) -> Result<Tensor> {
    Tensor::new(shape.to_vec(), idx.iter().map(|&i| out.data()[i]).collect())
}

fn check_patches(config: &ModelConfig, shape: &[usize]) -> Result<()> {
    if shape != [config.patch_tokens(), config.d_model] {
        return Err(Error::dim(
            "decode_dense",
            format!("expected [{}, {}], got {shape:?}", config.patch_tokens(), config.d_model),
        ));
    }
    Ok(())
}

pub fn decode_dense(patches: &Tensor, params: &Params) -> Result<DenseOutputs> {
    let c = params.config();
    check_patches(c, patches.shape())?;
    let (h, w) = (c.image_height, c.image_width);
    let head = |name: &str| -> Result<Tensor> {
        patches.matmul(params.get(&format!("head.{name}.w")))?.add_row(params.get(&format!("head.{name}.b")))
    };
    let one = pixel_order_indices(c, 1);
    let three = pixel_order_indices(c, 3);
    Ok(DenseOutputs {
        depth: unpatchify(&head("depth")?.map(softplus), &one, &[h, w])?,
        points: unpatchify(&head("points")?, &three, &[3, h, w])?,
        motion_logits: unpatchify(&head("motion")?, &one, &[h, w])?,
        confidence: unpatchify(&head("conf")?.map(|x| 1.0 + softplus(x)), &one, &[h, w])?,
    })
}

/// Tape version of [`DenseOutputs`].
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub depth: Var,
    pub points: Var,
    pub motion_logits: Var,
    pub confidence: Var,
}

pub fn decode_dense_tape(t: &Tape, patches: Var, params: &ParamVars, config: &ModelConfig) -> Result<DenseVars> {
    check_patches(config, &t.shape(patches))?;
    let (h, w) = (config.image_height, config.image_width);
    let head = |name: &str| -> Result<Var> {
        t.add_row(
            t.matmul(patches, params.get(&format!("head.{name}.w")))?,
            params.get(&format!("head.{name}.b")),
        )
    };
    let one = pixel_order_indices(config, 1);
    let three = pixel_order_indices(config, 3);
    let grid = |v: Var, idx: &[usize], shape: &[usize]| -> Result<Var> { t.reshape(t.gather(v, idx)?, shape) };
    Ok(DenseVars {
        depth: grid(t.softplus(head("depth")?), &one, &[h, w])?,
        points: grid(head("points")?, &three, &[3, h, w])?,
        motion_logits: grid(head("motion")?, &one, &[h, w])?,
        confidence: grid(t.add_scalar(t.softplus(head("conf")?), 1.0), &one, &[h, w])?,
    })
}
