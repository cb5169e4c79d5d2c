//! Per-token motion scores and motion-mask extraction from flow discrepancy.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::as_labels;
use crate::pose::CameraPose;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Fraction of moving pixels; what the attention loss consumes.
    #[default]
    DynamicHigh,
    /// One minus the moving fraction.
    StaticHigh,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionScores {
    pub values: Vec<f64>,
    pub polarity: Polarity,
}

impl MotionScores {
    pub fn dynamicness(&self) -> Vec<f64> {
        match self.polarity {
            Polarity::DynamicHigh => self.values.clone(),
            Polarity::StaticHigh => self.values.iter().map(|v| 1.0 - v).collect(),
        }
    }
}

/// Pools a binary `[H, W]` mask over `s × s` patches in token order.
pub fn motion_score(mask: &Tensor, s: usize, polarity: Polarity) -> Result<MotionScores> {
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        other => return Err(Error::dim("motion_score", format!("mask shape {other:?}"))),
    };
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::dim("motion_score", format!("{h}x{w} not divisible by patch size {s}")));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::contract("motion mask must be binary"));
    }
    let (gh, gw) = (h / s, w / s);
    let mut values = Vec::with_capacity(gh * gw);
    for pr in 0..gh {
        for pc in 0..gw {
            let mut sum = 0.0;
            for r in pr * s..(pr + 1) * s {
                for c in pc * s..(pc + 1) * s {
                    sum += mask.at(r, c);
                }
            }
            let mean = sum / (s * s) as f64;
            values.push(match polarity {
                Polarity::DynamicHigh => mean,
                Polarity::StaticHigh => 1.0 - mean,
            });
        }
    }
    Ok(MotionScores { values, polarity })
}

/// Per-pixel displacement `(du, dv)` with a validity flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub flow: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField { height, width, flow: vec![[0.0; 2]; height * width], valid: vec![true; height * width] }
    }

    /// Reads a `[2, H, W]` tensor; non-finite entries become invalid pixels.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [2, h, w] => (*h, *w),
            other => return Err(Error::dim("FlowField", format!("expected [2, H, W], got {other:?}"))),
        };
        let n = h * w;
        let d = t.data();
        let flow: Vec<[f64; 2]> = (0..n).map(|i| [d[i], d[n + i]]).collect();
        let valid = flow.iter().map(|f| f[0].is_finite() && f[1].is_finite()).collect();
        Ok(FlowField { height: h, width: w, flow, valid })
    }

    /// `[2, H, W]`; invalid pixels are written as NaN.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.height * self.width;
        let mut data = vec![0.0; 2 * n];
        for i in 0..n {
            let f = if self.valid[i] { self.flow[i] } else { [f64::NAN; 2] };
            data[i] = f[0];
            data[n + i] = f[1];
        }
        Tensor::new(vec![2, self.height, self.width], data).expect("flow shape")
    }
}

/// Flow induced by camera motion alone: each pixel is back-projected with its
/// z-depth in camera `i`, moved into camera `j`, and re-projected.
pub fn ego_flow(depth: &Tensor, pose_i: &CameraPose, pose_j: &CameraPose, k: &Matrix3<f64>) -> Result<FlowField> {
    let (h, w) = match depth.shape() {
        [h, w] => (*h, *w),
        other => return Err(Error::dim("ego_flow", format!("depth shape {other:?}"))),
    };
    let k_inv = k.try_inverse().ok_or_else(|| Error::contract("intrinsics are singular"))?;
    let j_from_i = pose_j.inverse().compose(pose_i);
    let mut out = FlowField::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let idx = r * w + c;
            let z = depth.at(r, c);
            if !(z > 0.0) || !z.is_finite() {
                out.valid[idx] = false;
                continue;
            }
            let (u, v) = (c as f64, r as f64);
            let ray = k_inv * Vector3::new(u, v, 1.0);
            let p = j_from_i.transform_point(&(ray * (z / ray.z)));
            if !(p.z > 0.0) {
                out.valid[idx] = false;
                continue;
            }
            let q = k * p;
            out.flow[idx] = [q.x / q.z - u, q.y / q.z - v];
        }
    }
    Ok(out)
}

/// Integer region label per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationRegions {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<i64>,
}

impl SegmentationRegions {
    pub fn new(height: usize, width: usize, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim("SegmentationRegions", format!("{} labels for {height}x{width}", labels.len())));
        }
        Ok(SegmentationRegions { height, width, labels })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w] => SegmentationRegions::new(*h, *w, as_labels(t)?),
            other => Err(Error::dim("SegmentationRegions", format!("shape {other:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.labels.iter().map(|&l| l as f64).collect())
            .expect("label shape")
    }

    pub fn sizes(&self) -> BTreeMap<i64, usize> {
        let mut m = BTreeMap::new();
        for &l in &self.labels {
            *m.entry(l).or_insert(0) += 1;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionStat {
    pub id: i64,
    pub pixels: usize,
    pub valid_pixels: usize,
    /// Mean flow discrepancy over valid pixels; `None` if there are none.
    pub discrepancy: Option<f64>,
}

/// `d_k = mean ‖F_pred − F_ego‖₂` over the valid pixels of each region.
pub fn region_discrepancy(pred: &FlowField, ego: &FlowField, regions: &SegmentationRegions) -> Result<Vec<RegionStat>> {
    let dims = (regions.height, regions.width);
    if (pred.height, pred.width) != dims || (ego.height, ego.width) != dims {
        return Err(Error::dim("region_discrepancy", "flow and segmentation sizes differ".to_string()));
    }
    let mut acc: BTreeMap<i64, (usize, usize, f64)> = BTreeMap::new();
    for (i, &l) in regions.labels.iter().enumerate() {
        let e = acc.entry(l).or_insert((0, 0, 0.0));
        e.0 += 1;
        if pred.valid[i] && ego.valid[i] {
            let (a, b) = (pred.flow[i], ego.flow[i]);
            e.1 += 1;
            e.2 += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        }
    }
    Ok(acc
        .into_iter()
        .map(|(id, (pixels, valid, sum))| RegionStat {
            id,
            pixels,
            valid_pixels: valid,
            discrepancy: (valid > 0).then(|| sum / valid as f64),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Threshold {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub threshold: f64,
}

/// `μ + 2σ` over the given discrepancies.
pub fn threshold_stats(d: &[f64]) -> Result<Threshold> {
    if d.is_empty() {
        return Err(Error::contract("no region has a defined discrepancy"));
    }
    let n = d.len() as f64;
    let rough = d.iter().sum::<f64>() / n;
    let mean = rough + d.iter().map(|x| x - rough).sum::<f64>() / n;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Threshold { mean, std, threshold: mean + 2.0 * std })
}

/// Regions whose discrepancy strictly exceeds `μ + 2σ`; undefined regions are
/// excluded from both the statistics and the result.
pub fn threshold_regions(stats: &[RegionStat]) -> Result<(Threshold, Vec<i64>)> {
    let defined: Vec<(i64, f64)> = stats.iter().filter_map(|s| s.discrepancy.map(|d| (s.id, d))).collect();
    let th = threshold_stats(&defined.iter().map(|x| x.1).collect::<Vec<_>>())?;
    let flagged = defined.iter().filter(|(_, d)| *d > th.threshold).map(|(id, _)| *id).collect();
    Ok((th, flagged))
}

pub fn build_motion_mask(regions: &SegmentationRegions, moving: &[i64]) -> Tensor {
    let data = regions.labels.iter().map(|l| if moving.contains(l) { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![regions.height, regions.width], data).expect("mask shape")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsScope {
    /// Statistics over the regions of one frame pair.
    #[default]
    PerPair,
    /// Statistics pooled over every frame pair of a sequence.
    PerSequence,
}

/// Inputs for one frame pair.
pub struct PairInput<'a> {
    pub pred_flow: &'a FlowField,
    pub depth: &'a Tensor,
    pub pose_i: &'a CameraPose,
    pub pose_j: &'a CameraPose,
    pub intrinsics: &'a Matrix3<f64>,
    pub regions: &'a SegmentationRegions,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MotionReport {
    pub regions: Vec<RegionStat>,
    pub threshold: Threshold,
    pub flagged: Vec<i64>,
    #[serde(skip)]
    pub mask: Tensor,
}

pub fn extract_motion_mask(input: &PairInput) -> Result<MotionReport> {
    let ego = ego_flow(input.depth, input.pose_i, input.pose_j, input.intrinsics)?;
    let regions = region_discrepancy(input.pred_flow, &ego, input.regions)?;
    let (threshold, flagged) = threshold_regions(&regions)?;
    let mask = build_motion_mask(input.regions, &flagged);
    Ok(MotionReport { regions, threshold, flagged, mask })
}

/// Runs every pair, computing statistics per pair or pooled over the sequence.
pub fn extract_motion_sequence(inputs: &[PairInput], scope: StatsScope) -> Result<Vec<MotionReport>> {
    match scope {
        StatsScope::PerPair => inputs.iter().map(extract_motion_mask).collect(),
        StatsScope::PerSequence => {
            let mut per_pair = Vec::with_capacity(inputs.len());
            for input in inputs {
                let ego = ego_flow(input.depth, input.pose_i, input.pose_j, input.intrinsics)?;
                per_pair.push(region_discrepancy(input.pred_flow, &ego, input.regions)?);
            }
            let all: Vec<f64> = per_pair.iter().flatten().filter_map(|s| s.discrepancy).collect();
            let threshold = threshold_stats(&all)?;
            Ok(per_pair
                .into_iter()
                .zip(inputs)
                .map(|(regions, input)| {
                    let flagged: Vec<i64> = regions
                        .iter()
                        .filter(|s| s.discrepancy.is_some_and(|d| d > threshold.threshold))
                        .map(|s| s.id)
                        .collect();
                    let mask = build_motion_mask(input.regions, &flagged);
                    MotionReport { regions, threshold: threshold.clone(), flagged, mask }
                })
                .collect())
        }
    }
}
