//! Cost discretization, LiDAR gap filling, and IoU scoring.
//!
//! Costs fall into three classes with half-open intervals: LOW `[0, 2.5)`,
//! MEDIUM `[2.5, 7.5)`, HIGH `[7.5, 10]`. Pixels without a value are
//! UNKNOWN. Ground-truth UNKNOWN pixels are ignored; a prediction of
//! UNKNOWN counts as wrong.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOW_MEDIUM: f64 = 2.5;
pub const MEDIUM_HIGH: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum CostClass {
    Low = 0,
    Medium = 1,
    High = 2,
    Unknown = 3,
}

impl CostClass {
    pub const KNOWN: [CostClass; 3] = [CostClass::Low, CostClass::Medium, CostClass::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CostClass::Low => "low",
            CostClass::Medium => "medium",
            CostClass::High => "high",
            CostClass::Unknown => "unknown",
        }
    }
}

/// Class of a single cost value.
pub fn classify(cost: Option<f32>) -> CostClass {
    match cost {
        Some(c) if c.is_finite() => {
            let c = c as f64;
            if c < LOW_MEDIUM {
                CostClass::Low
            } else if c < MEDIUM_HIGH {
                CostClass::Medium
            } else {
                CostClass::High
            }
        }
        _ => CostClass::Unknown,
    }
}

/// Per-pixel optional cost image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostImage {
    pub width: u32,
    pub height: u32,
    pub costs: Vec<Option<f32>>,
}

impl CostImage {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            costs: vec![None; width as usize * height as usize],
        }
    }

    pub fn known_count(&self) -> usize {
        self.costs.iter().filter(|c| c.is_some()).count()
    }

    pub fn get(&self, i: u32, j: u32) -> Option<f32> {
        self.costs[(j * self.width + i) as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMask {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<CostClass>,
}

pub fn discretize(img: &CostImage) -> ClassMask {
    ClassMask {
        width: img.width,
        height: img.height,
        classes: img.costs.iter().map(|c| classify(*c)).collect(),
    }
}

/// Fills unknown pixels bracketed by known pixels along their row and/or
/// column. Each bracketing pair gives a linear interpolant; when both axes
/// bracket the pixel, the two are blended with weights inversely
/// proportional to the bracket span. Unbracketed pixels stay unknown.
/// Images with fewer than four known pixels are returned unchanged.
pub fn fill_lidar_gaps(img: &CostImage) -> CostImage {
    if img.known_count() < 4 {
        return img.clone();
    }
    let (w, h) = (img.width as usize, img.height as usize);
    // Nearest known index to the left/right in each row, above/below in
    // each column.
    let mut left = vec![usize::MAX; w * h];
    let mut right = vec![usize::MAX; w * h];
    let mut up = vec![usize::MAX; w * h];
    let mut down = vec![usize::MAX; w * h];
    for y in 0..h {
        let mut last = usize::MAX;
        for x in 0..w {
            left[y * w + x] = last;
            if img.costs[y * w + x].is_some() {
                last = x;
            }
        }
        last = usize::MAX;
        for x in (0..w).rev() {
            right[y * w + x] = last;
            if img.costs[y * w + x].is_some() {
                last = x;
            }
        }
    }
    for x in 0..w {
        let mut last = usize::MAX;
        for y in 0..h {
            up[y * w + x] = last;
            if img.costs[y * w + x].is_some() {
                last = y;
            }
        }
        last = usize::MAX;
        for y in (0..h).rev() {
            down[y * w + x] = last;
            if img.costs[y * w + x].is_some() {
                last = y;
            }
        }
    }
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if img.costs[i].is_some() {
                continue;
            }
            let along = |a: usize, b: usize, pos: usize, at: &dyn Fn(usize) -> f64| -> Option<(f64, f64)> {
                if a == usize::MAX || b == usize::MAX {
                    return None;
                }
                let span = (b - a) as f64;
                let t = (pos - a) as f64 / span;
                Some((at(a) * (1.0 - t) + at(b) * t, span))
            };
            let row = along(left[i], right[i], x, &|xx| img.costs[y * w + xx].unwrap() as f64);
            let col = along(up[i], down[i], y, &|yy| img.costs[yy * w + x].unwrap() as f64);
            out.costs[i] = match (row, col) {
                (Some((a, sa)), Some((b, sb))) => Some(((a / sa + b / sb) / (1.0 / sa + 1.0 / sb)) as f32),
                (Some((a, _)), None) | (None, Some((a, _))) => Some(a as f32),
                (None, None) => None,
            };
        }
    }
    out
}

/// 4×4 confusion counts, `[gt][pred]`, over pixels inside `region`.
pub fn confusion(pred: &ClassMask, gt: &ClassMask, region: &[bool]) -> [[u64; 4]; 4] {
    let mut m = [[0u64; 4]; 4];
    for ((p, g), r) in pred.classes.iter().zip(&gt.classes).zip(region) {
        if *r {
            m[g.index()][p.index()] += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub region: String,
    /// IoU for LOW, MEDIUM, HIGH; `None` for classes absent from gt.
    pub per_class: [Option<f64>; 3],
    pub miou: f64,
    /// Region pixels with known ground truth.
    pub pixels: u64,
}

/// IoU from confusion counts. Ground-truth UNKNOWN rows are ignored.
pub fn iou_from_confusion(m: &[[u64; 4]; 4], region: &str) -> Result<IoUReport> {
    let pixels: u64 = (0..3).map(|g| m[g].iter().sum::<u64>()).sum();
    if pixels == 0 {
        return Err(Error::EmptyRegion);
    }
    let mut per_class = [None; 3];
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..3 {
        let gt_c: u64 = m[c].iter().sum();
        if gt_c == 0 {
            continue;
        }
        let tp = m[c][c];
        let pred_c: u64 = (0..3).map(|g| m[g][c]).sum();
        let union = gt_c + pred_c - tp;
        let iou = tp as f64 / union as f64;
        per_class[c] = Some(iou);
        sum += iou;
        n += 1;
    }
    Ok(IoUReport {
        region: region.to_string(),
        per_class,
        miou: sum / n as f64,
        pixels,
    })
}

pub fn miou(pred: &ClassMask, gt: &ClassMask, region: &[bool], tag: &str) -> Result<IoUReport> {
    if pred.classes.len() != gt.classes.len() || region.len() != gt.classes.len() {
        return Err(Error::InvalidInput("mask sizes differ".into()));
    }
    iou_from_confusion(&confusion(pred, gt, region), tag)
}

/// Evaluation regions for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Regions {
    /// Range beyond `near` where every compared method has a label.
    pub beyond: Vec<bool>,
    /// Top-half rows minus sky.
    pub top_half: Vec<bool>,
}

/// Builds both regions from ground-truth range and sky channels.
pub fn region_masks(
    width: u32,
    height: u32,
    range: &[f32],
    sky: &[bool],
    methods: &[&CostImage],
    near: f64,
) -> Regions {
    let n = width as usize * height as usize;
    let half = (height / 2) as usize * width as usize;
    let mut beyond = vec![false; n];
    let mut top_half = vec![false; n];
    for i in 0..half {
        top_half[i] = !sky[i];
        beyond[i] = !sky[i] && range[i] as f64 > near && methods.iter().all(|m| m.costs[i].is_some());
    }
    Regions { beyond, top_half }
}
