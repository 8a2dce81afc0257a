//! Terrain features and traversability cost from the voxel map.
//!
//! Per map column (an x/y cell at map resolution) we estimate:
//!
//! * ground height: the lowest dense voxel, with candidates rejected when
//!   they rise above a slope cone grown from their neighbors (box tops,
//!   canopy), then holes filled and noise smoothed by weighted Jacobi
//!   relaxation over the 4-neighborhood;
//! * object height `f_h`: tallest point in the column minus ground;
//! * slope `f_s`: gradient magnitude of the ground surface;
//! * planarity `f_p = 2(λ2 − λ3)/λ1` of the points near the ground.
//!
//! The features combine into a bimodal cost: 10 for obstacles at or above
//! `h_thresh`, otherwise `clamp(6 − w_p·f_p + w_s·f_s, 0, 6)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_range, Execution};
use crate::voxel::{Moments, VoxelMap, VoxelStats};

/// Tunables for feature extraction and the cost function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerrainConfig {
    /// Minimum points for a voxel to count as dense.
    pub density_threshold: u64,
    /// Obstacle height threshold, meters.
    pub h_thresh: f64,
    /// Slope clamp.
    pub s_max: f64,
    /// Planarity weight in the continuous branch.
    pub w_p: f64,
    /// Slope weight in the continuous branch.
    pub w_s: f64,
    /// Steepest ground the candidate filter accepts (rise/run).
    pub max_ground_grade: f64,
    /// Slack above the slope cone before a candidate is rejected, meters.
    pub ground_margin: f64,
    /// Holes are filled only when bracketed by ground within this many cells.
    pub fill_radius: usize,
    /// Relaxation stops once the largest per-sweep change drops below this.
    pub relax_tolerance: f64,
    pub relax_max_iterations: usize,
    /// Data-term weight for a column with `count_cap` or more points.
    pub data_weight: f64,
    pub count_cap: u64,
    /// Half-height of the band around the ground used for planarity, meters.
    pub planarity_band: f64,
    /// Planarity pools the band over a `(2r + 1)²` block of columns.
    pub planarity_radius: usize,
    /// Planarity is undefined when λ1 is at or below this.
    pub eigen_epsilon: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            density_threshold: 3,
            h_thresh: 1.0,
            s_max: 2.0,
            w_p: 3.0,
            w_s: 6.0,
            max_ground_grade: 0.8,
            ground_margin: 0.3,
            fill_radius: 12,
            relax_tolerance: 1e-3,
            relax_max_iterations: 100,
            data_weight: 8.0,
            count_cap: 12,
            planarity_band: 0.5,
            planarity_radius: 3,
            eigen_epsilon: 1e-12,
        }
    }
}

impl TerrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.density_threshold >= 1
            && self.h_thresh > 0.0
            && self.s_max > 0.0
            && self.w_p >= 0.0
            && self.w_s >= 0.0
            && self.max_ground_grade > 0.0
            && self.ground_margin >= 0.0
            && self.relax_tolerance > 0.0
            && self.data_weight > 0.0
            && self.count_cap >= 1
            && self.planarity_band > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid terrain config {self:?}")))
        }
    }
}

/// Planarity `2(λ2 − λ3)/λ1`, in [0, 2] for ordered eigenvalues. `None`
/// when λ1 is at or below `epsilon`.
pub fn planarity(l1: f64, l2: f64, l3: f64, epsilon: f64) -> Option<f64> {
    if !(l1 > epsilon) {
        return None;
    }
    Some((2.0 * (l2 - l3) / l1).clamp(0.0, 2.0))
}

/// Traversability cost. An undefined slope counts as flat; undefined
/// planarity leaves non-obstacle cells unlabeled.
pub fn traversability_cost(f_h: f64, f_p: Option<f64>, f_s: Option<f64>, cfg: &TerrainConfig) -> Option<f32> {
    if f_h >= cfg.h_thresh {
        return Some(10.0);
    }
    let f_p = f_p?;
    let f_s = f_s.unwrap_or(0.0);
    Some((6.0 - cfg.w_p * f_p + cfg.w_s * f_s).clamp(0.0, 6.0) as f32)
}

/// Dense row-major 2D grid aligned with map columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    /// Column key of cell (0, 0).
    pub x0: i32,
    pub y0: i32,
    pub nx: usize,
    pub ny: usize,
    pub resolution: f64,
    pub cells: Vec<T>,
}

impl<T: Clone> Grid<T> {
    fn filled(x0: i32, y0: i32, nx: usize, ny: usize, resolution: f64, v: T) -> Self {
        Self {
            x0,
            y0,
            nx,
            ny,
            resolution,
            cells: vec![v; nx * ny],
        }
    }
}

impl<T> Grid<T> {
    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Cell for a column key, if inside the grid.
    pub fn cell_of(&self, kx: i32, ky: i32) -> Option<usize> {
        let ix = kx - self.x0;
        let iy = ky - self.y0;
        (ix >= 0 && iy >= 0 && (ix as usize) < self.nx && (iy as usize) < self.ny)
            .then(|| self.index(ix as usize, iy as usize))
    }

    pub fn get_key(&self, kx: i32, ky: i32) -> Option<&T> {
        self.cell_of(kx, ky).map(|i| &self.cells[i])
    }

    fn same_shape<U: Clone>(&self, v: U) -> Grid<U> {
        Grid::filled(self.x0, self.y0, self.nx, self.ny, self.resolution, v)
    }
}

/// Ground surface estimate plus relaxation diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundEstimate {
    pub height: Grid<Option<f64>>,
    /// Largest height change of each relaxation sweep.
    pub sweep_changes: Vec<f64>,
    /// Cells whose candidate was rejected by the slope cone.
    pub rejected: usize,
}

/// Terrain features for one column.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureCell {
    pub ground: Option<f64>,
    pub f_h: Option<f64>,
    pub f_s: Option<f64>,
    pub f_p: Option<f64>,
}

pub type FeatureGrid = Grid<FeatureCell>;
pub type CostGrid = Grid<Option<f32>>;

struct Column {
    /// Occupied voxels sorted by z key.
    voxels: Vec<(i32, VoxelStats)>,
}

fn columns(map: &VoxelMap) -> Option<Grid<Option<Column>>> {
    if map.is_empty() {
        return None;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (i32::MAX, i32::MAX, i32::MIN, i32::MIN);
    for (k, _) in map.iter() {
        x0 = x0.min(k[0]);
        y0 = y0.min(k[1]);
        x1 = x1.max(k[0]);
        y1 = y1.max(k[1]);
    }
    let nx = (x1 - x0 + 1) as usize;
    let ny = (y1 - y0 + 1) as usize;
    let mut grid: Grid<Option<Column>> = Grid {
        x0,
        y0,
        nx,
        ny,
        resolution: map.resolution(),
        cells: (0..nx * ny).map(|_| None).collect(),
    };
    for (k, v) in map.iter() {
        let i = grid.cell_of(k[0], k[1]).expect("inside bbox");
        grid.cells[i]
            .get_or_insert_with(|| Column { voxels: Vec::new() })
            .voxels
            .push((k[2], *v));
    }
    for c in grid.cells.iter_mut().flatten() {
        c.voxels.sort_unstable_by_key(|(z, _)| *z);
    }
    Some(grid)
}

/// Merged moments of a column's voxels with z keys in `lo..=hi`, relative
/// to voxel `lo`.
fn band_moments(col: &Column, lo: i32, hi: i32) -> Moments {
    let mut m = Moments::default();
    add_band(&mut m, col, lo, hi, [0, 0]);
    m
}

fn add_band(m: &mut Moments, col: &Column, lo: i32, hi: i32, offset: [i32; 2]) {
    for (z, v) in col.voxels.iter().filter(|(z, _)| (lo..=hi).contains(z)) {
        m.add_shifted(&v.moments, [offset[0], offset[1], z - lo]);
    }
}

fn mean_z(m: &Moments, base_z: f64, resolution: f64) -> f64 {
    let unit = resolution / (1u64 << 28) as f64;
    base_z + m.sum[2] as f64 * unit / m.count as f64
}

/// Ground candidate per column: mean height of the lowest dense voxel and
/// the voxel directly above it, with the point count as data weight.
fn ground_candidates(cols: &Grid<Option<Column>>, cfg: &TerrainConfig, exec: Execution) -> Grid<Option<(f64, u64)>> {
    let res = cols.resolution;
    let cells = map_range(exec, cols.cells.len(), |i| {
        let col = cols.cells[i].as_ref()?;
        let (z, _) = col.voxels.iter().find(|(_, v)| v.count() >= cfg.density_threshold)?;
        let m = band_moments(col, *z, z + 1);
        Some((mean_z(&m, *z as f64 * res, res), m.count))
    });
    Grid {
        cells,
        ..cols.same_shape(None)
    }
}

/// Lower slope-cone envelope `min_j (c_j + g·d_ij)` over the 8-connected
/// chamfer metric, by a forward and a backward raster pass.
fn cone_envelope(cand: &Grid<Option<(f64, u64)>>, grade: f64) -> Vec<f64> {
    let (nx, ny) = (cand.nx, cand.ny);
    let s = grade * cand.resolution;
    let d = s * std::f64::consts::SQRT_2;
    let mut f: Vec<f64> = cand.cells.iter().map(|c| c.map_or(f64::INFINITY, |c| c.0)).collect();
    let fwd: [(isize, isize, f64); 4] = [(-1, 0, s), (-1, -1, d), (0, -1, s), (1, -1, d)];
    let bwd: [(isize, isize, f64); 4] = [(1, 0, s), (1, 1, d), (0, 1, s), (-1, 1, d)];
    let relax = |f: &mut Vec<f64>, x: usize, y: usize, mask: &[(isize, isize, f64); 4]| {
        let i = y * nx + x;
        for &(dx, dy, w) in mask {
            let (xx, yy) = (x as isize + dx, y as isize + dy);
            if xx >= 0 && yy >= 0 && (xx as usize) < nx && (yy as usize) < ny {
                let v = f[yy as usize * nx + xx as usize] + w;
                if v < f[i] {
                    f[i] = v;
                }
            }
        }
    };
    for y in 0..ny {
        for x in 0..nx {
            relax(&mut f, x, y, &fwd);
        }
    }
    for y in (0..ny).rev() {
        for x in (0..nx).rev() {
            relax(&mut f, x, y, &bwd);
        }
    }
    f
}

/// Estimates the ground height grid.
pub fn estimate_ground(map: &VoxelMap, cfg: &TerrainConfig) -> Option<GroundEstimate> {
    estimate_ground_with(map, cfg, Execution::default())
}

pub fn estimate_ground_with(map: &VoxelMap, cfg: &TerrainConfig, exec: Execution) -> Option<GroundEstimate> {
    let cols = columns(map)?;
    Some(ground_from_columns(&cols, cfg, exec))
}

fn ground_from_columns(cols: &Grid<Option<Column>>, cfg: &TerrainConfig, exec: Execution) -> GroundEstimate {
    let mut cand = ground_candidates(cols, cfg, exec);
    let (nx, ny) = (cand.nx, cand.ny);
    let res = cand.resolution;

    // Reject candidates that poke above the cone grown from their neighbors.
    let env = cone_envelope(&cand, cfg.max_ground_grade);
    let s = cfg.max_ground_grade * res;
    let d = s * std::f64::consts::SQRT_2;
    let reject: Vec<bool> = map_range(exec, nx * ny, |i| {
        let Some((c, _)) = cand.cells[i] else {
            return false;
        };
        let (x, y) = ((i % nx) as isize, (i / nx) as isize);
        let mut lowest = f64::INFINITY;
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (xx, yy) = (x + dx, y + dy);
                if xx >= 0 && yy >= 0 && (xx as usize) < nx && (yy as usize) < ny {
                    let w = if dx != 0 && dy != 0 { d } else { s };
                    lowest = lowest.min(env[yy as usize * nx + xx as usize] + w);
                }
            }
        }
        c > lowest + cfg.ground_margin
    });
    let rejected = reject.iter().filter(|r| **r).count();
    for (c, r) in cand.cells.iter_mut().zip(&reject) {
        if *r {
            *c = None;
        }
    }

    // Interpolation domain: candidates plus holes bracketed by candidates
    // along a row or a column within `fill_radius` cells.
    let r = cfg.fill_radius;
    let nearest = |x: usize, y: usize, dx: isize, dy: isize| -> Option<(usize, f64)> {
        let (mut xx, mut yy) = (x as isize, y as isize);
        for step in 1..=r {
            xx += dx;
            yy += dy;
            if xx < 0 || yy < 0 || xx as usize >= nx || yy as usize >= ny {
                return None;
            }
            if let Some((h, _)) = cand.cells[yy as usize * nx + xx as usize] {
                return Some((step, h));
            }
        }
        None
    };
    let init: Vec<Option<f64>> = map_range(exec, nx * ny, |i| {
        let (x, y) = (i % nx, i / nx);
        if let Some((h, _)) = cand.cells[i] {
            return Some(h);
        }
        let lerp = |a: Option<(usize, f64)>, b: Option<(usize, f64)>| match (a, b) {
            (Some((da, ha)), Some((db, hb))) => Some(((ha * db as f64 + hb * da as f64) / (da + db) as f64, da + db)),
            _ => None,
        };
        let h = lerp(nearest(x, y, -1, 0), nearest(x, y, 1, 0));
        let v = lerp(nearest(x, y, 0, -1), nearest(x, y, 0, 1));
        match (h, v) {
            (Some((a, sa)), Some((b, sb))) => Some((a * sb as f64 + b * sa as f64) / (sa + sb) as f64),
            (Some((a, _)), None) | (None, Some((a, _))) => Some(a),
            (None, None) => None,
        }
    });

    // Weighted Jacobi relaxation over the domain.
    let weights: Vec<f64> = cand
        .cells
        .iter()
        .map(|c| c.map_or(0.0, |(_, n)| cfg.data_weight * n.min(cfg.count_cap) as f64 / cfg.count_cap as f64))
        .collect();
    let mut h = init;
    let mut sweep_changes = Vec::new();
    for _ in 0..cfg.relax_max_iterations {
        let next: Vec<Option<f64>> = map_range(exec, nx * ny, |i| {
            let cur = h[i]?;
            let (x, y) = (i % nx, i / nx);
            let mut num = weights[i] * cand.cells[i].map_or(0.0, |c| c.0);
            let mut den = weights[i];
            let mut push = |j: usize| {
                if let Some(v) = h[j] {
                    num += v;
                    den += 1.0;
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < nx {
                push(i + 1);
            }
            if y > 0 {
                push(i - nx);
            }
            if y + 1 < ny {
                push(i + nx);
            }
            Some(if den > 0.0 { num / den } else { cur })
        });
        let change = h
            .iter()
            .zip(&next)
            .filter_map(|(a, b)| Some((a.as_ref()? - b.as_ref()?).abs()))
            .fold(0.0f64, f64::max);
        h = next;
        sweep_changes.push(change);
        if change < cfg.relax_tolerance {
            break;
        }
    }

    GroundEstimate {
        height: Grid {
            cells: h,
            ..cand.same_shape(None)
        },
        sweep_changes,
        rejected,
    }
}

/// Object height: tallest point in each column minus ground, floored at 0.
pub fn object_height(map: &VoxelMap, ground: &Grid<Option<f64>>) -> Grid<Option<f64>> {
    let mut out = ground.same_shape(None);
    let mut top = ground.same_shape(f64::NEG_INFINITY);
    for (k, v) in map.iter() {
        if let Some(i) = top.cell_of(k[0], k[1]) {
            top.cells[i] = top.cells[i].max(v.max_z);
        }
    }
    for i in 0..out.cells.len() {
        if let (Some(g), t) = (ground.cells[i], top.cells[i]) {
            if t.is_finite() {
                out.cells[i] = Some((t - g).max(0.0));
            }
        }
    }
    out
}

/// Ground slope magnitude by central differences (one-sided at domain
/// edges), clamped to `s_max`. Undefined for cells with no axis neighbor.
pub fn slope(ground: &Grid<Option<f64>>, s_max: f64) -> Grid<Option<f64>> {
    let (nx, ny) = (ground.nx, ground.ny);
    let res = ground.resolution;
    let at = |x: isize, y: isize| -> Option<f64> {
        if x < 0 || y < 0 || x as usize >= nx || y as usize >= ny {
            None
        } else {
            ground.cells[y as usize * nx + x as usize]
        }
    };
    let axis = |x: isize, y: isize, dx: isize, dy: isize, c: f64| -> Option<f64> {
        match (at(x - dx, y - dy), at(x + dx, y + dy)) {
            (Some(a), Some(b)) => Some((b - a) / (2.0 * res)),
            (None, Some(b)) => Some((b - c) / res),
            (Some(a), None) => Some((c - a) / res),
            (None, None) => None,
        }
    };
    let mut out = ground.same_shape(None);
    for y in 0..ny as isize {
        for x in 0..nx as isize {
            let Some(c) = at(x, y) else { continue };
            let gx = axis(x, y, 1, 0, c);
            let gy = axis(x, y, 0, 1, c);
            if gx.is_none() && gy.is_none() {
                continue;
            }
            let g = gx.unwrap_or(0.0).hypot(gy.unwrap_or(0.0));
            out.cells[y as usize * nx + x as usize] = Some(g.min(s_max));
        }
    }
    out
}

/// Computes all features for the map.
pub fn extract_features(map: &VoxelMap, cfg: &TerrainConfig) -> Option<FeatureGrid> {
    extract_features_with(map, cfg, Execution::default())
}

pub fn extract_features_with(map: &VoxelMap, cfg: &TerrainConfig, exec: Execution) -> Option<FeatureGrid> {
    let cols = columns(map)?;
    let ground = ground_from_columns(&cols, cfg, exec).height;
    let f_h = object_height(map, &ground);
    let f_s = slope(&ground, cfg.s_max);
    let res = map.resolution();
    let band = (cfg.planarity_band / res).round() as i32;
    let r = cfg.planarity_radius as i32;
    let cells = map_range(exec, cols.cells.len(), |i| {
        let g = ground.cells[i];
        let f_p = match (cols.cells[i].as_ref(), g) {
            (Some(_), Some(g)) => {
                let gz = (g / res).floor() as i32;
                let (ix, iy) = ((i % cols.nx) as i32, (i / cols.nx) as i32);
                let mut m = Moments::default();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (jx, jy) = (ix + dx, iy + dy);
                        if jx < 0 || jy < 0 || jx >= cols.nx as i32 || jy >= cols.ny as i32 {
                            continue;
                        }
                        if let Some(col) = &cols.cells[cols.index(jx as usize, jy as usize)] {
                            add_band(&mut m, col, gz - band, gz + band, [dx, dy]);
                        }
                    }
                }
                m.eigenvalues(res)
                    .ok()
                    .and_then(|[l1, l2, l3]| planarity(l1, l2, l3, cfg.eigen_epsilon))
            }
            _ => None,
        };
        FeatureCell {
            ground: g,
            f_h: f_h.cells[i],
            f_s: f_s.cells[i],
            f_p,
        }
    });
    Some(Grid {
        cells,
        ..ground.same_shape(FeatureCell::default())
    })
}

/// Applies the cost function to every cell.
pub fn cost_grid(features: &FeatureGrid, cfg: &TerrainConfig) -> CostGrid {
    let mut out = features.same_shape(None);
    for (o, f) in out.cells.iter_mut().zip(&features.cells) {
        *o = f.f_h.and_then(|h| traversability_cost(h, f.f_p, f.f_s, cfg));
    }
    out
}

/// Labels the map in place: every occupied voxel receives its column's
/// cost (or none). Returns the cost grid.
pub fn label_map(map: &mut VoxelMap, cfg: &TerrainConfig) -> Option<CostGrid> {
    label_map_with(map, cfg, Execution::default())
}

pub fn label_map_with(map: &mut VoxelMap, cfg: &TerrainConfig, exec: Execution) -> Option<CostGrid> {
    let features = extract_features_with(map, cfg, exec)?;
    let costs = cost_grid(&features, cfg);
    let keys = map.sorted_keys();
    for k in keys {
        let c = costs.get_key(k[0], k[1]).copied().flatten();
        if let Some(v) = map.get_mut(&k) {
            v.cost = c;
        }
    }
    Some(costs)
}

/// Writes a grid as an 8-bit grayscale PNG (row 0 = lowest y key). Values
/// map linearly from `[lo, hi]` to `[0, 250]`; undefined cells are 255.
pub fn write_grid_png(path: &Path, grid: &Grid<Option<f64>>, lo: f64, hi: f64) -> Result<()> {
    let mut img = image::GrayImage::new(grid.nx as u32, grid.ny as u32);
    for y in 0..grid.ny {
        for x in 0..grid.nx {
            let v = grid.cells[grid.index(x, y)];
            let px = match v {
                Some(v) => (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 250.0).round() as u8,
                None => 255,
            };
            img.put_pixel(x as u32, y as u32, image::Luma([px]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Writes a cost grid with the documented `cost * 25` mapping.
pub fn write_cost_png(path: &Path, costs: &CostGrid) -> Result<()> {
    let g = Grid {
        cells: costs.cells.iter().map(|c| c.map(f64::from)).collect(),
        ..costs.same_shape(None)
    };
    write_grid_png(path, &g, 0.0, 10.0)
}
