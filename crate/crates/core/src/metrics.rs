//! Voxel mIoU, first-hit ray casting and RayIoU, plus the key/value metrics
//! document written by `eval`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scene::{class_name, SemanticLabelGrid, FREE};

pub const RAY_THRESHOLDS_M: [f64; 3] = [1.0, 2.0, 4.0];
/// Elevation half-range of the default ray fan.
pub const MAX_ELEVATION_RAD: f64 = PI / 6.0;

fn same_dims(pred: &SemanticLabelGrid, gt: &SemanticLabelGrid) -> Result<()> {
    if pred.dims() != gt.dims() || pred.num_classes() != gt.num_classes() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: pred.dims().to_vec(),
            rhs: gt.dims().to_vec(),
        });
    }
    Ok(())
}

/// Per-class voxel counts, summable over scenes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelCounts {
    pub intersection: Vec<u64>,
    pub pred: Vec<u64>,
    pub gt: Vec<u64>,
}

impl VoxelCounts {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            pred: vec![0; num_classes],
            gt: vec![0; num_classes],
        }
    }

    pub fn from_grids(pred: &SemanticLabelGrid, gt: &SemanticLabelGrid) -> Result<Self> {
        same_dims(pred, gt)?;
        let mut c = Self::new(gt.num_classes());
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            c.pred[p as usize] += 1;
            c.gt[g as usize] += 1;
            if p == g {
                c.intersection[g as usize] += 1;
            }
        }
        Ok(c)
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.pred.iter_mut().zip(&other.pred) {
            *a += b;
        }
        for (a, b) in self.gt.iter_mut().zip(&other.gt) {
            *a += b;
        }
    }

    /// IoU of each non-free class present in prediction or ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.gt.len())
            .map(|c| {
                let union = self.pred[c] + self.gt[c] - self.intersection[c];
                (c != FREE as usize && union > 0).then(|| self.intersection[c] as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over included classes; 1.0 when no semantic class occurs at all.
    pub fn miou(&self) -> f64 {
        mean_present(&self.per_class_iou())
    }
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassIou {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn miou(pred: &SemanticLabelGrid, gt: &SemanticLabelGrid) -> Result<ClassIou> {
    let c = VoxelCounts::from_grids(pred, gt)?;
    Ok(ClassIou {
        per_class: c.per_class_iou(),
        miou: c.miou(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayHit {
    pub hit: bool,
    pub class_id: u16,
    pub distance_m: f64,
}

impl RayHit {
    const MISS: RayHit = RayHit {
        hit: false,
        class_id: FREE,
        distance_m: 0.0,
    };
}

/// Amanatides–Woo traversal in index space, where voxel `i` spans `[i, i+1)`.
/// Axes whose boundary crossings coincide are stepped together, so a ray
/// through an exact edge or corner never visits the cells it only touches.
pub fn dda_first_hit(grid: &SemanticLabelGrid, origin: [f64; 3], dir: [f64; 3], voxel_size_m: f64) -> Result<RayHit> {
    let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::contract("ray direction must be nonzero"));
    }
    let dims = grid.dims();
    if (0..3).any(|a| !(origin[a] >= 0.0 && origin[a] < dims[a] as f64)) {
        return Err(Error::contract(format!("ray origin {origin:?} outside grid {dims:?}")));
    }
    let d = dir.map(|v| v / norm);
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        cell[a] = origin[a].floor() as i64;
        if d[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (cell[a] as f64 + 1.0 - origin[a]) / d[a];
            t_delta[a] = 1.0 / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (cell[a] as f64 - origin[a]) / d[a];
            t_delta[a] = -1.0 / d[a];
        }
    }
    while let Some(class) = grid.get_signed(cell) {
        if class != FREE {
            let dist2: f64 = (0..3)
                .map(|a| {
                    let c = cell[a] as f64 + 0.5 - origin[a];
                    c * c
                })
                .sum();
            return Ok(RayHit {
                hit: true,
                class_id: class,
                distance_m: voxel_size_m * dist2.sqrt(),
            });
        }
        let t_min = t_max.iter().copied().fold(f64::INFINITY, f64::min);
        if !t_min.is_finite() {
            break;
        }
        let tol = 1e-12 * (1.0 + t_min);
        for a in 0..3 {
            if t_max[a] - t_min <= tol {
                cell[a] += step[a];
                t_max[a] += t_delta[a];
            }
        }
    }
    Ok(RayHit::MISS)
}

/// Evenly spaced azimuths crossed with elevations spread over
/// `[−MAX_ELEVATION_RAD, MAX_ELEVATION_RAD]` (a single elevation is level).
/// Azimuth varies fastest.
pub fn make_ray_set(n_azimuth: usize, n_elevation: usize) -> Result<Vec<[f64; 3]>> {
    if n_azimuth < 4 || n_elevation < 1 {
        return Err(Error::contract(format!(
            "ray set needs n_azimuth >= 4 and n_elevation >= 1, got {n_azimuth} x {n_elevation}"
        )));
    }
    let mut rays = Vec::with_capacity(n_azimuth * n_elevation);
    for e in 0..n_elevation {
        let el = if n_elevation == 1 {
            0.0
        } else {
            -MAX_ELEVATION_RAD + 2.0 * MAX_ELEVATION_RAD * e as f64 / (n_elevation - 1) as f64
        };
        for a in 0..n_azimuth {
            let az = 2.0 * PI * a as f64 / n_azimuth as f64;
            rays.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
        }
    }
    Ok(rays)
}

/// Per-threshold, per-class ray tallies, summable over scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct RayCounts {
    pub thresholds_m: Vec<f64>,
    /// `tp[threshold][class]`.
    pub tp: Vec<Vec<u64>>,
    pub pred: Vec<u64>,
    pub gt: Vec<u64>,
    pub rays_cast: u64,
    pub rays_hit: u64,
}

impl RayCounts {
    pub fn new(num_classes: usize, thresholds_m: &[f64]) -> Self {
        Self {
            thresholds_m: thresholds_m.to_vec(),
            tp: vec![vec![0; num_classes]; thresholds_m.len()],
            pred: vec![0; num_classes],
            gt: vec![0; num_classes],
            rays_cast: 0,
            rays_hit: 0,
        }
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.thresholds_m != other.thresholds_m || self.gt.len() != other.gt.len() {
            return Err(Error::contract("cannot merge ray counts with different layouts"));
        }
        for (a, b) in self.tp.iter_mut().zip(&other.tp) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.pred.iter_mut().zip(&other.pred).for_each(|(x, y)| *x += y);
        self.gt.iter_mut().zip(&other.gt).for_each(|(x, y)| *x += y);
        self.rays_cast += other.rays_cast;
        self.rays_hit += other.rays_hit;
        Ok(())
    }

    /// Class-mean RayIoU per threshold; 1.0 when neither grid produced a hit.
    pub fn scores(&self) -> Vec<f64> {
        self.tp
            .iter()
            .map(|tp| {
                let per_class: Vec<Option<f64>> = (0..self.gt.len())
                    .map(|c| {
                        let denom = self.pred[c] + self.gt[c] - tp[c];
                        (self.pred[c] + self.gt[c] > 0).then(|| tp[c] as f64 / denom as f64)
                    })
                    .collect();
                mean_present(&per_class)
            })
            .collect()
    }
}

pub fn ray_counts(
    pred: &SemanticLabelGrid,
    gt: &SemanticLabelGrid,
    origin: [f64; 3],
    rays: &[[f64; 3]],
    thresholds_m: &[f64],
    voxel_size_m: f64,
) -> Result<RayCounts> {
    same_dims(pred, gt)?;
    if rays.is_empty() {
        return Err(Error::contract("ray set is empty"));
    }
    let mut counts = RayCounts::new(gt.num_classes(), thresholds_m);
    for dir in rays {
        let g = dda_first_hit(gt, origin, *dir, voxel_size_m)?;
        let p = dda_first_hit(pred, origin, *dir, voxel_size_m)?;
        counts.rays_cast += 1;
        if g.hit {
            counts.rays_hit += 1;
            counts.gt[g.class_id as usize] += 1;
        }
        if p.hit {
            counts.pred[p.class_id as usize] += 1;
        }
        if g.hit && p.hit && g.class_id == p.class_id {
            let err = (p.distance_m - g.distance_m).abs();
            for (ti, tau) in thresholds_m.iter().enumerate() {
                if err <= *tau {
                    counts.tp[ti][g.class_id as usize] += 1;
                }
            }
        }
    }
    Ok(counts)
}

/// RayIoU for each threshold, in the order given.
pub fn rayiou(
    pred: &SemanticLabelGrid,
    gt: &SemanticLabelGrid,
    origin: [f64; 3],
    rays: &[[f64; 3]],
    thresholds_m: &[f64],
    voxel_size_m: f64,
) -> Result<Vec<f64>> {
    Ok(ray_counts(pred, gt, origin, rays, thresholds_m, voxel_size_m)?.scores())
}

/// Center of the voxel at `ego`, in index coordinates.
pub fn voxel_center(ego: [usize; 3]) -> [f64; 3] {
    ego.map(|v| v as f64 + 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `(class name, IoU)` for every non-free class; `None` when absent.
    pub per_class_iou: Vec<(String, Option<f64>)>,
    pub miou: f64,
    pub rayiou_1m: f64,
    pub rayiou_2m: f64,
    pub rayiou_4m: f64,
    pub rayiou_mean: f64,
    pub rays_cast: u64,
    pub rays_hit: u64,
}

impl MetricsReport {
    pub fn from_counts(voxels: &VoxelCounts, rays: &RayCounts) -> Result<Self> {
        if rays.thresholds_m != RAY_THRESHOLDS_M {
            return Err(Error::contract("report expects the 1/2/4 m thresholds"));
        }
        let k = voxels.gt.len();
        let ious = voxels.per_class_iou();
        let per_class_iou = (1..k).map(|c| (class_name(k, c), ious[c])).collect();
        let s = rays.scores();
        Ok(Self {
            per_class_iou,
            miou: voxels.miou(),
            rayiou_1m: s[0],
            rayiou_2m: s[1],
            rayiou_4m: s[2],
            rayiou_mean: (s[0] + s[1] + s[2]) / 3.0,
            rays_cast: rays.rays_cast,
            rays_hit: rays.rays_hit,
        })
    }

    /// `key = value` lines. `extra` entries come first, in the given order.
    pub fn to_document(&self, extra: &[(&str, String)]) -> String {
        let mut s = String::new();
        for (k, v) in extra {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "miou = {}", self.miou);
        for (name, iou) in &self.per_class_iou {
            if let Some(v) = iou {
                let _ = writeln!(s, "iou.{name} = {v}");
            }
        }
        let _ = writeln!(s, "rayiou.1m = {}", self.rayiou_1m);
        let _ = writeln!(s, "rayiou.2m = {}", self.rayiou_2m);
        let _ = writeln!(s, "rayiou.4m = {}", self.rayiou_4m);
        let _ = writeln!(s, "rayiou.mean = {}", self.rayiou_mean);
        let _ = writeln!(s, "rays.cast = {}", self.rays_cast);
        let _ = writeln!(s, "rays.hit = {}", self.rays_hit);
        s
    }
}

/// Parsed metrics document. Blank lines and `#` comments are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsDocument {
    pub entries: BTreeMap<String, String>,
}

impl MetricsDocument {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn number(&self, key: &str) -> Result<f64> {
        let raw = self
            .entries
            .get(key)
            .ok_or_else(|| Error::Config(format!("metrics key `{key}` missing")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("metrics key `{key}` has non-numeric value `{raw}`")))
    }
}
