use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::grid::{Dims, SemanticLabelGrid, VisibilityMask, VoxelFeatureGrid, FREE, ROAD};
use crate::scene::visibility::raycast_visibility;

const BUILDING: u16 = 3;
const PLACEMENT_RETRIES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub dims: Dims,
    pub voxel_size_m: f64,
    /// Includes class 0 ("free").
    pub num_classes: usize,
    pub channels: usize,
    pub num_boxes: usize,
    pub wall_probability: f64,
    pub noise_sigma: f64,
    pub ego: [usize; 3],
    /// Seed for the per-class feature prototypes.
    pub prototype_seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 4],
            voxel_size_m: 0.4,
            num_classes: 6,
            channels: 8,
            num_boxes: 10,
            wall_probability: 0.5,
            noise_sigma: 0.4,
            ego: [16, 16, 1],
            prototype_seed: 0x5EED0C,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::contract(format!("scene dims must all be >= 2, got {:?}", self.dims)));
        }
        if (0..3).any(|a| self.ego[a] >= self.dims[a]) {
            return Err(Error::contract(format!(
                "ego {:?} outside grid {:?}",
                self.ego, self.dims
            )));
        }
        if self.num_classes < 2 || self.num_classes > u16::MAX as usize {
            return Err(Error::contract(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if !(self.voxel_size_m > 0.0) {
            return Err(Error::contract("voxel_size_m must be positive"));
        }
        if self.channels == 0 {
            return Err(Error::contract("channels must be positive"));
        }
        if !(0.0..=1.0).contains(&self.wall_probability) {
            return Err(Error::contract("wall_probability must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::contract("noise_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// One synthetic frame: ground truth, what the observer sees, and its features.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub voxel_size_m: f64,
    pub labels: SemanticLabelGrid,
    pub features: VoxelFeatureGrid,
    pub visibility: VisibilityMask,
    /// Boxes that could not be placed within the retry budget.
    pub boxes_skipped: usize,
}

/// Per-class prototype feature vectors: a scaled one-hot direction plus a
/// small seeded offset, so classes stay well separated for any channel count.
pub fn class_prototypes(num_classes: usize, channels: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = Normal::new(0.0, 0.25).expect("valid sigma");
    (0..num_classes)
        .map(|k| {
            (0..channels)
                .map(|j| {
                    let hot = if j == k % channels { 1.5 } else { 0.0 };
                    // Classes that wrap onto the same channel get opposite signs.
                    let sign = if (k / channels).is_multiple_of(2) { 1.0 } else { -1.0 };
                    sign * hot + offset.sample(&mut rng)
                })
                .collect()
        })
        .collect()
}

/// Features as seen by the sensor: `prototype[label] + N(0, σ²)` at visible
/// voxels that survive an independent per-voxel drop with probability
/// `drop_ratio`, zeros everywhere else.
pub fn observe_features(
    labels: &SemanticLabelGrid,
    visibility: &VisibilityMask,
    prototypes: &[Vec<f64>],
    noise_sigma: f64,
    drop_ratio: f64,
    seed: u64,
) -> Result<VoxelFeatureGrid> {
    if !(0.0..=1.0).contains(&drop_ratio) {
        return Err(Error::contract(format!("drop_ratio {drop_ratio} outside [0, 1]")));
    }
    if prototypes.len() != labels.num_classes() {
        return Err(Error::contract(format!(
            "{} prototypes for {} classes",
            prototypes.len(),
            labels.num_classes()
        )));
    }
    if visibility.dims() != labels.dims() {
        return Err(Error::Shape {
            op: "observe_features",
            lhs: labels.dims().to_vec(),
            rhs: visibility.dims().to_vec(),
        });
    }
    let channels = prototypes.first().map_or(0, Vec::len);
    if prototypes.iter().any(|p| p.len() != channels) || channels == 0 {
        return Err(Error::contract("prototypes must share one positive length"));
    }
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).map_err(|e| Error::contract(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = VoxelFeatureGrid::zeros(labels.dims(), channels);
    for (i, (&label, &vis)) in labels.labels().iter().zip(visibility.as_slice()).enumerate() {
        let dropped = rng.random::<f64>() < drop_ratio;
        if !vis || dropped {
            continue;
        }
        let proto = &prototypes[label as usize];
        for (f, p) in grid.voxel_mut(i).iter_mut().zip(proto) {
            *f = p + if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        }
    }
    Ok(grid)
}

#[derive(Clone, Copy, Debug)]
struct Footprint {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Footprint {
    fn overlaps_padded(&self, o: &Footprint) -> bool {
        // One-voxel gap between objects.
        self.x0 < o.x0 + o.w + 1 && o.x0 < self.x0 + self.w + 1 && self.y0 < o.y0 + o.h + 1 && o.y0 < self.y0 + self.h + 1
    }

    fn contains_padded(&self, x: usize, y: usize, pad: usize) -> bool {
        x + pad >= self.x0 && x < self.x0 + self.w + pad && y + pad >= self.y0 && y < self.y0 + self.h + pad
    }
}

/// `(min footprint, max footprint, min height, max height)` for an object class.
fn class_shape(spec: &SceneSpec, class: u16) -> (usize, usize, usize, usize) {
    let zmax = spec.dims[2];
    if spec.num_classes == 6 {
        match class {
            2 => (2, 4, 2, 2),        // car
            3 => (3, 7, zmax, zmax),  // building
            4 => (1, 8, 1, 1),        // sidewalk
            _ => (2, 3, 1, 3),        // vegetation
        }
    } else {
        (2, 5, 1, zmax)
    }
}

fn try_place(
    rng: &mut ChaCha8Rng,
    spec: &SceneSpec,
    placed: &[Footprint],
    (wmin, wmax): (usize, usize),
    (hmin, hmax): (usize, usize),
) -> Option<Footprint> {
    let [dx, dy, _] = spec.dims;
    for _ in 0..PLACEMENT_RETRIES {
        let w = rng.random_range(wmin..=wmax).min(dx);
        let h = rng.random_range(hmin..=hmax).min(dy);
        let fp = Footprint {
            x0: rng.random_range(0..=dx - w),
            y0: rng.random_range(0..=dy - h),
            w,
            h,
        };
        if fp.contains_padded(spec.ego[0], spec.ego[1], 2) {
            continue;
        }
        if placed.iter().any(|p| fp.overlaps_padded(p)) {
            continue;
        }
        return Some(fp);
    }
    None
}

/// Ground-truth labels only: road plane at z = 0, non-overlapping object
/// boxes, optional wall slabs. Returns the labels and the number of boxes
/// that could not be placed.
pub fn generate_labels(spec: &SceneSpec, seed: u64) -> Result<(SemanticLabelGrid, usize)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [dx, dy, dz] = spec.dims;
    let mut labels = SemanticLabelGrid::filled(spec.dims, spec.num_classes, FREE);
    let road = if spec.num_classes > ROAD as usize { ROAD } else { FREE };
    for x in 0..dx {
        for y in 0..dy {
            labels.set(x, y, 0, road);
        }
    }

    let mut placed = Vec::new();
    let mut skipped = 0;
    let object_classes: Vec<u16> = (2..spec.num_classes as u16).collect();
    let wall_class = if spec.num_classes == 6 { BUILDING } else { (spec.num_classes - 1) as u16 };

    // Walls first so that they get the long free stretches they need.
    for _ in 0..2 {
        if object_classes.is_empty() || !rng.random_bool(spec.wall_probability) {
            continue;
        }
        let long = (dx.min(dy) / 4).max(1)..=(dx.min(dy) / 2).max(1);
        let length = rng.random_range(long);
        let (wr, hr) = if rng.random_bool(0.5) {
            ((length, length), (1, 1))
        } else {
            ((1, 1), (length, length))
        };
        match try_place(&mut rng, spec, &placed, wr, hr) {
            Some(fp) => {
                fill_box(&mut labels, fp, dz, wall_class);
                placed.push(fp);
            }
            None => skipped += 1,
        }
    }

    for _ in 0..spec.num_boxes {
        if object_classes.is_empty() {
            skipped += 1;
            continue;
        }
        let class = object_classes[rng.random_range(0..object_classes.len())];
        let (fmin, fmax, zmin, zmax) = class_shape(spec, class);
        let height = rng.random_range(zmin..=zmax).min(dz).max(1);
        let along = rng.random_bool(0.5);
        let (wr, hr) = if spec.num_classes == 6 && class == 4 {
            // Sidewalk strips are long and narrow.
            if along {
                ((4, fmax), (1, 2))
            } else {
                ((1, 2), (4, fmax))
            }
        } else {
            ((fmin, fmax), (fmin, fmax))
        };
        match try_place(&mut rng, spec, &placed, wr, hr) {
            Some(fp) => {
                fill_box(&mut labels, fp, height, class);
                placed.push(fp);
            }
            None => skipped += 1,
        }
    }
    Ok((labels, skipped))
}

fn fill_box(labels: &mut SemanticLabelGrid, fp: Footprint, height: usize, class: u16) {
    for x in fp.x0..fp.x0 + fp.w {
        for y in fp.y0..fp.y0 + fp.h {
            for z in 0..height {
                labels.set(x, y, z, class);
            }
        }
    }
}

/// Full scene: labels, ray-cast visibility from the ego voxel and noisy
/// observed features. Fully determined by `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    let (labels, boxes_skipped) = generate_labels(spec, seed)?;
    if boxes_skipped > 0 {
        log::warn!("scene {seed}: {boxes_skipped} boxes could not be placed");
    }
    let visibility = raycast_visibility(&labels, spec.ego)?;
    let prototypes = class_prototypes(spec.num_classes, spec.channels, spec.prototype_seed);
    let feature_seed = seed ^ 0x9E37_79B9_7F4A_7C15;
    let features = observe_features(&labels, &visibility, &prototypes, spec.noise_sigma, 0.0, feature_seed)?;
    Ok(Scene {
        voxel_size_m: spec.voxel_size_m,
        labels,
        features,
        visibility,
        boxes_skipped,
    })
}
