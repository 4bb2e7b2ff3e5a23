use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Voxel lattice extents `(X, Y, Z)`.
pub type Dims = [usize; 3];

/// Class id reserved for empty space.
pub const FREE: u16 = 0;
pub const ROAD: u16 = 1;

pub(crate) fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub(crate) fn linear(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

/// Human-readable class names for the default six-class layout; other class
/// counts fall back to `class<i>`.
pub fn class_name(num_classes: usize, class: usize) -> String {
    const DEFAULT: [&str; 6] = ["free", "road", "car", "building", "sidewalk", "vegetation"];
    if num_classes == DEFAULT.len() {
        DEFAULT[class].to_string()
    } else if class == 0 {
        "free".to_string()
    } else {
        format!("class{class}")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticLabelGrid {
    dims: Dims,
    num_classes: usize,
    labels: Vec<u16>,
}

impl SemanticLabelGrid {
    pub fn filled(dims: Dims, num_classes: usize, class: u16) -> Self {
        Self {
            dims,
            num_classes,
            labels: vec![class; voxel_count(dims)],
        }
    }

    pub fn from_vec(dims: Dims, num_classes: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != voxel_count(dims) {
            return Err(Error::Shape {
                op: "SemanticLabelGrid::from_vec",
                lhs: dims.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::contract(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self {
            dims,
            num_classes,
            labels,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[linear(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, class: u16) {
        assert!((class as usize) < self.num_classes, "class {class} out of range");
        let i = linear(self.dims, x, y, z);
        self.labels[i] = class;
    }

    pub fn is_occupied(&self, x: usize, y: usize, z: usize) -> bool {
        self.get(x, y, z) != FREE
    }

    /// Voxel lookup for signed coordinates; `None` outside the grid.
    pub fn get_signed(&self, p: [i64; 3]) -> Option<u16> {
        let inside = (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a]);
        inside.then(|| self.get(p[0] as usize, p[1] as usize, p[2] as usize))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFeatureGrid {
    dims: Dims,
    channels: usize,
    data: Vec<f64>,
}

impl VoxelFeatureGrid {
    pub fn zeros(dims: Dims, channels: usize) -> Self {
        Self {
            dims,
            channels,
            data: vec![0.0; voxel_count(dims) * channels],
        }
    }

    pub fn from_vec(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != voxel_count(dims) * channels {
            return Err(Error::Shape {
                op: "VoxelFeatureGrid::from_vec",
                lhs: vec![dims[0], dims[1], dims[2], channels],
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("VoxelFeatureGrid::from_vec"));
        }
        Ok(Self { dims, channels, data })
    }

    /// Interprets a rank-4 `[X, Y, Z, C]` tensor as a feature grid.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [x, y, z, c] => Self::from_vec([x, y, z], c, t.data().to_vec()),
            ref s => Err(Error::Shape {
                op: "VoxelFeatureGrid::from_tensor",
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape4().to_vec(), self.data.clone()).expect("consistent grid")
    }

    pub fn shape4(&self) -> [usize; 4] {
        [self.dims[0], self.dims[1], self.dims[2], self.channels]
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn voxel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn voxel_mut(&mut self, index: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[index * c..(index + 1) * c]
    }

    pub fn num_voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    /// Number of voxels whose feature vector is not identically zero.
    pub fn nonzero_voxels(&self) -> usize {
        (0..self.num_voxels())
            .filter(|&i| self.voxel(i).iter().any(|v| *v != 0.0))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    dims: Dims,
    visible: Vec<bool>,
}

impl VisibilityMask {
    pub fn all(dims: Dims, visible: bool) -> Self {
        Self {
            dims,
            visible: vec![visible; voxel_count(dims)],
        }
    }

    pub fn from_vec(dims: Dims, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != voxel_count(dims) {
            return Err(Error::Shape {
                op: "VisibilityMask::from_vec",
                lhs: dims.to_vec(),
                rhs: vec![visible.len()],
            });
        }
        Ok(Self { dims, visible })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, x: usize, y: usize, z: usize) -> bool {
        self.visible[linear(self.dims, x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }
}
