//! Scene container, little-endian throughout:
//!
//! ```text
//! "FMOC" | version u16 | X,Y,Z u32 | num_classes u16 | channels u16 | voxel_size_m f64
//! labels u16[X·Y·Z] | visibility bits (LSB first, padded to a byte) | features f64[X·Y·Z·C]
//! ```

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, FormatError, Result};
use crate::scene::generate::Scene;
use crate::scene::grid::{SemanticLabelGrid, VisibilityMask, VoxelFeatureGrid};

pub const SCENE_MAGIC: [u8; 4] = *b"FMOC";
pub const SCENE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 3 * 4 + 2 + 2 + 8;

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let dims = scene.labels.dims();
    let n = dims.iter().product::<usize>();
    let channels = scene.features.channels();
    let mut buf = Vec::with_capacity(HEADER_LEN + n * 2 + n.div_ceil(8) + n * channels * 8);
    buf.extend_from_slice(&SCENE_MAGIC);
    buf.write_u16::<LittleEndian>(SCENE_VERSION).unwrap();
    for d in dims {
        buf.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    buf.write_u16::<LittleEndian>(scene.labels.num_classes() as u16).unwrap();
    buf.write_u16::<LittleEndian>(channels as u16).unwrap();
    buf.write_f64::<LittleEndian>(scene.voxel_size_m).unwrap();
    for &l in scene.labels.labels() {
        buf.write_u16::<LittleEndian>(l).unwrap();
    }
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (i, &v) in scene.visibility.as_slice().iter().enumerate() {
        if v {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    buf.extend_from_slice(&bits);
    for &f in scene.features.data() {
        buf.write_f64::<LittleEndian>(f).unwrap();
    }
    buf
}

pub fn decode_scene(bytes: &[u8]) -> Result<Scene> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        }
        .into());
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != SCENE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: SCENE_MAGIC,
            found,
        }
        .into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        }
        .into());
    }
    let mut r = Cursor::new(&bytes[4..HEADER_LEN]);
    let version = r.read_u16::<LittleEndian>().unwrap();
    if version != SCENE_VERSION {
        return Err(FormatError::Version {
            expected: SCENE_VERSION,
            found: version,
        }
        .into());
    }
    let dims: [usize; 3] = std::array::from_fn(|_| r.read_u32::<LittleEndian>().unwrap() as usize);
    let num_classes = r.read_u16::<LittleEndian>().unwrap() as usize;
    let channels = r.read_u16::<LittleEndian>().unwrap() as usize;
    let voxel_size_m = r.read_f64::<LittleEndian>().unwrap();
    if num_classes < 2 || channels == 0 || !(voxel_size_m > 0.0) {
        return Err(FormatError::Header(format!(
            "num_classes={num_classes} channels={channels} voxel_size_m={voxel_size_m}"
        ))
        .into());
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FormatError::Header(format!("dims {dims:?} overflow")))?;
    let expected = n
        .checked_mul(2 + channels * 8)
        .and_then(|v| v.checked_add(HEADER_LEN + n.div_ceil(8)))
        .ok_or_else(|| FormatError::Header(format!("dims {dims:?} overflow")))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    if bytes.len() > expected {
        return Err(FormatError::Header(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        ))
        .into());
    }

    let mut r = Cursor::new(&bytes[HEADER_LEN..]);
    let labels: Vec<u16> = (0..n).map(|_| r.read_u16::<LittleEndian>().unwrap()).collect();
    let bit_start = HEADER_LEN + 2 * n;
    let bits = &bytes[bit_start..bit_start + n.div_ceil(8)];
    let visible: Vec<bool> = (0..n).map(|i| bits[i / 8] & (1 << (i % 8)) != 0).collect();
    let mut r = Cursor::new(&bytes[bit_start + n.div_ceil(8)..]);
    let features: Vec<f64> = (0..n * channels).map(|_| r.read_f64::<LittleEndian>().unwrap()).collect();

    let labels = SemanticLabelGrid::from_vec(dims, num_classes, labels)
        .map_err(|e| FormatError::Header(e.to_string()))?;
    let features =
        VoxelFeatureGrid::from_vec(dims, channels, features).map_err(|e| FormatError::Header(e.to_string()))?;
    let visibility = VisibilityMask::from_vec(dims, visible)?;
    Ok(Scene {
        voxel_size_m,
        labels,
        features,
        visibility,
        boxes_skipped: 0,
    })
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    fs::write(path, encode_scene(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scene(&bytes)
}
