//! Line-of-sight visibility from the ego voxel.
//!
//! The segment between two voxel centers crosses axis-aligned voxel
//! boundaries at parameters `(2j − 1) / (2|d|)`, `j = 1..=|d|`, where `d` is
//! the integer offset along that axis. Comparing those fractions exactly in
//! integer arithmetic gives a traversal with no floating-point ties: when the
//! segment passes exactly through an edge or corner, all affected axes step
//! together and the voxels that only touch the segment at that point are not
//! visited.

use crate::error::{Error, Result};
use crate::scene::grid::{Dims, SemanticLabelGrid, VisibilityMask};

/// Voxels strictly between `from` and `to` (both excluded) in traversal order.
pub fn segment_voxels(from: [usize; 3], to: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    walk_segment(from, to, |v| {
        out.push(v);
        true
    });
    out
}

/// Calls `visit` for every voxel strictly between `from` and `to`; stops
/// early when `visit` returns `false`. Returns `true` if the walk completed.
fn walk_segment(from: [usize; 3], to: [usize; 3], mut visit: impl FnMut([usize; 3]) -> bool) -> bool {
    let d: [i64; 3] = std::array::from_fn(|a| to[a] as i64 - from[a] as i64);
    let ad: [i64; 3] = d.map(i64::abs);
    let step: [i64; 3] = d.map(i64::signum);
    let mut taken = [0i64; 3];
    let mut cur: [i64; 3] = from.map(|v| v as i64);
    let total = ad.iter().sum::<i64>();
    let mut moved = 0;
    while moved < total {
        // Next crossing per axis is (2j+1)/(2|d|) with j = steps taken so far.
        let mut best: Option<(i64, i64)> = None;
        for a in 0..3 {
            if taken[a] < ad[a] {
                let cand = (2 * taken[a] + 1, 2 * ad[a]);
                best = match best {
                    None => Some(cand),
                    Some(b) if cand.0 * b.1 < b.0 * cand.1 => Some(cand),
                    keep => keep,
                };
            }
        }
        let (num, den) = best.expect("axis left to traverse");
        for a in 0..3 {
            if taken[a] < ad[a] && (2 * taken[a] + 1) * den == num * (2 * ad[a]) {
                taken[a] += 1;
                cur[a] += step[a];
                moved += 1;
            }
        }
        if moved == total {
            break;
        }
        if !visit(cur.map(|v| v as usize)) {
            return false;
        }
    }
    true
}

fn check_ego(dims: Dims, ego: [usize; 3]) -> Result<()> {
    if (0..3).any(|a| ego[a] >= dims[a]) {
        return Err(Error::contract(format!("ego {ego:?} outside grid {dims:?}")));
    }
    Ok(())
}

/// A voxel is visible iff the segment from the ego center to its center
/// passes through no occupied voxel before reaching it. The ego voxel and the
/// target voxel never occlude.
pub fn raycast_visibility(labels: &SemanticLabelGrid, ego: [usize; 3]) -> Result<VisibilityMask> {
    let dims = labels.dims();
    check_ego(dims, ego)?;
    let mut visible = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let clear = walk_segment(ego, [x, y, z], |[a, b, c]| !labels.is_occupied(a, b, c));
                visible.push(clear);
            }
        }
    }
    VisibilityMask::from_vec(dims, visible)
}
