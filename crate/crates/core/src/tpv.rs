//! Label encoding into flow targets and the tri-perspective-view (TPV)
//! reduction / aggregation pair.
//!
//! Plane conventions for a grid `[X, Y, Z, C]`:
//! `xy = mean_z` with shape `[X, Y, C]`, `yz = mean_x` with shape `[Y, Z, C]`,
//! `zx = mean_y` with shape `[Z, X, C]`.

use rand::Rng;

use crate::autodiff::{PlaneAxis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scene::{SemanticLabelGrid, VoxelFeatureGrid};

/// Learnable class embedding table plus the fixed output scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbedding {
    pub table: Tensor,
    pub scale: f64,
}

impl LabelEmbedding {
    pub fn new(table: Tensor, scale: f64) -> Result<Self> {
        if table.shape().len() != 2 {
            return Err(Error::contract(format!(
                "embedding table must be [classes, channels], got {:?}",
                table.shape()
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::contract(format!("embedding scale must be positive, got {scale}")));
        }
        Ok(Self { table, scale })
    }

    pub fn init<R: Rng + ?Sized>(num_classes: usize, channels: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Self::new(Tensor::randn(&[num_classes, channels], 1.0, rng), scale)
    }

    pub fn num_classes(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.table.shape()[1]
    }
}

/// `(sigmoid(table[label])² − 1) · scale` per voxel, recorded on `tape`.
///
/// The square is expanded as `−(1 − s)(1 + s)` with `1 − s = sigmoid(−e)`,
/// which keeps the result strictly negative for large embeddings.
pub fn encode_labels_on(tape: &mut Tape, table: Var, labels: &SemanticLabelGrid, scale: f64) -> Result<Var> {
    let rows = tape.shape(table)[0];
    if labels.num_classes() > rows {
        return Err(Error::contract(format!(
            "label grid has {} classes, embedding has {rows} rows",
            labels.num_classes()
        )));
    }
    if !(scale > 0.0) {
        return Err(Error::contract(format!("embedding scale must be positive, got {scale}")));
    }
    let idx: Vec<usize> = labels.labels().iter().map(|&l| l as usize).collect();
    let emb = tape.gather_rows(table, &idx)?;
    let neg = tape.scale(emb, -1.0)?;
    let one_minus_s = tape.sigmoid(neg)?;
    let s = tape.sigmoid(emb)?;
    let one_plus_s = tape.offset(s, 1.0)?;
    let prod = tape.mul(one_minus_s, one_plus_s)?;
    let out = tape.scale(prod, -scale)?;
    let [x, y, z] = labels.dims();
    let c = tape.shape(table)[1];
    tape.reshape(out, &[x, y, z, c])
}

pub fn encode_labels(labels: &SemanticLabelGrid, emb: &LabelEmbedding) -> Result<VoxelFeatureGrid> {
    let mut tape = Tape::new();
    let table = tape.constant(emb.table.clone());
    let v = encode_labels_on(&mut tape, table, labels, emb.scale)?;
    VoxelFeatureGrid::from_tensor(tape.value(v))
}

/// Three axis-mean planes of one voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TpvTriplet {
    /// `[X, Y, C]`
    pub xy: Tensor,
    /// `[Y, Z, C]`
    pub yz: Tensor,
    /// `[Z, X, C]`
    pub zx: Tensor,
}

impl TpvTriplet {
    pub fn new(xy: Tensor, yz: Tensor, zx: Tensor) -> Result<Self> {
        let t = Self { xy, yz, zx };
        t.grid_shape()?;
        Ok(t)
    }

    /// The `[X, Y, Z, C]` grid these planes describe.
    pub fn grid_shape(&self) -> Result<[usize; 4]> {
        match (self.xy.shape(), self.yz.shape(), self.zx.shape()) {
            (&[x, y, c], &[y2, z, c2], &[z2, x2, c3]) if x == x2 && y == y2 && z == z2 && c == c2 && c == c3 => {
                Ok([x, y, z, c])
            }
            (a, b, c) => Err(Error::Shape {
                op: "TpvTriplet",
                lhs: [a, b].concat(),
                rhs: c.to_vec(),
            }),
        }
    }
}

pub fn tpv_reduce_on(tape: &mut Tape, v: Var) -> Result<[Var; 3]> {
    Ok([
        tape.plane_mean(v, PlaneAxis::Xy)?,
        tape.plane_mean(v, PlaneAxis::Yz)?,
        tape.plane_mean(v, PlaneAxis::Zx)?,
    ])
}

pub fn tpv_aggregate_on(tape: &mut Tape, planes: [Var; 3]) -> Result<Var> {
    tape.tpv_aggregate(planes[0], planes[1], planes[2])
}

pub fn tpv_reduce(v: &VoxelFeatureGrid) -> TpvTriplet {
    let dims = v.shape4();
    let plane = |axis| {
        let (shape, data) = crate::autodiff::plane_mean_kernel(v.data(), dims, axis);
        Tensor::from_vec(shape, data).expect("consistent plane")
    };
    TpvTriplet {
        xy: plane(PlaneAxis::Xy),
        yz: plane(PlaneAxis::Yz),
        zx: plane(PlaneAxis::Zx),
    }
}

pub fn tpv_aggregate(t: &TpvTriplet) -> Result<VoxelFeatureGrid> {
    let [x, y, z, c] = t.grid_shape()?;
    let data = crate::autodiff::tpv_aggregate_kernel(t.xy.data(), t.yz.data(), t.zx.data(), [x, y, z, c]);
    VoxelFeatureGrid::from_vec([x, y, z], c, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sigmoid, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(dims: [usize; 4], seed: u64) -> VoxelFeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VoxelFeatureGrid::from_tensor(&Tensor::randn(&dims, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn zero_table_encodes_to_minus_three_quarters() {
        let labels = SemanticLabelGrid::filled([2, 2, 2], 3, 1);
        let emb = LabelEmbedding::new(Tensor::zeros(&[3, 4]), 1.0).unwrap();
        let v = encode_labels(&labels, &emb).unwrap();
        assert!(v.data().iter().all(|x| *x == -0.75));
    }

    #[test]
    fn encoding_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let emb = LabelEmbedding::init(4, 3, 2.0, &mut rng).unwrap();
        let labels = SemanticLabelGrid::from_vec([3, 3, 2], 4, (0..18).map(|i| (i * 7 % 4) as u16).collect()).unwrap();
        let v = encode_labels(&labels, &emb).unwrap();
        for (i, &l) in labels.labels().iter().enumerate() {
            for ch in 0..3 {
                let e = emb.table.data()[l as usize * 3 + ch];
                let want = (sigmoid(e).powi(2) - 1.0) * 2.0;
                assert!((v.voxel(i)[ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let labels = SemanticLabelGrid::filled([2, 2, 2], 5, 4);
        let emb = LabelEmbedding::new(Tensor::zeros(&[3, 4]), 1.0).unwrap();
        assert!(encode_labels(&labels, &emb).is_err());
        assert!(LabelEmbedding::new(Tensor::zeros(&[3, 4]), 0.0).is_err());
    }

    #[test]
    fn reduce_constant_and_single_impulse() {
        let dims = [5, 4, 3];
        let c = VoxelFeatureGrid::from_vec(dims, 2, vec![1.25; 120]).unwrap();
        let t = tpv_reduce(&c);
        for p in [&t.xy, &t.yz, &t.zx] {
            assert!(p.data().iter().all(|v| (*v - 1.25).abs() < 1e-15));
        }

        let mut g = VoxelFeatureGrid::zeros(dims, 1);
        let (i, j, k) = (3, 1, 2);
        g.voxel_mut(crate::scene::linear(dims, i, j, k))[0] = 6.0;
        let t = tpv_reduce(&g);
        let nz = |p: &Tensor| p.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!((nz(&t.xy), nz(&t.yz), nz(&t.zx)), (1, 1, 1));
        assert!((t.xy.data()[i * 4 + j] - 6.0 / 3.0).abs() < 1e-15);
        assert!((t.yz.data()[j * 3 + k] - 6.0 / 5.0).abs() < 1e-15);
        assert!((t.zx.data()[k * 5 + i] - 6.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn reduce_matches_triple_loop() {
        let g = random_grid([5, 4, 3, 2], 12);
        let t = tpv_reduce(&g);
        let at = |x: usize, y: usize, z: usize, c: usize| g.data()[((x * 4 + y) * 3 + z) * 2 + c];
        for c in 0..2 {
            for x in 0..5 {
                for y in 0..4 {
                    let m: f64 = (0..3).map(|z| at(x, y, z, c)).sum::<f64>() / 3.0;
                    assert!((t.xy.data()[(x * 4 + y) * 2 + c] - m).abs() < 1e-12);
                }
            }
            for y in 0..4 {
                for z in 0..3 {
                    let m: f64 = (0..5).map(|x| at(x, y, z, c)).sum::<f64>() / 5.0;
                    assert!((t.yz.data()[(y * 3 + z) * 2 + c] - m).abs() < 1e-12);
                }
            }
            for z in 0..3 {
                for x in 0..5 {
                    let m: f64 = (0..4).map(|y| at(x, y, z, c)).sum::<f64>() / 4.0;
                    assert!((t.zx.data()[(z * 5 + x) * 2 + c] - m).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn aggregate_constants_and_single_plane() {
        let t = TpvTriplet::new(Tensor::full(&[4, 3, 2], 0.5), Tensor::full(&[3, 2, 2], 0.5), Tensor::full(&[2, 4, 2], 0.5))
            .unwrap();
        let v = tpv_aggregate(&t).unwrap();
        assert!(v.data().iter().all(|x| *x == 1.5));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xy = Tensor::randn(&[4, 3, 2], 1.0, &mut rng);
        let t = TpvTriplet::new(xy.clone(), Tensor::zeros(&[3, 2, 2]), Tensor::zeros(&[2, 4, 2])).unwrap();
        let v = tpv_aggregate(&t).unwrap();
        for x in 0..4 {
            for y in 0..3 {
                for z in 0..2 {
                    let i = crate::scene::linear([4, 3, 2], x, y, z);
                    assert_eq!(v.voxel(i), &xy.data()[(x * 3 + y) * 2..][..2]);
                }
            }
        }
    }

    #[test]
    fn aggregate_matches_broadcast_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y, z, c) = (4, 3, 2, 3);
        let xy = Tensor::randn(&[x, y, c], 1.0, &mut rng);
        let yz = Tensor::randn(&[y, z, c], 1.0, &mut rng);
        let zx = Tensor::randn(&[z, x, c], 1.0, &mut rng);
        let t = TpvTriplet::new(xy.clone(), yz.clone(), zx.clone()).unwrap();
        let v = tpv_aggregate(&t).unwrap();
        for i in 0..x {
            for j in 0..y {
                for k in 0..z {
                    for ch in 0..c {
                        let want = xy.data()[(i * y + j) * c + ch] + yz.data()[(j * z + k) * c + ch] + zx.data()[(k * x + i) * c + ch];
                        let got = v.data()[((i * y + j) * z + k) * c + ch];
                        assert!((got - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn inconsistent_planes_are_rejected() {
        let bad = TpvTriplet::new(Tensor::zeros(&[4, 3, 2]), Tensor::zeros(&[3, 5, 2]), Tensor::zeros(&[2, 4, 2]));
        assert!(bad.is_err());
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4, 3, 2]));
        let b = tape.constant(Tensor::zeros(&[3, 2, 1]));
        let c = tape.constant(Tensor::zeros(&[2, 4, 2]));
        assert!(tape.tpv_aggregate(a, b, c).is_err());
    }

    #[test]
    fn constant_round_trip_triples() {
        let g = VoxelFeatureGrid::from_vec([3, 4, 2], 2, vec![-0.3; 48]).unwrap();
        let back = tpv_aggregate(&tpv_reduce(&g)).unwrap();
        for v in back.data() {
            assert!((v - 3.0 * -0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_and_aggregate_are_linear() {
        let a = random_grid([3, 4, 2, 2], 1);
        let b = random_grid([3, 4, 2, 2], 2);
        let (al, be) = (0.7, -1.3);
        let mix: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| al * x + be * y).collect();
        let mix = VoxelFeatureGrid::from_vec([3, 4, 2], 2, mix).unwrap();
        let (ta, tb, tm) = (tpv_reduce(&a), tpv_reduce(&b), tpv_reduce(&mix));
        for (pa, pb, pm) in [(&ta.xy, &tb.xy, &tm.xy), (&ta.yz, &tb.yz, &tm.yz), (&ta.zx, &tb.zx, &tm.zx)] {
            for i in 0..pa.numel() {
                assert!((al * pa.data()[i] + be * pb.data()[i] - pm.data()[i]).abs() < 1e-10);
            }
        }
        let (ga, gb, gm) = (tpv_aggregate(&ta).unwrap(), tpv_aggregate(&tb).unwrap(), tpv_aggregate(&tm).unwrap());
        for i in 0..ga.data().len() {
            assert!((al * ga.data()[i] + be * gb.data()[i] - gm.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_pass_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let grid = Tensor::randn(&[4, 3, 2, 2], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 2, 2], 1.0, &mut rng);
        let err = grad_check(
            |tape, v| {
                let planes = tpv_reduce_on(tape, v[0])?;
                let back = tpv_aggregate_on(tape, planes)?;
                let sq = tape.square(back)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(sq, wv)?;
                tape.sum(prod)
            },
            &[grid],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");

        let table = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let labels = SemanticLabelGrid::from_vec([3, 2, 2], 4, vec![0, 1, 2, 3, 3, 2, 1, 0, 1, 1, 2, 2]).unwrap();
        let w = Tensor::randn(&[3, 2, 2, 3], 1.0, &mut rng);
        let err = grad_check(
            |tape, v| {
                let enc = encode_labels_on(tape, v[0], &labels, 1.5)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(enc, wv)?;
                tape.sum(prod)
            },
            &[table],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
