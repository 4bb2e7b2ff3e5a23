use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Traversal order used to flatten a plane into a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::RowForward,
        Direction::RowBackward,
        Direction::ColForward,
        Direction::ColBackward,
    ];

    /// `perm[i]` is the row-major cell index visited at sequence position `i`.
    pub fn permutation(self, rows: usize, cols: usize) -> Vec<usize> {
        let row_major: Vec<usize> = (0..rows * cols).collect();
        let col_major: Vec<usize> = (0..cols).flat_map(|c| (0..rows).map(move |r| r * cols + c)).collect();
        match self {
            Direction::RowForward => row_major,
            Direction::RowBackward => row_major.into_iter().rev().collect(),
            Direction::ColForward => col_major,
            Direction::ColBackward => col_major.into_iter().rev().collect(),
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// The four `[rows·cols, C]` sequences of one plane.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionalSequences {
    pub rows: usize,
    pub cols: usize,
    pub sequences: [Tensor; 4],
}

impl DirectionalSequences {
    pub fn get(&self, dir: Direction) -> &Tensor {
        let i = Direction::ALL.iter().position(|d| *d == dir).expect("known direction");
        &self.sequences[i]
    }
}

fn plane_dims(p: &Tensor) -> Result<(usize, usize, usize)> {
    match *p.shape() {
        [r, c, ch] => Ok((r, c, ch)),
        ref s => Err(Error::Shape {
            op: "unfold_plane",
            lhs: s.to_vec(),
            rhs: vec![],
        }),
    }
}

fn permute(data: &[f64], perm: &[usize], ch: usize) -> Vec<f64> {
    perm.iter().flat_map(|&i| data[i * ch..(i + 1) * ch].iter().copied()).collect()
}

/// Flattens a `[rows, cols, C]` plane along all four traversal orders.
pub fn unfold_plane(p: &Tensor) -> Result<DirectionalSequences> {
    let (rows, cols, ch) = plane_dims(p)?;
    let sequences = Direction::ALL.map(|d| {
        let data = permute(p.data(), &d.permutation(rows, cols), ch);
        Tensor::from_vec(vec![rows * cols, ch], data).expect("consistent sequence")
    });
    Ok(DirectionalSequences { rows, cols, sequences })
}

/// Inverse of [`unfold_plane`] for one direction.
pub fn fold_plane(seq: &Tensor, rows: usize, cols: usize, dir: Direction) -> Result<Tensor> {
    let ch = match *seq.shape() {
        [l, ch] if l == rows * cols => ch,
        ref s => {
            return Err(Error::Shape {
                op: "fold_plane",
                lhs: s.to_vec(),
                rhs: vec![rows, cols],
            })
        }
    };
    let inv = inverse_permutation(&dir.permutation(rows, cols));
    Tensor::from_vec(vec![rows, cols, ch], permute(seq.data(), &inv, ch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_orders() {
        // a b / c d encoded as 1 2 / 3 4.
        let p = Tensor::from_vec(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = unfold_plane(&p).unwrap();
        assert_eq!(s.get(Direction::RowForward).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.get(Direction::RowBackward).data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(s.get(Direction::ColForward).data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.get(Direction::ColBackward).data(), &[4.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn fold_inverts_unfold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::randn(&[3, 5, 2], 1.0, &mut rng);
        let s = unfold_plane(&p).unwrap();
        for d in Direction::ALL {
            assert_eq!(fold_plane(s.get(d), 3, 5, d).unwrap(), p);
        }
    }

    #[test]
    fn each_sequence_is_a_permutation_of_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Tensor::randn(&[3, 5, 1], 1.0, &mut rng);
        let mut cells: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
        cells.sort_unstable();
        let s = unfold_plane(&p).unwrap();
        for seq in &s.sequences {
            let mut got: Vec<u64> = seq.data().iter().map(|v| v.to_bits()).collect();
            got.sort_unstable();
            assert_eq!(got, cells);
        }
    }
}
