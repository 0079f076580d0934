use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// One capsule head: a grid of squashed pose vectors stored row-major as
/// `[h * w, pose_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadPose<'t> {
    pub index: usize,
    pub grid: (usize, usize),
    pub poses: Var<'t>,
}

impl HeadPose<'_> {
    pub fn pose_dim(&self) -> usize {
        self.poses.shape()[1]
    }
}

/// Votes of head `head` for class `class`, `[h * w, class_dim]`.
#[derive(Clone, Copy, Debug)]
pub struct VoteTensor<'t> {
    pub head: usize,
    pub class: usize,
    pub grid: (usize, usize),
    pub votes: Var<'t>,
    pub coordinate_added: bool,
}

/// One `[pose_dim, class_dim]` matrix per (head, class), shared by every
/// position of the head. Indexed `head * num_classes + class`.
#[derive(Clone, Debug)]
pub struct TransformBank<'t> {
    pub num_heads: usize,
    pub num_classes: usize,
    pub matrices: Vec<Var<'t>>,
}

impl<'t> TransformBank<'t> {
    pub fn get(&self, head: usize, class: usize) -> Var<'t> {
        self.matrices[head * self.num_classes + class]
    }
}

pub fn squash(v: Var<'_>) -> Result<Var<'_>> {
    v.squash()
}

/// Splits `[num_heads * pose_dim, h, w]` features channel-wise into heads
/// and squashes every capsule.
pub fn split_heads<'t>(features: Var<'t>, num_heads: usize, pose_dim: usize) -> Result<Vec<HeadPose<'t>>> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::mismatch("split_heads", &shape, &[num_heads * pose_dim, 0, 0]));
    }
    if num_heads == 0 || pose_dim == 0 || shape[0] != num_heads * pose_dim {
        return Err(Error::Config(format!(
            "{} feature maps cannot be split into {num_heads} heads of {pose_dim} channels",
            shape[0]
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let flat = features.reshape(&[shape[0], h * w])?;
    (0..num_heads)
        .map(|i| {
            let poses = flat.narrow(0, i * pose_dim, pose_dim)?.transpose()?.squash()?;
            Ok(HeadPose {
                index: i,
                grid: (h, w),
                poses,
            })
        })
        .collect()
}

/// `[h * w, dim]` tensor that is zero except for the final two channels,
/// which hold the row and column of each cell scaled to `[0, 1]`.
pub fn coordinate_lattice(grid: (usize, usize), dim: usize) -> Tensor {
    let (h, w) = grid;
    let mut t = Tensor::zeros(&[h * w, dim]);
    let scale = |x: usize, extent: usize| if extent > 1 { x as f64 / (extent - 1) as f64 } else { 0.0 };
    let data = t.data_mut();
    for r in 0..h {
        for c in 0..w {
            let row = (r * w + c) * dim;
            data[row + dim - 2] = scale(r, h);
            data[row + dim - 1] = scale(c, w);
        }
    }
    t
}

/// Votes of one head for every class: `V_ij = P_i W_ij`, optionally with
/// coordinate addition.
pub fn compute_votes<'t>(head: &HeadPose<'t>, bank: &TransformBank<'t>, coord_add: bool) -> Result<Vec<VoteTensor<'t>>> {
    if head.index >= bank.num_heads {
        return Err(Error::Contract(format!(
            "head {} outside a bank of {} heads",
            head.index, bank.num_heads
        )));
    }
    let tape = head.poses.tape();
    let mut lattice = None;
    (0..bank.num_classes)
        .map(|j| {
            let w = bank.get(head.index, j);
            let ws = w.shape();
            if ws.len() != 2 || ws[0] != head.pose_dim() {
                return Err(Error::mismatch("compute_votes", &ws, &[head.pose_dim(), 0]));
            }
            let mut votes = head.poses.matmul(w)?;
            if coord_add {
                if ws[1] < 2 {
                    return Err(Error::Config("coordinate addition needs class_dim >= 2".into()));
                }
                let c = *lattice.get_or_insert_with(|| tape.constant(coordinate_lattice(head.grid, ws[1])));
                votes = votes.add(c)?;
            }
            Ok(VoteTensor {
                head: head.index,
                class: j,
                grid: head.grid,
                votes,
                coordinate_added: coord_add,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tape};

    #[test]
    fn split_into_four_heads() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::create(&[256, 3, 2], Init::Gaussian { mean: 0.0, std: 2.0, seed: 1 }).unwrap());
        let heads = split_heads(f, 4, 64).unwrap();
        assert_eq!(heads.len(), 4);
        for h in &heads {
            assert_eq!(h.poses.shape(), vec![6, 64]);
            for n in h.poses.norm_last().unwrap().value().data() {
                assert!(*n < 1.0);
            }
        }
        assert!(matches!(split_heads(f, 3, 64), Err(Error::Config(_))));
    }

    #[test]
    fn single_head_preserves_order() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..8).map(|v| v as f64 * 0.01).collect();
        let f = tape.constant(Tensor::new(&[2, 2, 2], data.clone()).unwrap());
        let head = &split_heads(f, 1, 2).unwrap()[0];
        // position p holds channels (data[p], data[4 + p]) before squash
        let p = head.poses.value();
        for pos in 0..4 {
            let (a, b) = (data[pos], data[4 + pos]);
            let (x, y) = (p.data()[pos * 2], p.data()[pos * 2 + 1]);
            if a != 0.0 || b != 0.0 {
                assert!((x * b - y * a).abs() < 1e-15, "direction changed at {pos}");
            }
        }
    }

    #[test]
    fn lattice_on_three_by_three() {
        let tape = Tape::new();
        let head = HeadPose {
            index: 0,
            grid: (3, 3),
            poses: tape.constant(Tensor::zeros(&[9, 4])),
        };
        let bank = TransformBank {
            num_heads: 1,
            num_classes: 1,
            matrices: vec![tape.constant(Tensor::zeros(&[4, 4]))],
        };
        let v = compute_votes(&head, &bank, true).unwrap()[0].votes.value();
        let steps = [0.0, 0.5, 1.0];
        for r in 0..3 {
            for c in 0..3 {
                let row = &v.data()[(r * 3 + c) * 4..(r * 3 + c + 1) * 4];
                assert_eq!(row, &[0.0, 0.0, steps[r], steps[c]]);
            }
        }
    }

    #[test]
    fn degenerate_grid_adds_nothing() {
        let tape = Tape::new();
        let poses = tape.constant(Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap());
        let head = HeadPose { index: 0, grid: (1, 1), poses };
        let eye = tape.constant(Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let bank = TransformBank { num_heads: 1, num_classes: 1, matrices: vec![eye] };
        let with = compute_votes(&head, &bank, true).unwrap()[0].votes.value();
        let without = compute_votes(&head, &bank, false).unwrap()[0].votes.value();
        assert_eq!(with.data(), without.data());
        assert_eq!(without.data(), &[0.3, -0.2, 0.0]);
    }

    #[test]
    fn identity_padded_transform_copies_poses() {
        let tape = Tape::new();
        let p = Tensor::create(&[4, 3], Init::Uniform { low: -0.5, high: 0.5, seed: 9 }).unwrap();
        let head = HeadPose { index: 0, grid: (2, 2), poses: tape.constant(p.clone()) };
        // 3 -> 2 truncation
        let trunc = tape.constant(Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let bank = TransformBank { num_heads: 1, num_classes: 1, matrices: vec![trunc] };
        let v = compute_votes(&head, &bank, false).unwrap()[0].votes.value();
        for pos in 0..4 {
            assert_eq!(&v.data()[pos * 2..pos * 2 + 2], &p.data()[pos * 3..pos * 3 + 2]);
        }
    }
}
