use super::{RoutingMode, VoteTensor};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Output of one routing run.
///
/// Map-valued fields are `[num_heads, num_classes, h, w]`.
#[derive(Clone, Debug)]
pub struct RoutingResult<'t> {
    pub num_heads: usize,
    pub num_classes: usize,
    pub grid: (usize, usize),
    /// Parent poses, one `[class_dim]` vector per class.
    pub poses: Vec<Var<'t>>,
    /// Capsule lengths `|p_j|`, `[num_classes]`.
    pub scores: Var<'t>,
    /// Routing-weighted votes per `[head][class]`, each `[h * w, class_dim]`.
    pub weighted_votes: Vec<Vec<Var<'t>>>,
    /// Routing coefficients of the final iteration.
    pub routing: Tensor,
    /// Routing coefficients of every iteration, in order.
    pub history: Vec<Tensor>,
    /// Head activation maps.
    pub hams: Tensor,
}

impl RoutingResult<'_> {
    pub fn score_values(&self) -> Vec<f64> {
        self.scores.value().data().to_vec()
    }

    /// The `[h, w]` map of head `i`, class `j` from a `[I, J, h, w]` tensor.
    pub fn map_of(t: &Tensor, i: usize, j: usize) -> Tensor {
        let (num_classes, h, w) = (t.shape()[1], t.shape()[2], t.shape()[3]);
        let k = (i * num_classes + j) * h * w;
        Tensor::from_parts(vec![h, w], t.data()[k..k + h * w].to_vec())
    }
}

/// Head activation maps: the per-position length of the weighted votes,
/// `A_ij[x, y] = |R_ij[x, y] * V_ij[x, y, :]|`.
pub fn compute_ham(weighted_votes: &[Vec<Var<'_>>], grid: (usize, usize)) -> Tensor {
    let num_heads = weighted_votes.len();
    let num_classes = weighted_votes.first().map_or(0, Vec::len);
    let n = grid.0 * grid.1;
    let mut out = Vec::with_capacity(num_heads * num_classes * n);
    for row in weighted_votes {
        for wv in row {
            let v = wv.value();
            let d = v.shape()[1];
            out.extend(v.data().chunks(d).map(|c| c.iter().map(|a| a * a).sum::<f64>().sqrt()));
        }
    }
    Tensor::from_parts(vec![num_heads, num_classes, grid.0, grid.1], out)
}

fn validate<'t>(votes: &[Vec<VoteTensor<'t>>], n_iter: usize) -> Result<((usize, usize), usize)> {
    if n_iter == 0 {
        return Err(Error::Config("routing needs at least one iteration".into()));
    }
    let first = votes
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Contract("routing needs a non-empty vote set".into()))?;
    let shape = first.votes.shape();
    let num_classes = votes[0].len();
    for (i, row) in votes.iter().enumerate() {
        if row.len() != num_classes {
            return Err(Error::Contract(format!("head {i} votes for {} classes, expected {num_classes}", row.len())));
        }
        for v in row {
            if v.votes.shape() != shape || v.grid != first.grid {
                return Err(Error::mismatch("route", &shape, &v.votes.shape()));
            }
        }
    }
    if shape.len() != 2 || shape[0] != first.grid.0 * first.grid.1 {
        return Err(Error::mismatch("route", &shape, &[first.grid.0 * first.grid.1, 0]));
    }
    Ok((first.grid, shape[1]))
}

fn snapshot(maps: &[Vec<Var<'_>>], grid: (usize, usize)) -> Tensor {
    let num_heads = maps.len();
    let num_classes = maps[0].len();
    let mut data = Vec::with_capacity(num_heads * num_classes * grid.0 * grid.1);
    for row in maps {
        for r in row {
            data.extend_from_slice(r.value().data());
        }
    }
    Tensor::from_parts(vec![num_heads, num_classes, grid.0, grid.1], data)
}

/// Iterative routing by agreement. `votes[i][j]` holds head `i`'s votes for
/// class `j`; gradients flow through every iteration.
pub fn route<'t>(votes: &[Vec<VoteTensor<'t>>], n_iter: usize, mode: RoutingMode) -> Result<RoutingResult<'t>> {
    let (grid, dim) = validate(votes, n_iter)?;
    let tape = votes[0][0].votes.tape();
    let num_heads = votes.len();
    let num_classes = votes[0].len();
    let n = grid.0 * grid.1;

    let zeros = tape.constant(Tensor::zeros(&[n]));
    let mut logits: Vec<Vec<Var<'t>>> = vec![vec![zeros; num_classes]; num_heads];
    let mut history = Vec::with_capacity(n_iter);
    let mut coeffs = Vec::new();
    let mut weighted = Vec::new();
    let mut poses = Vec::new();

    for it in 0..n_iter {
        coeffs = match mode {
            RoutingMode::Idr => logits
                .iter()
                .map(|row| row.iter().map(|l| l.softmax(0)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?,
            RoutingMode::Baseline => logits
                .iter()
                .map(|row| {
                    let per_pos = tape.stack(row)?.softmax(0)?;
                    (0..num_classes).map(|j| per_pos.select(j)).collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?,
        };
        history.push(snapshot(&coeffs, grid));

        weighted = coeffs
            .iter()
            .zip(votes)
            .map(|(r_row, v_row)| {
                r_row
                    .iter()
                    .zip(v_row)
                    .map(|(r, v)| r.mul(v.votes))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        poses = (0..num_classes)
            .map(|j| {
                let mut total = weighted[0][j].sum(&[0])?;
                for row in &weighted[1..] {
                    total = total.add(row[j].sum(&[0])?)?;
                }
                total.squash()
            })
            .collect::<Result<Vec<_>>>()?;

        // the agreement update after the last iteration would never be read
        if it + 1 < n_iter {
            for (i, row) in logits.iter_mut().enumerate() {
                for (j, l) in row.iter_mut().enumerate() {
                    let p = poses[j].reshape(&[dim, 1])?;
                    let agreement = votes[i][j].votes.matmul(p)?.reshape(&[n])?;
                    *l = l.add(agreement)?;
                }
            }
        }
    }

    let scores = tape.stack(&poses)?.norm_last()?;
    let hams = compute_ham(&weighted, grid);
    Ok(RoutingResult {
        num_heads,
        num_classes,
        grid,
        poses,
        scores,
        weighted_votes: weighted,
        routing: snapshot(&coeffs, grid),
        history,
        hams,
    })
}

/// Inverted dynamic routing: softmax over the positions of each head, per
/// parent class.
pub fn idr_route<'t>(votes: &[Vec<VoteTensor<'t>>], n_iter: usize) -> Result<RoutingResult<'t>> {
    route(votes, n_iter, RoutingMode::Idr)
}

/// Bottom-up dynamic routing: softmax over parent classes at each child
/// position.
pub fn dynamic_route_baseline<'t>(votes: &[Vec<VoteTensor<'t>>], n_iter: usize) -> Result<RoutingResult<'t>> {
    route(votes, n_iter, RoutingMode::Baseline)
}
