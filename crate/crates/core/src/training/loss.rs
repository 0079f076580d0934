use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var, EPSILON_DIV};

use super::TemplateBank;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginParams {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        MarginParams {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
        }
    }
}

/// Loss values of one training step, averaged over the batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub margin: f64,
    /// HAR term after weighting.
    pub har: f64,
    pub total: f64,
    pub per_class: Vec<f64>,
}

impl LossBreakdown {
    pub fn new(margin: f64, har: f64, per_class: Vec<f64>) -> Self {
        LossBreakdown {
            margin,
            har,
            total: margin + har,
            per_class,
        }
    }
}

fn label_tensor(labels: &[u8]) -> Result<Tensor> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("labels must be 0 or 1, got {bad}")));
    }
    Tensor::new(&[labels.len()], labels.iter().map(|&l| f64::from(l)).collect())
}

/// Per-class margin terms `[J]`; sum them for the loss.
pub fn margin_terms<'t>(scores: Var<'t>, labels: &[u8], p: &MarginParams) -> Result<Var<'t>> {
    let shape = scores.shape();
    if shape != [labels.len()] {
        return Err(Error::mismatch("margin_loss", &shape, &[labels.len()]));
    }
    let tape = scores.tape();
    let present = label_tensor(labels)?;
    let absent = tape.constant(present.map(|t| p.lambda * (1.0 - t)));
    let present = tape.constant(present);
    let pos = scores.mul_scalar(-1.0)?.add_scalar(p.m_plus)?.relu()?.square()?.mul(present)?;
    let neg = scores.add_scalar(-p.m_minus)?.relu()?.square()?.mul(absent)?;
    pos.add(neg)
}

pub fn margin_loss<'t>(scores: Var<'t>, labels: &[u8], p: &MarginParams) -> Result<Var<'t>> {
    margin_terms(scores, labels, p)?.sum_all()
}

/// Spatial mean of one weighted-vote grid `[n, d]`, giving `[d]`.
pub fn semantic_features(weighted_votes: Var<'_>) -> Result<Var<'_>> {
    weighted_votes.mean(&[0])
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Cosine with the convention that a zero operand gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < EPSILON_DIV || nb < EPSILON_DIV {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Mean over heads and classes of `1 - cos(f_ij, t_ij)`; templates are
/// constants. `features[i][j]` is `[d]`.
pub fn har_loss<'t>(features: &[Vec<Var<'t>>], bank: &TemplateBank) -> Result<Var<'t>> {
    if features.len() != bank.num_heads() || features.iter().any(|r| r.len() != bank.num_classes()) {
        return Err(Error::Contract("feature grid does not match the template bank".into()));
    }
    let tape = features[0][0].tape();
    let mut total: Option<Var<'t>> = None;
    let mut constant = 0.0;
    for (i, row) in features.iter().enumerate() {
        for (j, f) in row.iter().enumerate() {
            let t = bank.get(i, j);
            if f.shape() != [t.len()] {
                return Err(Error::mismatch("har_loss", &f.shape(), &[t.len()]));
            }
            let nt = norm(t);
            let nf = norm(f.value().data());
            if nt < EPSILON_DIV || nf < EPSILON_DIV {
                constant += 1.0;
                continue;
            }
            let t_hat = tape.constant(Tensor::from_parts(vec![t.len()], t.iter().map(|v| v / nt).collect()));
            let dot = f.mul(t_hat)?.sum_all()?;
            let len = f.square()?.sum_all()?.sqrt()?;
            let term = dot.div(len)?.mul_scalar(-1.0)?.add_scalar(1.0)?;
            total = Some(match total {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
    }
    let scale = 1.0 / (bank.num_heads() * bank.num_classes()) as f64;
    match total {
        Some(acc) => acc.add_scalar(constant)?.mul_scalar(scale),
        None => Ok(tape.constant(Tensor::scalar(constant * scale))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn margin_spot_values() {
        let tape = Tape::new();
        let p = MarginParams::default();
        let s = tape.var(Tensor::vector(&[0.95, 0.05]).unwrap());
        assert_eq!(margin_loss(s, &[1, 0], &p).unwrap().item(), 0.0);
        let s = tape.var(Tensor::vector(&[0.5, 0.5]).unwrap());
        let terms = margin_terms(s, &[1, 0], &p).unwrap();
        let v = terms.value();
        assert!((v.data()[0] - 0.16).abs() < 1e-15);
        assert!((v.data()[1] - 0.08).abs() < 1e-15);
        let total = terms.sum_all().unwrap().item();
        assert!((total - 0.24).abs() <= 4.0 * f64::EPSILON * 0.24, "{total}");
    }

    #[test]
    fn margin_rejects_bad_labels() {
        let tape = Tape::new();
        let s = tape.var(Tensor::vector(&[0.5]).unwrap());
        assert!(matches!(margin_loss(s, &[2], &MarginParams::default()), Err(Error::Contract(_))));
        assert!(margin_loss(s, &[1, 0], &MarginParams::default()).is_err());
    }

    #[test]
    fn semantic_features_is_spatial_mean() {
        let tape = Tape::new();
        let a = tape.var(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        assert_eq!(semantic_features(a).unwrap().value().data(), &[2.0, 4.0]);
        let one = tape.var(Tensor::new(&[1, 2], vec![0.3, -0.7]).unwrap());
        assert_eq!(semantic_features(one).unwrap().value().data(), &[0.3, -0.7]);
    }

    fn bank_with(t: &[f64]) -> TemplateBank {
        let mut bank = TemplateBank::new(1, 1, t.len(), 1e-4);
        bank.set(0, 0, t);
        bank
    }

    #[test]
    fn har_spot_values() {
        let tape = Tape::new();
        let f = tape.var(Tensor::vector(&[2.0, 0.0]).unwrap());
        let har = |t: &[f64]| har_loss(&[vec![f]], &bank_with(t)).unwrap().item();
        assert!(har(&[1.0, 0.0]).abs() < 1e-15);
        assert!((har(&[0.0, 3.0]) - 1.0).abs() < 1e-15);
        assert_eq!(har(&[0.0, 0.0]), 1.0);
        assert!((har(&[-1.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn har_has_no_gradient_into_templates_and_correct_grad_into_features() {
        let bank = bank_with(&[1.0, 1.0]);
        let report = crate::tensor::grad_check(
            |_, f| har_loss(&[vec![f]], &bank),
            &Tensor::vector(&[0.3, -0.8]).unwrap(),
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
