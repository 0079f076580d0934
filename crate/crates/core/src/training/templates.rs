use crate::tensor::EPSILON_DIV;

/// One feature template `t_ij` per (head, class).
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateBank {
    num_heads: usize,
    num_classes: usize,
    dim: usize,
    gamma: f64,
    data: Vec<f64>,
}

/// Unit vector along `v`; the zero vector maps to itself.
pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n < EPSILON_DIV {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|a| a / n).collect()
    }
}

impl TemplateBank {
    /// All-zero templates.
    pub fn new(num_heads: usize, num_classes: usize, dim: usize, gamma: f64) -> Self {
        TemplateBank {
            num_heads,
            num_classes,
            dim,
            gamma,
            data: vec![0.0; num_heads * num_classes * dim],
        }
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut Vec<f64> {
        &mut self.data
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        (i * self.num_classes + j) * self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let k = self.offset(i, j);
        &self.data[k..k + self.dim]
    }

    pub fn set(&mut self, i: usize, j: usize, t: &[f64]) {
        let k = self.offset(i, j);
        self.data[k..k + self.dim].copy_from_slice(t);
    }

    /// Moving-average step `t += gamma * (f_hat - t_hat)` for one template.
    pub fn update(&mut self, i: usize, j: usize, f: &[f64]) {
        let f_hat = unit(f);
        let t_hat = unit(self.get(i, j));
        let gamma = self.gamma;
        let k = self.offset(i, j);
        for (d, t) in self.data[k..k + self.dim].iter_mut().enumerate() {
            *t += gamma * (f_hat[d] - t_hat[d]);
        }
    }

    /// One update per class that is present in the batch, using the mean
    /// feature over the samples labelled with that class.
    ///
    /// `features[s]` is the flattened `[I, J, d]` feature set of sample `s`.
    pub fn update_from_batch(&mut self, features: &[Vec<f64>], labels: &[&[u8]]) {
        for j in 0..self.num_classes {
            let members: Vec<&Vec<f64>> = features
                .iter()
                .zip(labels)
                .filter(|(_, l)| l[j] == 1)
                .map(|(f, _)| f)
                .collect();
            if members.is_empty() {
                continue;
            }
            for i in 0..self.num_heads {
                let k = self.offset(i, j);
                let mut mean = vec![0.0; self.dim];
                for f in &members {
                    for (m, v) in mean.iter_mut().zip(&f[k..k + self.dim]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= members.len() as f64);
                self.update(i, j, &mean);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::cosine;

    #[test]
    fn first_update_moves_by_gamma() {
        let mut b = TemplateBank::new(1, 1, 3, 1e-4);
        b.update(0, 0, &[0.0, 2.0, 0.0]);
        assert_eq!(b.get(0, 0), &[0.0, 1e-4, 0.0]);
    }

    #[test]
    fn aligned_template_is_fixed_point() {
        let mut b = TemplateBank::new(1, 1, 2, 0.1);
        b.set(0, 0, &[0.6, 0.8]);
        b.update(0, 0, &[3.0, 4.0]);
        let t = b.get(0, 0);
        assert!((t[0] - 0.6).abs() < 1e-15 && (t[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn direction_converges() {
        let mut b = TemplateBank::new(1, 1, 2, 1e-2);
        b.set(0, 0, &[1.0, 0.0]);
        let f = [0.0, 1.0];
        let mut last = cosine(b.get(0, 0), &f);
        for _ in 0..500 {
            b.update(0, 0, &f);
            let c = cosine(b.get(0, 0), &f);
            assert!(c >= last);
            last = c;
        }
        assert!(last > 0.99);
    }

    #[test]
    fn batch_update_skips_absent_classes() {
        let mut b = TemplateBank::new(1, 2, 1, 0.5);
        let feats = vec![vec![1.0, 1.0], vec![1.0, -1.0]];
        b.update_from_batch(&feats, &[&[1, 0], &[1, 0]]);
        assert_eq!(b.get(0, 0), &[0.5]);
        assert_eq!(b.get(0, 1), &[0.0]);
    }
}
