use rand::Rng;

use super::optim::Adam;
use crate::error::Result;
use crate::nn::glorot;
use crate::tensor::{Float, Tape, Tensor};

/// Affine softmax classifier predicting each token's variable from its
/// representation. It sees token values only, never tape nodes of the
/// model, so its loss cannot reach model parameters.
#[derive(Clone, Debug)]
pub struct Probe<F> {
    params: Vec<Tensor<F>>,
    adam: Adam,
    pub history: Vec<f64>,
}

impl<F: Float> Probe<F> {
    pub fn new(d: usize, classes: usize, lr: f64, rng: &mut impl Rng) -> Self {
        let params = vec![glorot(d, classes, rng), Tensor::zeros(&[classes])];
        let adam = Adam::new(&params, lr, 0.0);
        Self {
            params,
            adam,
            history: Vec::new(),
        }
    }

    pub fn classes(&self) -> usize {
        self.params[1].len()
    }

    /// Accuracy of the current classifier on `tokens: [r, d]`, then one
    /// cross-entropy update.
    pub fn step(&mut self, tokens: &Tensor<F>, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(tokens.clone());
        let w = tape.leaf(self.params[0].clone(), true);
        let b = tape.leaf(self.params[1].clone(), true);
        let logits = tape.linear(x, w, Some(b))?;
        let acc = accuracy(tape.value(logits), labels);
        let loss = tape.cross_entropy(logits, labels)?;
        tape.backward(loss)?;
        let grads = vec![tape.take_grad(w), tape.take_grad(b)];
        self.adam.step(&mut self.params, &grads);
        self.history.push(acc);
        Ok(acc)
    }
}

/// Fraction of rows whose arg-max column equals the label.
pub fn accuracy<F: Float>(logits: &Tensor<F>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == l
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    #[test]
    fn single_class_is_always_right() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Probe::<f64>::new(4, 1, 1e-3, &mut rng);
        let x = Tensor::from_fn(&[10, 4], |i| i as f64 - 3.0);
        assert_eq!(p.step(&x, &[0; 10]).unwrap(), 1.0);
    }

    #[test]
    fn untrained_probe_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20;
        let rows = 4000;
        let x = Tensor::<f64>::from_fn(&[rows, 16], |_| StandardNormal.sample(&mut rng));
        let labels: Vec<usize> = (0..rows).map(|r| r % n).collect();
        let mut p = Probe::<f64>::new(16, n, 1e-3, &mut rng);
        let acc = p.step(&x, &labels).unwrap();
        assert!((acc - 0.05).abs() < 0.03, "{acc}");
    }

    #[test]
    fn learns_separable_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers = Tensor::<f64>::from_fn(&[5, 8], |_| StandardNormal.sample(&mut rng));
        let labels: Vec<usize> = (0..200).map(|r| r % 5).collect();
        let x = Tensor::from_fn(&[200, 8], |i| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            centers.at(labels[i / 8], i % 8) + 0.1 * noise
        });
        let mut p = Probe::<f64>::new(8, 5, 0.05, &mut rng);
        let mut acc = 0.0;
        for _ in 0..200 {
            acc = p.step(&x, &labels).unwrap();
        }
        assert!(acc > 0.95, "{acc}");
    }
}
