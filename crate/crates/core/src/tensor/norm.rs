use super::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running per-channel statistics of a batch normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<F> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

impl<F: Float> BatchNormStats<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

impl<F: Float> Tape<F> {
    /// Batch normalization of `x: [rows, channels]`, where rows span both the
    /// batch and the sequence axes.
    ///
    /// Train mode normalizes with the biased batch variance and folds the
    /// batch statistics into `stats` (momentum 0.1, unbiased variance). Eval
    /// mode normalizes with `stats` as-is.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut BatchNormStats<F>, mode: NormMode) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        if stats.channels() != c || self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dims("batch_norm", xv.shape(), &[stats.channels()]));
        }
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut sq = vec![0.0; c];
                for row in xv.data().chunks(c) {
                    for j in 0..c {
                        mean[j] += row[j].to_f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for row in xv.data().chunks(c) {
                    for j in 0..c {
                        sq[j] += (row[j].to_f64() - mean[j]).powi(2);
                    }
                }
                let var: Vec<f64> = sq.iter().map(|s| s / rows as f64).collect();
                let unbiased = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
                for j in 0..c {
                    let rm = &mut stats.mean.data_mut()[j];
                    *rm = F::from_f64((1.0 - BN_MOMENTUM) * rm.to_f64() + BN_MOMENTUM * mean[j]);
                    let rv = &mut stats.var.data_mut()[j];
                    *rv = F::from_f64((1.0 - BN_MOMENTUM) * rv.to_f64() + BN_MOMENTUM * var[j] * unbiased);
                }
                (mean, var)
            }
            NormMode::Eval => (stats.mean.to_f64_vec(), stats.var.to_f64_vec()),
        };
        let inv_std: Vec<F> = var.iter().map(|v| F::from_f64(1.0 / (v + BN_EPS).sqrt())).collect();
        let mean: Vec<F> = mean.into_iter().map(F::from_f64).collect();
        let mut xhat = xv.clone();
        for row in xhat.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * gv[j] + bv[j];
            }
        }
        let gamma_shape = self.shape(gamma).to_vec();
        let beta_shape = self.shape(beta).to_vec();
        Ok(self.push_op(
            "batch_norm",
            out,
            &[x, gamma, beta],
            Box::new(move |args| {
                let g = args.grad;
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for (gr, xr) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                    for j in 0..c {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                }
                let dx = args.needs[0].then(|| {
                    let mut dx = Tensor::zeros(g.shape());
                    let n = F::from_f64(rows as f64);
                    for (dr, (gr, xr)) in dx.data_mut().chunks_mut(c).zip(g.data().chunks(c).zip(xhat.data().chunks(c))) {
                        for j in 0..c {
                            let dxh = gr[j] * gv[j];
                            dr[j] = match mode {
                                // dbeta = sum(dy), dgamma = sum(dy * xhat)
                                NormMode::Train => inv_std[j] * (n * dxh - gv[j] * dbeta[j] - xr[j] * gv[j] * dgamma[j]) / n,
                                NormMode::Eval => dxh * inv_std[j],
                            };
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    Some(Tensor::new(&gamma_shape, dgamma).expect("gamma gradient shape")),
                    Some(Tensor::new(&beta_shape, dbeta).expect("beta gradient shape")),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;

    fn affine(tape: &mut Tape<f64>, c: usize) -> (Var, Var) {
        (tape.constant(Tensor::ones(&[c])), tape.constant(Tensor::zeros(&[c])))
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[6, 2], 3.5));
        let (g, b) = affine(&mut tape, 2);
        let mut stats = BatchNormStats::new(2);
        let y = tape.batch_norm(x, g, b, &mut stats, NormMode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn standardizes_channels_and_updates_running_stats() {
        let mut tape = Tape::<f64>::new();
        // Channel with mean 5 and population std 2.
        let x = tape.constant(Tensor::from_f64(&[4, 1], &[3.0, 7.0, 3.0, 7.0]).unwrap());
        let (g, b) = affine(&mut tape, 1);
        let mut stats = BatchNormStats::new(1);
        let y = tape.batch_norm(x, g, b, &mut stats, NormMode::Train).unwrap();
        let y = tape.value(y).to_f64_vec();
        let mean = y.iter().sum::<f64>() / 4.0;
        let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-5);
        assert!((stats.mean.data()[0] - 0.5).abs() < 1e-12);
        // unbiased batch variance 16/3
        assert!((stats.var.data()[0] - (0.9 + 0.1 * 16.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_with_initial_stats_is_identity() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(&[3, 2], |i| i as f64 - 2.0);
        let x = tape.constant(xv.clone());
        let (g, b) = affine(&mut tape, 2);
        let mut stats = BatchNormStats::new(2);
        let y = tape.batch_norm(x, g, b, &mut stats, NormMode::Eval).unwrap();
        assert!(tape.value(y).max_abs_diff(&xv) < 1e-4);
        assert_eq!(stats, BatchNormStats::new(2));
    }

    #[test]
    fn gradients_in_both_modes() {
        let x = Tensor::from_fn(&[6, 3], |i| ((i * 31) % 7) as f64 * 0.3 - 0.8);
        let w = Tensor::from_fn(&[6, 3], |i| (i as f64 * 0.71).cos());
        let gamma = Tensor::from_f64(&[3], &[1.2, 0.7, -0.5]).unwrap();
        let beta = Tensor::from_f64(&[3], &[0.1, 0.0, 0.3]).unwrap();
        for mode in [NormMode::Train, NormMode::Eval] {
            let run = |t: &mut Tape<f64>, x: Var, g: Var, b: Var| -> Result<Var> {
                let mut stats = BatchNormStats {
                    mean: Tensor::from_f64(&[3], &[0.2, -0.1, 0.4]).unwrap(),
                    var: Tensor::from_f64(&[3], &[1.5, 0.8, 2.0]).unwrap(),
                };
                let y = t.batch_norm(x, g, b, &mut stats, mode)?;
                let w = t.constant(w.clone());
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            };
            let ex = gradient_check(
                |t, x| {
                    let g = t.constant(gamma.clone());
                    let b = t.constant(beta.clone());
                    run(t, x, g, b)
                },
                &x,
                1e-5,
            );
            let eg = gradient_check(
                |t, g| {
                    let x = t.constant(x.clone());
                    let b = t.constant(beta.clone());
                    run(t, x, g, b)
                },
                &gamma,
                1e-5,
            );
            assert!(ex < 1e-4 && eg < 1e-4, "{mode:?}: {ex} {eg}");
        }
    }
}
