use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Training objective over the predicted Normal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    Mse,
    Mae,
    Nll,
}

impl std::str::FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "mae" => Ok(Self::Mae),
            "nll" => Ok(Self::Nll),
            other => Err(Error::config(format!("unknown loss `{other}` (expected mse, mae or nll)"))),
        }
    }
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::Mse => "mse",
            Loss::Mae => "mae",
            Loss::Nll => "nll",
        }
    }
}

impl<F: Float> Tape<F> {
    /// Mean of `loss` over cells where `mask` holds. Masked cells contribute
    /// neither value nor gradient. `std` only enters the NLL.
    pub fn masked_loss(&mut self, mean: Var, std: Var, target: &[f64], mask: &[bool], loss: Loss) -> Result<Var> {
        let (mv, sv) = (self.value(mean), self.value(std));
        if mv.shape() != sv.shape() || mv.len() != target.len() || mask.len() != target.len() {
            return Err(Error::dims("masked_loss", mv.shape(), &[target.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Numeric("every target cell is masked".into()));
        }
        let mu = mv.to_f64_vec();
        let sigma = sv.to_f64_vec();
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut total = 0.0;
        let mut d_mean = vec![0.0; mu.len()];
        let mut d_std = vec![0.0; mu.len()];
        for i in (0..mu.len()).filter(|&i| mask[i]) {
            let e = mu[i] - target[i];
            match loss {
                Loss::Mse => {
                    total += e * e;
                    d_mean[i] = 2.0 * e;
                }
                Loss::Mae => {
                    total += e.abs();
                    d_mean[i] = if e > 0.0 {
                        1.0
                    } else if e < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                Loss::Nll => {
                    let var = sigma[i] * sigma[i];
                    total += half_ln_2pi + sigma[i].ln() + e * e / (2.0 * var);
                    d_mean[i] = e / var;
                    d_std[i] = 1.0 / sigma[i] - e * e / (var * sigma[i]);
                }
            }
        }
        let n = count as f64;
        let shape = mv.shape().to_vec();
        let uses_std = loss == Loss::Nll;
        Ok(self.push_op(
            "masked_loss",
            Tensor::scalar(F::from_f64(total / n)),
            &[mean, std],
            Box::new(move |args| {
                let g = args.grad.data()[0].to_f64() / n;
                let scaled = |d: &[f64]| Tensor::from_f64(&shape, &d.iter().map(|x| x * g).collect::<Vec<_>>()).expect("loss gradient shape");
                vec![args.needs[0].then(|| scaled(&d_mean)), (args.needs[1] && uses_std).then(|| scaled(&d_std))]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use crate::training::metrics::{compute_metric, Metric};

    const TARGET: [f64; 6] = [0.5, -1.0, 2.0, 0.0, 1.5, -0.3];
    const MASK: [bool; 6] = [true, true, false, true, true, false];

    fn inputs() -> Tensor<f64> {
        Tensor::from_f64(&[2, 6], &[0.1, -0.7, 5.0, 0.4, 1.1, 9.0, 0.8, 1.3, 0.2, 2.0, 0.6, 1.0]).unwrap()
    }

    fn eval(t: &mut Tape<f64>, x: Var, loss: Loss) -> Result<Var> {
        let mean = t.slice_cols(x, 0, 6)?;
        let mean = t.gather_rows(mean, &[0])?;
        let std = t.slice_cols(x, 0, 6)?;
        let std = t.gather_rows(std, &[1])?;
        t.masked_loss(mean, std, &TARGET, &MASK, loss)
    }

    #[test]
    fn matches_metric_definitions() {
        let x = inputs();
        for (loss, metric) in [(Loss::Mse, Metric::Mse), (Loss::Mae, Metric::Mae), (Loss::Nll, Metric::Nll)] {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let l = eval(&mut t, v, loss).unwrap();
            let expected = compute_metric(metric, x.row(0), x.row(1), &TARGET, &MASK).unwrap();
            assert!((t.value(l).data()[0] - expected).abs() < 1e-12, "{loss:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for loss in [Loss::Mse, Loss::Mae, Loss::Nll] {
            let err = gradient_check(|t, x| eval(t, x, loss), &inputs(), 1e-5);
            assert!(err < 1e-4, "{loss:?}: {err}");
        }
    }

    #[test]
    fn masked_cells_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let mean = t.leaf(Tensor::from_f64(&[6], &[1.0; 6]).unwrap(), true);
        let std = t.leaf(Tensor::from_f64(&[6], &[1.0; 6]).unwrap(), true);
        let l = t.masked_loss(mean, std, &TARGET, &MASK, Loss::Nll).unwrap();
        t.backward(l).unwrap();
        for (i, &m) in MASK.iter().enumerate() {
            if !m {
                assert_eq!(t.grad(mean).unwrap().data()[i], 0.0);
                assert_eq!(t.grad(std).unwrap().data()[i], 0.0);
            }
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let mut t = Tape::<f64>::new();
        let m = t.constant(Tensor::zeros(&[2]));
        assert!(t.masked_loss(m, m, &[1.0, 2.0], &[false, false], Loss::Mse).is_err());
    }
}
