use crate::tensor::{Float, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with the L2 penalty folded into the gradient as `g + l2 * w`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub l2: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Float>(params: &[Tensor<F>], lr: f64, l2: f64) -> Self {
        Self {
            lr,
            l2,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. A missing gradient counts as zero.
    pub fn step<F: Float>(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].as_ref();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let wf = w.to_f64();
                let gi = g.map_or(0.0, |g| g.data()[i].to_f64()) + self.l2 * wf;
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                *w = F::from_f64(wf - update);
            }
        }
    }
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter().map(|x| x.to_f64().powi(2)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = F::from_f64(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = vec![Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap()];
        let mut adam = Adam::new(&p, 0.1, 0.0);
        adam.step(&mut p, &[Some(Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap())]);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 0.9).abs() < 1e-6, "{d:?}");
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = vec![Tensor::<f32>::from_f64(&[3], &[0.25, 2.0, -3.0]).unwrap()];
        let before = p.clone();
        let mut adam = Adam::new(&p, 0.0, 0.5);
        adam.step(&mut p, &[Some(Tensor::full(&[3], 7.0))]);
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::<f64>::from_f64(&[1], &[5.0]).unwrap()];
        let mut adam = Adam::new(&p, 0.05, 0.0);
        for _ in 0..2000 {
            let x = p[0].data()[0];
            adam.step(&mut p, &[Some(Tensor::from_f64(&[1], &[2.0 * (x - 2.0)]).unwrap())]);
        }
        assert!((p[0].data()[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-12);
    }
}
