use super::gemm::{gemm, MatMut, MatRef};
use super::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Output length of a 1-D convolution, or `None` when it would be < 1.
pub fn conv_out_len(len: usize, width: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || len + 2 * padding < width {
        return None;
    }
    Some((len + 2 * padding - width) / stride + 1)
}

struct Geometry {
    segments: usize,
    len: usize,
    len_out: usize,
    width: usize,
    c_in: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    /// Source row in `x` feeding output position `o` at tap `w`, if not padding.
    fn source(&self, seg: usize, o: usize, w: usize) -> Option<usize> {
        let pos = (o * self.stride + w).checked_sub(self.padding)?;
        (pos < self.len).then_some(seg * self.len + pos)
    }

    fn im2col<F: Float>(&self, x: &[F]) -> Vec<F> {
        let k = self.width * self.c_in;
        let mut cols = vec![F::zero(); self.segments * self.len_out * k];
        for s in 0..self.segments {
            for o in 0..self.len_out {
                let row = &mut cols[(s * self.len_out + o) * k..][..k];
                for w in 0..self.width {
                    if let Some(src) = self.source(s, o, w) {
                        row[w * self.c_in..(w + 1) * self.c_in].copy_from_slice(&x[src * self.c_in..(src + 1) * self.c_in]);
                    }
                }
            }
        }
        cols
    }
}

impl<F: Float> Tape<F> {
    /// Strided cross-correlation over a single sequence:
    /// `x: [len, c_in]`, `kernel: [width, c_in, c_out]` -> `[len_out, c_out]`.
    pub fn strided_conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.segmented_conv1d(x, kernel, 1, stride, padding)
    }

    /// [`Tape::strided_conv1d`] applied independently to `segments` equal,
    /// contiguous row blocks of `x`, so no window crosses a block boundary.
    pub fn segmented_conv1d(&mut self, x: Var, kernel: Var, segments: usize, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if kv.shape().len() != 3 || xv.cols() != kv.shape()[1] {
            return Err(Error::dims("strided_conv1d", xv.shape(), kv.shape()));
        }
        if segments == 0 || xv.rows() % segments != 0 {
            return Err(Error::contract(format!("{} rows cannot be split into {segments} segments", xv.rows())));
        }
        let (width, c_in, c_out) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        let len = xv.rows() / segments;
        let len_out = conv_out_len(len, width, stride, padding).ok_or_else(|| {
            Error::config(format!(
                "convolution of length {len} with width {width}, stride {stride}, padding {padding} has no output"
            ))
        })?;
        let geo = Geometry {
            segments,
            len,
            len_out,
            width,
            c_in,
            stride,
            padding,
        };
        let k = width * c_in;
        let rows_out = segments * len_out;
        let cols = geo.im2col(xv.data());
        let mut out = Tensor::zeros(&[rows_out, c_out]);
        gemm(
            F::one(),
            MatRef::new(&cols, rows_out, k),
            MatRef::new(kv.data(), k, c_out),
            F::zero(),
            MatMut::new(out.data_mut(), rows_out, c_out),
        );
        let x_shape = xv.shape().to_vec();
        let k_shape = kv.shape().to_vec();
        Ok(self.push_op(
            "strided_conv1d",
            out,
            &[x, kernel],
            Box::new(move |args| {
                let g = MatRef::new(args.grad.data(), rows_out, c_out);
                let dkernel = args.needs[1].then(|| {
                    let mut dk = Tensor::zeros(&k_shape);
                    gemm(
                        F::one(),
                        MatRef::new(&cols, rows_out, k).t(),
                        g,
                        F::zero(),
                        MatMut::new(dk.data_mut(), k, c_out),
                    );
                    dk
                });
                let dx = args.needs[0].then(|| {
                    let mut dcols = vec![F::zero(); rows_out * k];
                    gemm(
                        F::one(),
                        g,
                        MatRef::new(args.inputs[1].data(), k, c_out).t(),
                        F::zero(),
                        MatMut::new(&mut dcols, rows_out, k),
                    );
                    let mut dx = Tensor::zeros(&x_shape);
                    let d = dx.data_mut();
                    for s in 0..segments {
                        for o in 0..len_out {
                            let row = &dcols[(s * len_out + o) * k..][..k];
                            for w in 0..width {
                                if let Some(src) = geo.source(s, o, w) {
                                    for (a, &b) in d[src * c_in..(src + 1) * c_in].iter_mut().zip(&row[w * c_in..(w + 1) * c_in]) {
                                        *a += b;
                                    }
                                }
                            }
                        }
                    }
                    dx
                });
                vec![dx, dkernel]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use proptest::prelude::*;

    #[test]
    fn halving_arithmetic() {
        assert_eq!(conv_out_len(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_len(1, 3, 1, 0), None);
    }

    #[test]
    fn hand_convolution() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[3, 1, 1], &[1.0, 1.0, 1.0]).unwrap());
        let y = tape.strided_conv1d(x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 9.0]);
    }

    #[test]
    fn identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let xv = Tensor::from_fn(&[5, 3], |i| i as f64 * 0.5 - 2.0);
        let x = tape.constant(xv.clone());
        let k = tape.constant(Tensor::from_fn(&[1, 3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 }));
        let y = tape.strided_conv1d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn no_output_is_config_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1]));
        let k = tape.constant(Tensor::zeros(&[3, 1, 1]));
        assert!(matches!(tape.strided_conv1d(x, k, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn segments_do_not_mix() {
        let mut tape = Tape::<f64>::new();
        // Two segments of length 4; the second is all zeros.
        let x = tape.constant(Tensor::from_f64(&[8, 1], &[1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let k = tape.constant(Tensor::from_f64(&[3, 1, 1], &[1.0, 1.0, 1.0]).unwrap());
        let y = tape.segmented_conv1d(x, k, 2, 2, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 9.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_gradients() {
        let x = Tensor::from_fn(&[12, 2], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
        let kernel = Tensor::from_fn(&[3, 2, 3], |i| ((i * 104729) % 11) as f64 / 11.0 - 0.5);
        let weights = Tensor::from_fn(&[6, 3], |i| (i as f64 * 0.37).sin() + 0.1);
        let loss = |tape: &mut Tape<f64>, x: Var, k: Var| -> Result<Var> {
            let y = tape.segmented_conv1d(x, k, 2, 2, 1)?;
            let w = tape.constant(weights.clone());
            let y = tape.mul(y, w)?;
            Ok(tape.sum(y))
        };
        let ex = gradient_check(
            |t, x| {
                let k = t.constant(kernel.clone());
                loss(t, x, k)
            },
            &x,
            1e-5,
        );
        let ek = gradient_check(
            |t, k| {
                let x = t.constant(x.clone());
                loss(t, x, k)
            },
            &kernel,
            1e-5,
        );
        assert!(ex < 1e-4 && ek < 1e-4, "{ex} {ek}");
    }

    proptest! {
        #[test]
        fn halves_any_even_length(half in 1usize..200) {
            prop_assert_eq!(conv_out_len(2 * half, 3, 2, 1), Some(half));
        }
    }
}
