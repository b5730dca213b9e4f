//! Differentiable operations recorded on a [`Tape`].

use rand::Rng;

use super::gemm::{gemm, MatMut, MatRef};
use super::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn mat_product<F: Float>(a: MatRef<'_, F>, b: MatRef<'_, F>) -> Tensor<F> {
    let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
    let (r, c) = (a.rows(), b.cols());
    gemm(F::one(), a, b, F::zero(), MatMut::new(out.data_mut(), r, c));
    out
}

impl<F: Float> Tape<F> {
    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(Error::dims("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = mat_product(MatRef::new(av.data(), m, k), MatRef::new(bv.data(), k, n));
        Ok(self.push_op(
            "matmul",
            out,
            &[a, b],
            Box::new(move |args| {
                let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
                let gm = MatRef::new(g.data(), m, n);
                let da = args.needs[0].then(|| mat_product(gm, MatRef::new(b.data(), k, n).t()));
                let db = args.needs[1].then(|| mat_product(MatRef::new(a.data(), m, k).t(), gm));
                vec![da, db]
            }),
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(
            "add",
            out,
            &[a, b],
            Box::new(|args| {
                let g = args.grad;
                vec![args.needs[0].then(|| g.clone()), args.needs[1].then(|| g.clone())]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(
            "sub",
            out,
            &[a, b],
            Box::new(|args| {
                let g = args.grad;
                vec![args.needs[0].then(|| g.clone()), args.needs[1].then(|| g.map(|x| -x))]
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(
            "mul",
            out,
            &[a, b],
            Box::new(|args| {
                let (a, b, g) = (args.inputs[0], args.inputs[1], args.grad);
                vec![
                    args.needs[0].then(|| g.zip_map(b, |g, y| g * y)),
                    args.needs[1].then(|| g.zip_map(a, |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push_op("scale", out, &[a], Box::new(move |args| vec![Some(args.grad.map(|g| g * s))]))
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push_op("add_scalar", out, &[a], Box::new(|args| vec![Some(args.grad.clone())]))
    }

    /// Adds a row vector (`[c]` or `[1,c]`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        let c = xv.cols();
        if rv.len() != c {
            return Err(Error::dims("add_row", xv.shape(), rv.shape()));
        }
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let row_shape = rv.shape().to_vec();
        Ok(self.push_op(
            "add_row",
            out,
            &[x, row],
            Box::new(move |args| {
                let g = args.grad;
                let drow = args.needs[1].then(|| {
                    let mut acc = vec![F::zero(); c];
                    for chunk in g.data().chunks(c) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    Tensor::new(&row_shape, acc).expect("row gradient shape")
                });
                vec![args.needs[0].then(|| g.clone()), drow]
            }),
        ))
    }

    /// `x * w + b` for `x: [r, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(F) -> F, df: impl Fn(F, F) -> F + Send + Sync + 'static) -> Var {
        let out = self.value(x).map(f);
        self.push_op(
            op,
            out,
            &[x],
            Box::new(move |args| {
                let (x, y, g) = (args.inputs[0].data(), args.output.data(), args.grad.data());
                let data = x.iter().zip(y).zip(g).map(|((&x, &y), &g)| g * df(x, y)).collect();
                vec![Some(Tensor::new(args.grad.shape(), data).expect("unary gradient shape"))]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary("relu", x, |v| v.max(F::zero()), |x, _| if x > F::zero() { F::one() } else { F::zero() })
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary("sin", x, |v| v.sin(), |x, _| x.cos())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary("exp", x, |v| v.exp(), |_, y| y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary("square", x, |v| v * v, |x, _| F::from_f64(2.0) * x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary("softplus", x, softplus, |x, _| sigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let shape = self.shape(x).to_vec();
        self.push_op(
            "sum",
            Tensor::scalar(s),
            &[x],
            Box::new(move |args| vec![Some(Tensor::full(&shape, args.grad.data()[0]))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_f64(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, F::one() / n)
    }

    /// Row-wise softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows input contains NaN".into()));
        }
        let c = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push_op(
            "softmax_rows",
            out,
            &[x],
            Box::new(move |args| {
                let (y, g) = (args.output, args.grad);
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: F = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in dr.iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::dims("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], out)?;
        Ok(self.push_op(
            "concat_cols",
            out,
            parts,
            Box::new(move |args| {
                let g = args.grad;
                let mut start = 0;
                widths
                    .iter()
                    .zip(&args.needs)
                    .map(|(&w, &need)| {
                        let s = start;
                        start += w;
                        need.then(|| {
                            let data = (0..rows).flat_map(|r| g.row(r)[s..s + w].iter().copied()).collect();
                            Tensor::new(&[rows, w], data).expect("concat gradient shape")
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let in_shape = self.shape(x).to_vec();
        Ok(self.push_op(
            "reshape",
            out,
            &[x],
            Box::new(move |args| vec![Some(args.grad.clone().reshape(&in_shape).expect("reshape gradient"))]),
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if start >= end || end > cols {
            return Err(Error::dims("slice_cols", xv.shape(), &[start, end]));
        }
        let w = end - start;
        let data = (0..rows).flat_map(|r| xv.row(r)[start..end].iter().copied()).collect();
        let out = Tensor::new(&[rows, w], data)?;
        Ok(self.push_op(
            "slice_cols",
            out,
            &[x],
            Box::new(move |args| {
                let mut dx = Tensor::zeros(&[rows, cols]);
                for (r, gr) in args.grad.data().chunks(w).enumerate() {
                    dx.data_mut()[r * cols + start..r * cols + end].copy_from_slice(gr);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Rows of `x` selected by `index` (repeats allowed); the backward pass
    /// scatter-adds. Doubles as embedding lookup and layout permutation.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!("gather_rows index {bad} out of range for {rows} rows")));
        }
        if index.is_empty() {
            return Err(Error::contract("gather_rows with an empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[index.len(), cols], data)?;
        let index = index.to_vec();
        let in_shape = xv.shape().to_vec();
        Ok(self.push_op(
            "gather_rows",
            out,
            &[x],
            Box::new(move |args| {
                let mut dx = Tensor::zeros(&in_shape);
                let d = dx.data_mut();
                for (gr, &i) in args.grad.data().chunks(cols).zip(&index) {
                    for (a, &v) in d[i * cols..(i + 1) * cols].iter_mut().zip(gr) {
                        *a += v;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let out = Tensor::new(xv.shape(), xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect()).expect("dropout shape");
        self.push_op(
            "dropout",
            out,
            &[x],
            Box::new(move |args| {
                let g = args.grad;
                let data = g.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                vec![Some(Tensor::new(g.shape(), data).expect("dropout gradient shape"))]
            }),
        )
    }

    /// Mean softmax cross-entropy of `logits: [r, classes]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = (lv.rows(), lv.cols());
        if labels.len() != rows || labels.iter().any(|&l| l >= classes) {
            return Err(Error::dims("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (row, &l) in probs.data_mut().chunks_mut(classes).zip(labels) {
            softmax_in_place(row);
            loss -= row[l].to_f64().max(1e-300).ln();
        }
        let n = rows as f64;
        let labels = labels.to_vec();
        Ok(self.push_op(
            "cross_entropy",
            Tensor::scalar(F::from_f64(loss / n)),
            &[logits],
            Box::new(move |args| {
                let scale = F::from_f64(args.grad.data()[0].to_f64() / n);
                let mut d = probs.clone();
                for (row, &l) in d.data_mut().chunks_mut(classes).zip(&labels) {
                    row[l] -= F::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// per-column scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dims("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data());
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xhat.data_mut().chunks_mut(c) {
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(F::from_f64(is));
            for v in row.iter_mut() {
                *v = F::from_f64((v.to_f64() - mean) * is);
            }
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((o, &g), &b) in row.iter_mut().zip(&gv).zip(bv) {
                *o = *o * g + b;
            }
        }
        let gamma_shape = self.shape(gamma).to_vec();
        let beta_shape = self.shape(beta).to_vec();
        Ok(self.push_op(
            "layer_norm",
            out,
            &[x, gamma, beta],
            Box::new(move |args| {
                let g = args.grad;
                let n = F::from_f64(c as f64);
                let mut dx = Tensor::zeros(g.shape());
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for (r, ((gr, xr), dr)) in g.data().chunks(c).zip(xhat.data().chunks(c)).zip(dx.data_mut().chunks_mut(c)).enumerate() {
                    let mut sum_d = F::zero();
                    let mut sum_dx = F::zero();
                    for j in 0..c {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        sum_d += dxh;
                        sum_dx += dxh * xr[j];
                    }
                    for j in 0..c {
                        let dxh = gr[j] * gv[j];
                        dr[j] = inv_std[r] * (n * dxh - sum_d - xr[j] * sum_dx) / n;
                    }
                }
                vec![
                    Some(dx),
                    Some(Tensor::new(&gamma_shape, dgamma).expect("gamma gradient shape")),
                    Some(Tensor::new(&beta_shape, dbeta).expect("beta gradient shape")),
                ]
            }),
        ))
    }

    /// Learned periodic time encoding.
    ///
    /// For input `x: [r, f]` and parameters `freq`, `phase: [f, k]`, each input
    /// feature expands to `k` channels: channel 0 is `freq*x + phase`, the
    /// rest are `sin(freq*x + phase)`. Output is `[r, f*k]`, feature-major.
    pub fn time2vec(&mut self, x: Var, freq: Var, phase: Var) -> Result<Var> {
        let (xv, wv, pv) = (self.value(x), self.value(freq), self.value(phase));
        let f = xv.cols();
        if wv.shape() != pv.shape() || wv.rows() != f {
            return Err(Error::dims("time2vec", xv.shape(), wv.shape()));
        }
        let k = wv.cols();
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * f * k);
        for r in 0..rows {
            for fi in 0..f {
                let xf = xv.at(r, fi);
                for j in 0..k {
                    let a = wv.at(fi, j) * xf + pv.at(fi, j);
                    out.push(if j == 0 { a } else { a.sin() });
                }
            }
        }
        let out = Tensor::new(&[rows, f * k], out)?;
        Ok(self.push_op(
            "time2vec",
            out,
            &[x, freq, phase],
            Box::new(move |args| {
                let (xv, wv, pv, g) = (args.inputs[0], args.inputs[1], args.inputs[2], args.grad);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                let mut dp = Tensor::zeros(pv.shape());
                for r in 0..rows {
                    for fi in 0..f {
                        let xf = xv.at(r, fi);
                        let mut acc_x = F::zero();
                        for j in 0..k {
                            let gv = g.at(r, fi * k + j);
                            let w = wv.at(fi, j);
                            // d/da of the channel activation
                            let da = if j == 0 { gv } else { gv * (w * xf + pv.at(fi, j)).cos() };
                            acc_x += da * w;
                            dw.data_mut()[fi * k + j] += da * xf;
                            dp.data_mut()[fi * k + j] += da;
                        }
                        dx.data_mut()[r * f + fi] = acc_x;
                    }
                }
                vec![Some(dx), Some(dw), Some(dp)]
            }),
        ))
    }
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::from_f64(f64::NEG_INFINITY), |a, b| a.max(b));
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn softplus<F: Float>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
