use rayon::prelude::*;

use super::{FeatureKernel, Layout, PERFORMER_EPS};
use crate::tensor::gemm::{add_macs, gemm, MatMut, MatRef};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Random-feature maps of one group and head for queries and keys.
pub(crate) struct FeatureMaps<F> {
    /// `[Lq, m]`
    pub phi_q: Vec<F>,
    /// `[Lk, m]`
    pub phi_k: Vec<F>,
}

/// `phi(u)` for every row of a `[rows, d_head]` block, `u = x * d_head^(-1/4)`.
///
/// Softmax kernel: `exp(W u - |u|^2 / 2 - stab) / sqrt(m)`, where `stab` is the
/// per-row max for queries and the block max for keys. Both choices cancel in
/// the normalized output. ReLU kernel: `max(W u, 0) / sqrt(m)`.
fn feature_map<F: Float>(x: MatRef<'_, F>, w: &Tensor<F>, kernel: FeatureKernel, is_query: bool) -> Vec<F> {
    let (rows, dh) = (x.rows(), x.cols());
    let m = w.rows();
    let c = (dh as f64).powf(-0.25);
    let inv_sqrt_m = F::from_f64(1.0 / (m as f64).sqrt());
    let mut pre = vec![F::zero(); rows * m];
    gemm(F::from_f64(c), x, MatRef::new(w.data(), m, dh).t(), F::zero(), MatMut::new(&mut pre, rows, m));
    match kernel {
        FeatureKernel::Relu => {
            for v in pre.iter_mut() {
                *v = v.max(F::zero()) * inv_sqrt_m;
            }
        }
        FeatureKernel::Softmax => {
            let half_sq: Vec<F> = (0..rows)
                .map(|r| {
                    let s: f64 = (0..dh).map(|j| (x.get(r, j).to_f64() * c).powi(2)).sum();
                    F::from_f64(0.5 * s)
                })
                .collect();
            add_macs((rows * dh) as u64);
            let block_max = pre.iter().copied().fold(F::from_f64(f64::NEG_INFINITY), F::max);
            for (r, row) in pre.chunks_mut(m).enumerate() {
                let stab = if is_query {
                    row.iter().copied().fold(F::from_f64(f64::NEG_INFINITY), F::max)
                } else {
                    block_max
                };
                for v in row.iter_mut() {
                    *v = (*v - half_sq[r] - stab).exp() * inv_sqrt_m;
                }
            }
        }
    }
    pre
}

pub(crate) fn feature_maps<F: Float>(q: &[F], k: &[F], features: &Tensor<F>, kernel: FeatureKernel, lay: &Layout, g: usize, h: usize) -> FeatureMaps<F> {
    FeatureMaps {
        phi_q: feature_map(lay.q_block(q, g, h), features, kernel, true),
        phi_k: feature_map(lay.k_block(k, g, h), features, kernel, false),
    }
}

/// Backward through [`feature_map`]: gradient with respect to the block input.
fn feature_map_backward<F: Float>(x: MatRef<'_, F>, phi: &[F], dphi: &mut [F], w: &Tensor<F>, kernel: FeatureKernel, dx: MatMut<'_, F>) {
    let (rows, dh) = (x.rows(), x.cols());
    let m = w.rows();
    let c = (dh as f64).powf(-0.25);
    let cf = F::from_f64(c);
    match kernel {
        FeatureKernel::Relu => {
            let inv_sqrt_m = F::from_f64(1.0 / (m as f64).sqrt());
            for (d, &p) in dphi.iter_mut().zip(phi) {
                *d = if p > F::zero() { *d * inv_sqrt_m } else { F::zero() };
            }
            gemm(cf, MatRef::new(dphi, rows, m), MatRef::new(w.data(), m, dh), F::zero(), dx);
        }
        FeatureKernel::Softmax => {
            let mut row_sums = vec![F::zero(); rows];
            for ((d, &p), r) in dphi.iter_mut().zip(phi).zip((0..rows).flat_map(|r| std::iter::repeat_n(r, m))) {
                *d *= p;
                row_sums[r] += *d;
            }
            // dx = c * (dpre W - rowsum(dpre) * u), u = c * x
            let mut dx = dx;
            gemm(cf, MatRef::new(dphi, rows, m), MatRef::new(w.data(), m, dh), F::zero(), dx.reborrow());
            for (r, &s) in row_sums.iter().enumerate() {
                for j in 0..dh {
                    let v = dx.get(r, j) - cf * cf * s * x.get(r, j);
                    dx.set(r, j, v);
                }
            }
        }
    }
}

impl<F: Float> Tape<F> {
    /// FAVOR-style random-feature attention applied independently to each
    /// group of rows; same layout contract as the exact variant. Cost is
    /// linear in `Lq + Lk`. `features[h]` is the `[m, d_head]` projection of
    /// head `h`.
    pub(crate) fn grouped_performer_attention(&mut self, q: Var, k: Var, v: Var, lay: Layout, features: Vec<Tensor<F>>, kernel: FeatureKernel) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = lay.width();
        let m = features[0].rows();
        let dh = lay.d_head;
        let eps = F::from_f64(PERFORMER_EPS);
        let mut out = Tensor::zeros(&[lay.groups * lay.lq, width]);
        out.data_mut().par_chunks_mut(lay.lq * width).enumerate().for_each(|(g, out_g)| {
            for (h, wf) in features.iter().enumerate() {
                let maps = feature_maps(qv.data(), kv.data(), wf, kernel, &lay, g, h);
                let (kvm, ksum) = key_summary(&maps.phi_k, lay.k_block(vv.data(), g, h), lay.lk, m);
                let mut dst = MatMut::strided(out_g, h * dh, lay.lq, dh, width, 1);
                gemm(
                    F::one(),
                    MatRef::new(&maps.phi_q, lay.lq, m),
                    MatRef::new(&kvm, m, dh),
                    F::zero(),
                    dst.reborrow(),
                );
                let den = denominators(&maps.phi_q, &ksum, lay.lq, m, eps);
                for (r, &d) in den.iter().enumerate() {
                    for j in 0..dh {
                        let val = dst.get(r, j) / d;
                        dst.set(r, j, val);
                    }
                }
            }
        });
        self.push_op(
            "performer_attention",
            out,
            &[q, k, v],
            Box::new(move |args| {
                let (qv, kv, vv, go) = (args.inputs[0], args.inputs[1], args.inputs[2], args.grad);
                let out = args.output;
                let mut dq = Tensor::zeros(qv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                dq.data_mut()
                    .par_chunks_mut(lay.lq * width)
                    .zip(dk.data_mut().par_chunks_mut(lay.lk * width))
                    .zip(dv.data_mut().par_chunks_mut(lay.lk * width))
                    .enumerate()
                    .for_each(|(g, ((dq_g, dk_g), dv_g))| {
                        for (h, wf) in features.iter().enumerate() {
                            let off = h * dh;
                            let maps = feature_maps(qv.data(), kv.data(), wf, kernel, &lay, g, h);
                            let vb = lay.k_block(vv.data(), g, h);
                            let (kvm, ksum) = key_summary(&maps.phi_k, vb, lay.lk, m);
                            let den = denominators(&maps.phi_q, &ksum, lay.lq, m, eps);
                            let gb = lay.q_block(go.data(), g, h);
                            let ob = lay.q_block(out.data(), g, h);
                            // dnum = dO / den ; dden = -rowsum(dO * O) / den
                            let mut dnum = vec![F::zero(); lay.lq * dh];
                            let mut dden = vec![F::zero(); lay.lq];
                            for r in 0..lay.lq {
                                let mut acc = F::zero();
                                for j in 0..dh {
                                    let gv = gb.get(r, j);
                                    dnum[r * dh + j] = gv / den[r];
                                    acc += gv * ob.get(r, j);
                                }
                                // A clamped normalizer is a constant.
                                dden[r] = if den[r] > eps { -acc / den[r] } else { F::zero() };
                            }
                            add_macs((2 * lay.lq * dh) as u64);
                            let dnum_m = MatRef::new(&dnum, lay.lq, dh);
                            let phi_q = MatRef::new(&maps.phi_q, lay.lq, m);
                            let phi_k = MatRef::new(&maps.phi_k, lay.lk, m);

                            // dphi_q = dnum KV^T + dden ksum^T
                            let mut dphi_q = vec![F::zero(); lay.lq * m];
                            gemm(F::one(), dnum_m, MatRef::new(&kvm, m, dh).t(), F::zero(), MatMut::new(&mut dphi_q, lay.lq, m));
                            for (row, &d) in dphi_q.chunks_mut(m).zip(&dden) {
                                for (x, &s) in row.iter_mut().zip(&ksum) {
                                    *x += d * s;
                                }
                            }
                            // dKV = phi_q^T dnum ; dksum = phi_q^T dden
                            let mut dkv = vec![F::zero(); m * dh];
                            gemm(F::one(), phi_q.t(), dnum_m, F::zero(), MatMut::new(&mut dkv, m, dh));
                            let mut dksum = vec![F::zero(); m];
                            gemm(F::one(), phi_q.t(), MatRef::new(&dden, lay.lq, 1), F::zero(), MatMut::new(&mut dksum, m, 1));
                            // dphi_k = V dKV^T + 1 dksum^T ; dV = phi_k dKV
                            let mut dphi_k = vec![F::zero(); lay.lk * m];
                            gemm(F::one(), vb, MatRef::new(&dkv, m, dh).t(), F::zero(), MatMut::new(&mut dphi_k, lay.lk, m));
                            for row in dphi_k.chunks_mut(m) {
                                for (x, &s) in row.iter_mut().zip(&dksum) {
                                    *x += s;
                                }
                            }
                            gemm(
                                F::one(),
                                phi_k,
                                MatRef::new(&dkv, m, dh),
                                F::zero(),
                                MatMut::strided(dv_g, off, lay.lk, dh, width, 1),
                            );
                            feature_map_backward(
                                lay.q_block(qv.data(), g, h),
                                &maps.phi_q,
                                &mut dphi_q,
                                wf,
                                kernel,
                                MatMut::strided(dq_g, off, lay.lq, dh, width, 1),
                            );
                            feature_map_backward(
                                lay.k_block(kv.data(), g, h),
                                &maps.phi_k,
                                &mut dphi_k,
                                wf,
                                kernel,
                                MatMut::strided(dk_g, off, lay.lk, dh, width, 1),
                            );
                        }
                    });
                vec![Some(dq), Some(dk), Some(dv)]
            }),
        )
    }
}

/// `phi_k^T V` (`[m, dh]`) and the column sums of `phi_k` (`[m]`).
fn key_summary<F: Float>(phi_k: &[F], v: MatRef<'_, F>, lk: usize, m: usize) -> (Vec<F>, Vec<F>) {
    let dh = v.cols();
    let mut kvm = vec![F::zero(); m * dh];
    gemm(F::one(), MatRef::new(phi_k, lk, m).t(), v, F::zero(), MatMut::new(&mut kvm, m, dh));
    let mut ksum = vec![F::zero(); m];
    for row in phi_k.chunks(m) {
        for (s, &x) in ksum.iter_mut().zip(row) {
            *s += x;
        }
    }
    add_macs((lk * m) as u64);
    (kvm, ksum)
}

/// `max(phi_q ksum, eps)` per query row.
///
/// Clamping rather than adding keeps the normalized output independent of
/// the feature stabilizers, which rescale numerator and normalizer alike.
pub(crate) fn denominators<F: Float>(phi_q: &[F], ksum: &[F], lq: usize, m: usize, eps: F) -> Vec<F> {
    add_macs((lq * m) as u64);
    phi_q
        .chunks(m)
        .map(|row| row.iter().zip(ksum).map(|(&a, &b)| a * b).sum::<F>().max(eps))
        .collect()
}
