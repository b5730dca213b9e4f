use rayon::prelude::*;

use super::Layout;
use crate::tensor::gemm::{gemm, MatMut, MatRef};
use crate::tensor::softmax_rows_in_place;
use crate::tensor::{Float, Tape, Tensor, Var};

/// Exact softmax weights `softmax(Q K^T / sqrt(d_head))` of one group and head.
pub(crate) fn weights<F: Float>(q: &[F], k: &[F], lay: &Layout, g: usize, h: usize, out: &mut [F]) {
    let scale = F::from_f64(1.0 / (lay.d_head as f64).sqrt());
    gemm(
        scale,
        lay.q_block(q, g, h),
        lay.k_block(k, g, h).t(),
        F::zero(),
        MatMut::new(out, lay.lq, lay.lk),
    );
    softmax_rows_in_place(out, lay.lk);
}

impl<F: Float> Tape<F> {
    /// Multi-head softmax attention applied independently to each group of
    /// rows. `q: [G*Lq, H*dh]`, `k`, `v: [G*Lk, H*dh]`; returns `[G*Lq, H*dh]`.
    pub(crate) fn grouped_full_attention(&mut self, q: Var, k: Var, v: Var, lay: Layout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = lay.width();
        let a_len = lay.lq * lay.lk;
        let mut out = Tensor::zeros(&[lay.groups * lay.lq, width]);
        let mut saved = vec![F::zero(); lay.groups * lay.heads * a_len];
        out.data_mut()
            .par_chunks_mut(lay.lq * width)
            .zip(saved.par_chunks_mut(lay.heads * a_len))
            .enumerate()
            .for_each(|(g, (out_g, saved_g))| {
                for h in 0..lay.heads {
                    let a = &mut saved_g[h * a_len..(h + 1) * a_len];
                    weights(qv.data(), kv.data(), &lay, g, h, a);
                    gemm(
                        F::one(),
                        MatRef::new(a, lay.lq, lay.lk),
                        lay.k_block(vv.data(), g, h),
                        F::zero(),
                        MatMut::strided(out_g, h * lay.d_head, lay.lq, lay.d_head, width, 1),
                    );
                }
            });
        self.push_op(
            "full_attention",
            out,
            &[q, k, v],
            Box::new(move |args| {
                let (qv, kv, vv, g) = (args.inputs[0], args.inputs[1], args.inputs[2], args.grad);
                let scale = F::from_f64(1.0 / (lay.d_head as f64).sqrt());
                let mut dq = Tensor::zeros(qv.shape());
                let mut dk = Tensor::zeros(kv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                dq.data_mut()
                    .par_chunks_mut(lay.lq * width)
                    .zip(dk.data_mut().par_chunks_mut(lay.lk * width))
                    .zip(dv.data_mut().par_chunks_mut(lay.lk * width))
                    .enumerate()
                    .for_each(|(gi, ((dq_g, dk_g), dv_g))| {
                        let mut da = vec![F::zero(); a_len];
                        for h in 0..lay.heads {
                            let a = &saved[(gi * lay.heads + h) * a_len..][..a_len];
                            let am = MatRef::new(a, lay.lq, lay.lk);
                            let go = lay.q_block(g.data(), gi, h);
                            let off = h * lay.d_head;
                            gemm(F::one(), am.t(), go, F::zero(), MatMut::strided(dv_g, off, lay.lk, lay.d_head, width, 1));
                            gemm(F::one(), go, lay.k_block(vv.data(), gi, h).t(), F::zero(), MatMut::new(&mut da, lay.lq, lay.lk));
                            // dS = A * (dA - rowsum(dA * A))
                            for (dr, ar) in da.chunks_mut(lay.lk).zip(a.chunks(lay.lk)) {
                                let dot: F = dr.iter().zip(ar).map(|(&x, &y)| x * y).sum();
                                for (d, &av) in dr.iter_mut().zip(ar) {
                                    *d = av * (*d - dot);
                                }
                            }
                            let ds = MatRef::new(&da, lay.lq, lay.lk);
                            gemm(
                                scale,
                                ds,
                                lay.k_block(kv.data(), gi, h),
                                F::zero(),
                                MatMut::strided(dq_g, off, lay.lq, lay.d_head, width, 1),
                            );
                            gemm(
                                scale,
                                ds.t(),
                                lay.q_block(qv.data(), gi, h),
                                F::zero(),
                                MatMut::strided(dk_g, off, lay.lk, lay.d_head, width, 1),
                            );
                        }
                    });
                vec![Some(dq), Some(dk), Some(dv)]
            }),
        )
    }
}
