//! Strided matrix views over flat storage and the GEMM entry point.
//!
//! Every matrix product in the crate goes through [`gemm`], which also feeds
//! a process-wide multiply-accumulate counter used to verify complexity
//! claims empirically.

use std::sync::atomic::{AtomicU64, Ordering};

use super::Float;

static MACS: AtomicU64 = AtomicU64::new(0);

/// Multiply-accumulate operations issued since the last [`reset_mac_count`].
pub fn mac_count() -> u64 {
    MACS.load(Ordering::Relaxed)
}

pub fn reset_mac_count() {
    MACS.store(0, Ordering::Relaxed);
}

/// Record multiply-accumulates performed outside [`gemm`].
pub fn add_macs(n: u64) {
    MACS.fetch_add(n, Ordering::Relaxed);
}

#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    data: &'a [F],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F> MatRef<'a, F> {
    /// Contiguous row-major `rows x cols` matrix.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [F], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let m = Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        };
        assert!(m.last_index() < data.len(), "matrix view out of bounds");
        m
    }

    /// Transposed view without copying.
    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> F
    where
        F: Copy,
    {
        self.data[self.offset + r * self.rs + c * self.cs]
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows.max(1) - 1) * self.rs + (self.cols.max(1) - 1) * self.cs
    }
}

pub struct MatMut<'a, F> {
    data: &'a mut [F],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F> MatMut<'a, F> {
    pub fn new(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [F], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let last = offset + (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs;
        assert!(last < data.len(), "matrix view out of bounds");
        Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

impl<F: Copy> MatMut<'_, F> {
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[self.offset + r * self.rs + c * self.cs]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[self.offset + r * self.rs + c * self.cs] = v;
    }

    /// Shorter-lived view of the same block.
    pub fn reborrow(&mut self) -> MatMut<'_, F> {
        MatMut {
            data: self.data,
            offset: self.offset,
            rows: self.rows,
            cols: self.cols,
            rs: self.rs,
            cs: self.cs,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm<F: Float>(alpha: F, a: MatRef<'_, F>, b: MatRef<'_, F>, beta: F, c: MatMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "gemm inner extents");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output extents");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    MACS.fetch_add((m * k * n) as u64, Ordering::Relaxed);
    // SAFETY: all three views were bounds-checked at construction and `c`
    // is uniquely borrowed, so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        )
    }
}
