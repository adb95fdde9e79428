//! In-memory dense blocks, their residency accounting, and the dense
//! kernels that run on them.

use std::cell::Cell;

use crate::error::{Error, Result};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

fn track_alloc(n: usize) {
    LIVE.with(|live| {
        let now = live.get() + n;
        live.set(now);
        PEAK.with(|peak| peak.set(peak.get().max(now)));
    });
}

fn track_free(n: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(n)));
}

/// Matrix elements currently held in blocks by this thread.
pub fn live_block_elements() -> usize {
    LIVE.with(Cell::get)
}

/// High-water mark of [`live_block_elements`] since the last reset.
pub fn peak_block_elements() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_peak_block_elements() {
    let live = live_block_elements();
    PEAK.with(|p| p.set(live));
}

/// Dense row-major block. Every block counts towards the residency of the
/// thread that created it, and blocks never migrate between threads inside
/// the out-of-core routines.
#[derive(Debug, PartialEq)]
pub struct Block {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Block {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        track_alloc(rows * cols);
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("{rows}x{cols} block needs {} values, got {}", rows * cols, data.len())));
        }
        track_alloc(rows * cols);
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut b = Self::zeros(n, n);
        for i in 0..n {
            b.data[i * n + i] = 1.0;
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn scale(&mut self, alpha: f64) {
        if alpha != 1.0 {
            for v in &mut self.data {
                *v *= alpha;
            }
        }
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Block) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += alpha * s;
        }
    }

    /// Transposes without a second buffer.
    pub fn transpose_in_place(&mut self) {
        let (r, c) = (self.rows, self.cols);
        if r == c {
            for i in 0..r {
                for j in i + 1..c {
                    self.data.swap(i * c + j, j * c + i);
                }
            }
        } else if r > 1 && c > 1 {
            // Cycle-following: element at position p moves to (p · r) mod (rc - 1).
            let len = r * c;
            let mut visited = vec![0u64; len.div_ceil(64)];
            for start in 1..len - 1 {
                if visited[start / 64] >> (start % 64) & 1 == 1 {
                    continue;
                }
                let mut p = start;
                let mut carry = self.data[start];
                loop {
                    let next = (p * r) % (len - 1);
                    std::mem::swap(&mut self.data[next], &mut carry);
                    visited[next / 64] |= 1 << (next % 64);
                    p = next;
                    if p == start {
                        break;
                    }
                }
            }
        }
        self.rows = c;
        self.cols = r;
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

impl Clone for Block {
    fn clone(&self) -> Self {
        track_alloc(self.data.len());
        Self { rows: self.rows, cols: self.cols, data: self.data.clone() }
    }
}

impl Drop for Block {
    fn drop(&mut self) {
        track_free(self.data.len());
    }
}

/// `acc += alpha · a · b`.
pub fn gemm_acc(acc: &mut Block, alpha: f64, a: &Block, b: &Block) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((acc.rows, acc.cols), (a.rows, b.cols), "output shape differs");
    let n = b.cols;
    for i in 0..a.rows {
        let out = &mut acc.data[i * n..(i + 1) * n];
        for l in 0..a.cols {
            let s = alpha * a.data[i * a.cols + l];
            if s == 0.0 {
                continue;
            }
            let row = &b.data[l * n..(l + 1) * n];
            for (o, &v) in out.iter_mut().zip(row) {
                *o += s * v;
            }
        }
    }
}

/// Inverse of a symmetric positive definite block through its Cholesky
/// factor. Only the lower triangle of `m` is read. `pivot_offset` is added
/// to the local pivot index in the error.
pub fn spd_inverse(mut m: Block, pivot_offset: usize) -> Result<Block> {
    assert_eq!(m.rows, m.cols, "leaf block must be square");
    let n = m.rows;
    let a = &mut m.data;

    // Lower Cholesky factor, in place.
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: pivot_offset + j, value: d });
        }
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
    }

    // W = L^-1 by forward substitution, one column at a time.
    let mut w = Block::zeros(n, n);
    for j in 0..n {
        w.data[j * n + j] = 1.0 / a[j * n + j];
        for i in j + 1..n {
            let mut s = 0.0;
            for k in j..i {
                s += a[i * n + k] * w.data[k * n + j];
            }
            w.data[i * n + j] = -s / a[i * n + i];
        }
    }

    // M^-1 = W^T W, mirrored so both triangles agree exactly.
    for i in 0..n {
        for k in 0..=i {
            let mut s = 0.0;
            for l in i..n {
                s += w.data[l * n + i] * w.data[l * n + k];
            }
            a[i * n + k] = s;
            a[k * n + i] = s;
        }
    }
    Ok(m)
}
