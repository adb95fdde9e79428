//! The sparse analysis operator `Φ`.
//!
//! Row `p(k, i, j)` of `Φ` is the layer-`k` kernel centred on the sample
//! `(u_k(i), u_k(j))`, so `c = Φ f` evaluates every cell response at once and
//! `Φ* c` is the plain weighted sum of analysis filters. Images are flattened
//! row-major: pixel `(x, y)` is column `x·N + y`.
//!
//! Each row of layer `k` is scaled by the layer's sampling stride
//! `2^(K-k-1)`. A layer decimated by `s` in both directions keeps `1/s²` of
//! the cells, and the gain `s` restores its share of the frame energy. With
//! it the frame operator `Φ*Φ` stays well conditioned as `N` grows and
//! coefficient magnitudes are comparable across layers, which the rank
//! ordering relies on. The finest layer has gain 1.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pyramid::{dog_kernel_with, layer_stride, CoarseLayer, DoGParams, FilterKernel, GridSpec};

/// Square grayscale image with real samples, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::invalid(format!(
                "image of side {side} needs {} samples, got {}",
                side * side,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("image sample {pos} is not finite")));
        }
        Ok(Self { side, data })
    }

    pub fn zeros(side: usize) -> Self {
        Self { side, data: vec![0.0; side * side] }
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(side * side);
        for x in 0..side {
            for y in 0..side {
                data.push(f(x, y));
            }
        }
        Self { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.side + y]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        for v in &mut self.data {
            *v *= factor;
        }
        self
    }
}

/// Convolution convention at the image border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Pixels outside `[0, N)²` are zero; rows near the border are clipped.
    #[default]
    ZeroPad,
    /// The image wraps around; every row keeps its full kernel mass.
    Periodic,
}

impl Boundary {
    pub fn code(self) -> u8 {
        match self {
            Boundary::ZeroPad => 0,
            Boundary::Periodic => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Boundary::ZeroPad),
            1 => Some(Boundary::Periodic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorOptions {
    pub boundary: Boundary,
    pub coarse: CoarseLayer,
    /// Upper bound on the estimated in-memory size of the sparse operator.
    pub memory_cap_bytes: u64,
}

impl Default for OperatorOptions {
    fn default() -> Self {
        Self { boundary: Boundary::ZeroPad, coarse: CoarseLayer::ScalingFunction, memory_cap_bytes: 8 << 30 }
    }
}

/// Gain applied to every row of layer `k`: its sampling stride.
pub fn layer_gain(k: usize, layer_count: usize) -> f64 {
    layer_stride(k, layer_count) as f64
}

/// Compressed sparse rows.
#[derive(Debug, Clone, Default)]
struct Compressed {
    starts: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl Compressed {
    fn line(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.starts[r], self.starts[r + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    fn transpose(&self, cols: usize) -> Compressed {
        let mut counts = vec![0usize; cols + 1];
        for &c in &self.indices {
            counts[c as usize + 1] += 1;
        }
        for i in 0..cols {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut cursor = counts;
        let mut indices = vec![0u32; self.indices.len()];
        let mut values = vec![0.0; self.values.len()];
        for r in 0..self.starts.len() - 1 {
            let (cs, vs) = self.line(r);
            for (&c, &v) in cs.iter().zip(vs) {
                let slot = &mut cursor[c as usize];
                indices[*slot] = r as u32;
                values[*slot] = v;
                *slot += 1;
            }
        }
        Compressed { starts, indices, values }
    }
}

/// Sparse `Φ` with both row and column access.
#[derive(Debug, Clone)]
pub struct AnalysisOperator {
    grid: GridSpec,
    params: DoGParams,
    options: OperatorOptions,
    kernels: Vec<FilterKernel>,
    rows: Compressed,
    cols: Compressed,
}

impl AnalysisOperator {
    pub fn new(grid: GridSpec, params: DoGParams) -> Result<Self> {
        Self::with_options(grid, params, OperatorOptions::default())
    }

    pub fn with_options(grid: GridSpec, params: DoGParams, options: OperatorOptions) -> Result<Self> {
        params.validate()?;
        let expected = GridSpec::new(grid.image_side, grid.layer_count, &params)?;
        if expected != grid {
            return Err(Error::invalid("grid does not match the supplied parameters"));
        }
        let n = grid.image_side;
        if n * n > u32::MAX as usize || grid.total_cells > u32::MAX as usize {
            return Err(Error::Resource(format!("image side {n} exceeds the 32-bit index space")));
        }
        let estimate = estimated_bytes(&grid);
        if estimate > options.memory_cap_bytes {
            return Err(Error::Resource(format!(
                "analysis operator needs about {estimate} bytes, above the configured cap of {} bytes",
                options.memory_cap_bytes
            )));
        }

        let kernels = (0..grid.layer_count)
            .map(|k| dog_kernel_with(k, &params, grid.layer_count, options.coarse))
            .collect::<Result<Vec<_>>>()?;

        let mut row_lists: Vec<(Vec<u32>, Vec<f64>)> = Vec::with_capacity(grid.total_cells);
        for (k, kernel) in kernels.iter().enumerate() {
            let side = grid.layer_sides[k];
            let gain = layer_gain(k, grid.layer_count);
            let wrapped = match options.boundary {
                Boundary::Periodic => Some(periodize(kernel, n)),
                Boundary::ZeroPad => None,
            };
            let layer: Vec<(Vec<u32>, Vec<f64>)> = (0..side * side)
                .into_par_iter()
                .map(|cell| {
                    let ux = grid.sample_position(k, cell / side);
                    let uy = grid.sample_position(k, cell % side);
                    match &wrapped {
                        None => clipped_row(kernel, gain, n, ux, uy),
                        Some(w) => periodic_row(w, gain, n, ux, uy),
                    }
                })
                .collect();
            row_lists.extend(layer);
        }

        let nnz = row_lists.iter().map(|(c, _)| c.len()).sum();
        let mut rows = Compressed {
            starts: Vec::with_capacity(grid.total_cells + 1),
            indices: Vec::with_capacity(nnz),
            values: Vec::with_capacity(nnz),
        };
        rows.starts.push(0);
        for (c, v) in row_lists {
            rows.indices.extend_from_slice(&c);
            rows.values.extend_from_slice(&v);
            rows.starts.push(rows.indices.len());
        }
        let cols = rows.transpose(n * n);
        Ok(Self { grid, params, options, kernels, rows, cols })
    }

    /// Operator for an `N×N` image with the maximal layer count.
    pub fn for_image_side(image_side: usize, params: DoGParams) -> Result<Self> {
        Self::new(GridSpec::with_max_layers(image_side, &params)?, params)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn params(&self) -> &DoGParams {
        &self.params
    }

    pub fn options(&self) -> &OperatorOptions {
        &self.options
    }

    pub fn boundary(&self) -> Boundary {
        self.options.boundary
    }

    pub fn kernels(&self) -> &[FilterKernel] {
        &self.kernels
    }

    pub fn row_count(&self) -> usize {
        self.grid.total_cells
    }

    pub fn col_count(&self) -> usize {
        self.grid.image_pixels()
    }

    pub fn nnz(&self) -> usize {
        self.rows.values.len()
    }

    /// Column indices and values of row `p`.
    pub fn row(&self, p: usize) -> (&[u32], &[f64]) {
        self.rows.line(p)
    }

    /// Row indices and values of column `a`.
    pub fn column(&self, a: usize) -> (&[u32], &[f64]) {
        self.cols.line(a)
    }

    /// `c = Φ f`.
    pub fn forward(&self, f: &Image) -> Result<Vec<f64>> {
        if f.side() != self.grid.image_side {
            return Err(Error::invalid(format!(
                "image side {} does not match operator side {}",
                f.side(),
                self.grid.image_side
            )));
        }
        Ok(self.apply(f.as_slice()))
    }

    /// `Φ x` for a flattened image.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.col_count());
        (0..self.row_count())
            .into_par_iter()
            .map(|p| {
                let (cs, vs) = self.rows.line(p);
                cs.iter().zip(vs).map(|(&c, &v)| v * x[c as usize]).sum()
            })
            .collect()
    }

    /// `Φ* c`.
    pub fn adjoint(&self, c: &[f64]) -> Result<Image> {
        if c.len() != self.row_count() {
            return Err(Error::invalid(format!(
                "coefficient vector has length {}, operator has {} rows",
                c.len(),
                self.row_count()
            )));
        }
        let data = self.apply_adjoint(c);
        Ok(Image { side: self.grid.image_side, data })
    }

    pub fn apply_adjoint(&self, c: &[f64]) -> Vec<f64> {
        debug_assert_eq!(c.len(), self.row_count());
        (0..self.col_count())
            .into_par_iter()
            .map(|a| {
                let (rs, vs) = self.cols.line(a);
                rs.iter().zip(vs).map(|(&r, &v)| v * c[r as usize]).sum()
            })
            .collect()
    }

    /// `Φ*Φ x`.
    pub fn apply_frame_operator(&self, x: &[f64]) -> Vec<f64> {
        self.apply_adjoint(&self.apply(x))
    }

    /// Mean gain of the frame operator on a flat field, `‖Φ1‖² / N²`.
    ///
    /// The straightforward decoder divides by this so that flat regions come
    /// back near their original level.
    pub fn flat_field_gain(&self) -> f64 {
        let ones = vec![1.0; self.col_count()];
        let c = self.apply(&ones);
        c.iter().map(|v| v * v).sum::<f64>() / self.col_count() as f64
    }
}

fn estimated_bytes(grid: &GridSpec) -> u64 {
    let n = grid.image_side as u64;
    let nnz: u64 = (0..grid.layer_count)
        .map(|k| {
            let span = (2 * grid.half_widths[k] as u64 + 1).min(n);
            (grid.layer_sides[k] as u64).pow(2) * span * span
        })
        .sum();
    // Row and column copies of (u32 index, f64 value), plus offsets.
    nnz * 24 + (grid.total_cells as u64 + n * n + 2) * 8
}

fn clipped_row(kernel: &FilterKernel, gain: f64, n: usize, ux: usize, uy: usize) -> (Vec<u32>, Vec<f64>) {
    let m = kernel.half_width;
    let x0 = ux.saturating_sub(m);
    let x1 = (ux + m).min(n - 1);
    let y0 = uy.saturating_sub(m);
    let y1 = (uy + m).min(n - 1);
    let len = (x1 - x0 + 1) * (y1 - y0 + 1);
    let mut cols = Vec::with_capacity(len);
    let mut vals = Vec::with_capacity(len);
    for x in x0..=x1 {
        let a = ux as isize - x as isize;
        for y in y0..=y1 {
            let b = uy as isize - y as isize;
            cols.push((x * n + y) as u32);
            vals.push(gain * kernel.at(a, b));
        }
    }
    (cols, vals)
}

/// Kernel folded onto the `N×N` torus, as `(da, db, value)` with offsets in
/// `[0, N)`.
pub(crate) fn periodize(kernel: &FilterKernel, n: usize) -> Vec<(usize, usize, f64)> {
    let m = kernel.half_width as isize;
    let mut folded = vec![0.0; n * n];
    let mut touched = vec![false; n * n];
    let ni = n as isize;
    for a in -m..=m {
        for b in -m..=m {
            let slot = a.rem_euclid(ni) as usize * n + b.rem_euclid(ni) as usize;
            folded[slot] += kernel.at(a, b);
            touched[slot] = true;
        }
    }
    (0..n * n).filter(|&s| touched[s]).map(|s| (s / n, s % n, folded[s])).collect()
}

fn periodic_row(wrapped: &[(usize, usize, f64)], gain: f64, n: usize, ux: usize, uy: usize) -> (Vec<u32>, Vec<f64>) {
    let mut entries: Vec<(u32, f64)> = wrapped
        .iter()
        .map(|&(da, db, v)| {
            let x = (ux + n - da) % n;
            let y = (uy + n - db) % n;
            ((x * n + y) as u32, gain * v)
        })
        .collect();
    entries.sort_unstable_by_key(|e| e.0);
    entries.into_iter().unzip()
}
