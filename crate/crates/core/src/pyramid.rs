//! Difference-of-Gaussians kernels and the geometry of the dyadic grid.
//!
//! Layer `k` of a `K`-layer grid holds cells of scale `k`: the centre
//! standard deviation is `sigma_c_finest · 2^(K-1-k)`, so layer `K-1` is the
//! finest and layer 0 the coarsest. Layer 0 carries the low-pass scaling
//! function (a single Gaussian) instead of a band-pass DoG, which is what
//! makes constant images visible to the transform.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Receptive-field parameters shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoGParams {
    /// Centre weight `w_c`.
    pub w_c: f64,
    /// Surround weight `w_s`.
    pub w_s: f64,
    /// `sigma_c / sigma_s`, identical on every layer.
    pub sigma_ratio: f64,
    /// Centre standard deviation of the finest layer, in pixels.
    pub sigma_c_finest: f64,
}

impl Default for DoGParams {
    fn default() -> Self {
        Self { w_c: 1.0, w_s: 1.0, sigma_ratio: 1.0 / 3.0, sigma_c_finest: 0.5 }
    }
}

impl DoGParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_c.is_finite() && self.w_c > 0.0) {
            return Err(Error::invalid(format!("w_c must be positive and finite, got {}", self.w_c)));
        }
        if !(self.w_s.is_finite() && self.w_s >= 0.0) {
            return Err(Error::invalid(format!("w_s must be non-negative and finite, got {}", self.w_s)));
        }
        if !(self.sigma_ratio > 0.0 && self.sigma_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "sigma_ratio must lie in (0, 1), got {}",
                self.sigma_ratio
            )));
        }
        if !(self.sigma_c_finest.is_finite() && self.sigma_c_finest > 0.0) {
            return Err(Error::invalid(format!(
                "sigma_c_finest must be positive and finite, got {}",
                self.sigma_c_finest
            )));
        }
        Ok(())
    }
}

/// What the coarsest layer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoarseLayer {
    /// Low-pass Gaussian `w_c · G_{sigma_c_0}`.
    #[default]
    ScalingFunction,
    /// A regular zero-DC DoG like every other layer. The resulting filter
    /// bank maps constant images to zero away from the image border.
    DoG,
}

/// Per-layer scale quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerScale {
    pub sigma_center: f64,
    pub sigma_surround: f64,
    pub half_width: usize,
}

/// Scale recursion: sigmas double from layer `k+1` to layer `k`.
pub fn layer_scale(k: usize, params: &DoGParams, layer_count: usize) -> Result<LayerScale> {
    if k >= layer_count {
        return Err(Error::invalid(format!("layer {k} out of range for K = {layer_count}")));
    }
    let exponent = i32::try_from(layer_count - 1 - k)
        .map_err(|_| Error::invalid(format!("layer count {layer_count} too large")))?;
    let sigma_center = params.sigma_c_finest * 2f64.powi(exponent);
    let sigma_surround = sigma_center / params.sigma_ratio;
    // Round half up so the support never drops below 3 sigma.
    let half_width = (3.0 * sigma_surround + 0.5).floor();
    if !half_width.is_finite() || half_width > (u32::MAX as f64) {
        return Err(Error::invalid(format!("kernel half-width {half_width} for layer {k} is too large")));
    }
    Ok(LayerScale { sigma_center, sigma_surround, half_width: (half_width as usize).max(1) })
}

/// Square tap array of side `2M+1`, row-major, centre at `(M, M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    pub scale: usize,
    pub half_width: usize,
    pub taps: Vec<f64>,
}

impl FilterKernel {
    pub fn side(&self) -> usize {
        2 * self.half_width + 1
    }

    /// Tap at offset `(a, b)` from the centre, `|a|, |b| <= M`.
    #[inline]
    pub fn at(&self, a: isize, b: isize) -> f64 {
        let m = self.half_width as isize;
        let side = self.side();
        self.taps[(a + m) as usize * side + (b + m) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.taps.iter().map(|t| t.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum::<f64>().sqrt()
    }
}

/// Samples the unit-integral Gaussian on the `(2M+1)²` support and
/// renormalizes the taps to unit sum.
pub fn gaussian_kernel(sigma: f64, half_width: usize) -> Result<FilterKernel> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if half_width == 0 {
        return Err(Error::invalid("gaussian half_width must be at least 1"));
    }
    let m = half_width as isize;
    let side = 2 * half_width + 1;
    let two_var = 2.0 * sigma * sigma;
    let norm = 1.0 / (PI * two_var);
    let mut taps = Vec::with_capacity(side * side);
    for a in -m..=m {
        for b in -m..=m {
            let r2 = (a * a + b * b) as f64;
            taps.push(norm * (-r2 / two_var).exp());
        }
    }
    let total: f64 = taps.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid(format!("gaussian with sigma {sigma} has no mass on its support")));
    }
    for t in &mut taps {
        *t /= total;
    }
    Ok(FilterKernel { scale: 0, half_width, taps })
}

/// `DoG_k`, with the scaling function on layer 0.
pub fn dog_kernel(k: usize, params: &DoGParams, layer_count: usize) -> Result<FilterKernel> {
    dog_kernel_with(k, params, layer_count, CoarseLayer::ScalingFunction)
}

pub fn dog_kernel_with(
    k: usize,
    params: &DoGParams,
    layer_count: usize,
    coarse: CoarseLayer,
) -> Result<FilterKernel> {
    params.validate()?;
    let scale = layer_scale(k, params, layer_count)?;
    let center = gaussian_kernel(scale.sigma_center, scale.half_width)?;
    let mut taps: Vec<f64> = center.taps.iter().map(|t| params.w_c * t).collect();
    if k > 0 || coarse == CoarseLayer::DoG {
        let surround = gaussian_kernel(scale.sigma_surround, scale.half_width)?;
        for (t, s) in taps.iter_mut().zip(&surround.taps) {
            *t -= params.w_s * s;
        }
    }
    Ok(FilterKernel { scale: k, half_width: scale.half_width, taps })
}

/// `u_k(i) = floor(2^(K-k-2)) + 2^(K-k-1) · i`.
pub fn sample_position(k: usize, i: usize, layer_count: usize) -> usize {
    layer_offset(k, layer_count) + layer_stride(k, layer_count) * i
}

/// Sampling step of layer `k`.
pub fn layer_stride(k: usize, layer_count: usize) -> usize {
    1usize << (layer_count - k - 1)
}

fn layer_offset(k: usize, layer_count: usize) -> usize {
    if layer_count - k >= 2 {
        1usize << (layer_count - k - 2)
    } else {
        0
    }
}

/// Largest `K` with `2^(K-1) <= N`.
pub fn max_layers(image_side: usize) -> usize {
    assert!(image_side >= 1);
    (usize::BITS - image_side.leading_zeros()) as usize
}

/// Sampling geometry of the dyadic grid for one image size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub image_side: usize,
    pub layer_count: usize,
    /// `N_k`: cells per side on layer `k`.
    pub layer_sides: Vec<usize>,
    /// `M_k`: kernel half-width on layer `k`.
    pub half_widths: Vec<usize>,
    /// Index of the first cell of layer `k` in the flattened code vector.
    pub layer_starts: Vec<usize>,
    pub total_cells: usize,
}

impl GridSpec {
    /// Builds the grid for an `N×N` image with `K` layers.
    pub fn new(image_side: usize, layer_count: usize, params: &DoGParams) -> Result<Self> {
        params.validate()?;
        if image_side == 0 {
            return Err(Error::invalid("image side must be at least 1"));
        }
        if layer_count == 0 {
            return Err(Error::invalid("layer count must be at least 1"));
        }
        let max_k = max_layers(image_side);
        if layer_count > max_k {
            return Err(Error::invalid(format!(
                "K = {layer_count} is too large for N = {image_side}; the maximal admissible K is {max_k}"
            )));
        }
        let mut layer_sides = Vec::with_capacity(layer_count);
        let mut half_widths = Vec::with_capacity(layer_count);
        let mut layer_starts = Vec::with_capacity(layer_count);
        let mut total = 0usize;
        for k in 0..layer_count {
            let offset = layer_offset(k, layer_count);
            let stride = layer_stride(k, layer_count);
            let side = if offset < image_side { (image_side - offset).div_ceil(stride) } else { 0 };
            debug_assert!(side >= 1);
            layer_starts.push(total);
            total = side
                .checked_mul(side)
                .and_then(|cells| total.checked_add(cells))
                .ok_or_else(|| Error::Resource(format!("grid for N = {image_side} overflows the index space")))?;
            layer_sides.push(side);
            half_widths.push(layer_scale(k, params, layer_count)?.half_width);
        }
        Ok(Self { image_side, layer_count, layer_sides, half_widths, layer_starts, total_cells: total })
    }

    /// Grid with the maximal admissible layer count.
    pub fn with_max_layers(image_side: usize, params: &DoGParams) -> Result<Self> {
        if image_side == 0 {
            return Err(Error::invalid("image side must be at least 1"));
        }
        Self::new(image_side, max_layers(image_side), params)
    }

    pub fn image_pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    /// Flattened index of cell `(k, i, j)`: cumulative layer offset plus
    /// row-major position inside the layer.
    pub fn cell_index(&self, k: usize, i: usize, j: usize) -> Result<usize> {
        if k >= self.layer_count {
            return Err(Error::invalid(format!("layer {k} out of range for K = {}", self.layer_count)));
        }
        let side = self.layer_sides[k];
        if i >= side || j >= side {
            return Err(Error::invalid(format!("cell ({k}, {i}, {j}) outside layer of side {side}")));
        }
        Ok(self.layer_starts[k] + i * side + j)
    }

    /// Inverse of [`cell_index`](Self::cell_index).
    pub fn cell_of(&self, p: usize) -> Result<(usize, usize, usize)> {
        if p >= self.total_cells {
            return Err(Error::invalid(format!("cell index {p} >= total cells {}", self.total_cells)));
        }
        let k = self.layer_starts.partition_point(|&s| s <= p) - 1;
        let local = p - self.layer_starts[k];
        let side = self.layer_sides[k];
        Ok((k, local / side, local % side))
    }

    pub fn sample_position(&self, k: usize, i: usize) -> usize {
        sample_position(k, i, self.layer_count)
    }
}
