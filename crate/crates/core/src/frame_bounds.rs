//! Analytic frame bounds and their empirical verification.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::analysis::{layer_gain, periodize, AnalysisOperator, Image};
use crate::error::{Error, Result};
use crate::pyramid::{dog_kernel, dog_kernel_with, CoarseLayer, DoGParams, GridSpec};

/// Krylov steps used for the extreme eigenvalues of `Φ*Φ`.
pub const DEFAULT_LANCZOS_STEPS: usize = 120;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub image_side: usize,
    pub layer_count: usize,
    pub trials: usize,
    pub alpha: f64,
    pub beta: f64,
    pub empirical_min: f64,
    pub empirical_max: f64,
    /// Extreme eigenvalue estimates of `Φ*Φ`.
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub condition_estimate: f64,
}

impl FrameReport {
    /// `key=value` lines, one per field.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let fields = self.fields();
        let width = fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in fields {
            let _ = writeln!(s, "{k:<width$}  {v}");
        }
        s
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_side", self.image_side.to_string()),
            ("layer_count", self.layer_count.to_string()),
            ("trials", self.trials.to_string()),
            ("alpha", format!("{:e}", self.alpha)),
            ("beta", format!("{:e}", self.beta)),
            ("empirical_min", format!("{:e}", self.empirical_min)),
            ("empirical_max", format!("{:e}", self.empirical_max)),
            ("lambda_min", format!("{:e}", self.lambda_min)),
            ("lambda_max", format!("{:e}", self.lambda_max)),
            ("condition_estimate", format!("{:.6}", self.condition_estimate)),
        ]
    }
}

/// `β = Σ_k (γ_k ‖DoG_k‖₁)²`, with `γ_k` the row gain of layer `k`.
pub fn beta_bound(params: &DoGParams, grid: &GridSpec) -> Result<f64> {
    let k_count = grid.layer_count;
    let mut beta = 0.0;
    for k in 0..k_count {
        let kernel = dog_kernel(k, params, k_count)?;
        let g = layer_gain(k, k_count) * kernel.l1_norm();
        beta += g * g;
    }
    Ok(beta)
}

/// `α = min(|ΣDoG_0|², min_{ω≠0} |F(DoG_{K−1})(ω)|²)`, where `F` is the
/// `N×N` DFT of the finest kernel wrapped onto the torus.
pub fn alpha_bound(params: &DoGParams, image_side: usize, layer_count: usize) -> Result<f64> {
    alpha_bound_with(params, image_side, layer_count, CoarseLayer::ScalingFunction)
}

pub fn alpha_bound_with(
    params: &DoGParams,
    image_side: usize,
    layer_count: usize,
    coarse: CoarseLayer,
) -> Result<f64> {
    let grid = GridSpec::new(image_side, layer_count, params)?;
    let n = grid.image_side;
    let coarsest = dog_kernel_with(0, params, layer_count, coarse)?;
    let dc = coarsest.sum();
    let finest = dog_kernel_with(layer_count - 1, params, layer_count, coarse)?;

    let mut spectrum = vec![Complex::new(0.0, 0.0); n * n];
    for (a, b, v) in periodize(&finest, n) {
        spectrum[a * n + b].re += v;
    }
    fft_2d(&mut spectrum, n);
    let powers: Vec<f64> = spectrum.iter().map(|z| z.norm_sqr()).collect();
    let off_dc = powers[1..].iter().copied().fold(f64::INFINITY, f64::min);
    let alpha = (dc * dc).min(off_dc);
    // Powers at rounding level count as zero.
    let floor = (64.0 * f64::EPSILON).powi(2) * powers.iter().copied().fold(dc * dc, f64::max);
    if !(alpha > floor) {
        return Err(Error::Consistency(format!("lower frame bound is not positive: {alpha:e}")));
    }
    Ok(alpha)
}

fn fft_2d(data: &mut [Complex<f64>], n: usize) {
    let fft = FftPlanner::new().plan_fft_forward(n);
    for row in data.chunks_mut(n) {
        fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            column[i] = data[i * n + j];
        }
        fft.process(&mut column);
        for i in 0..n {
            data[i * n + j] = column[i];
        }
    }
}

/// `‖Φf‖² / ‖f‖²`.
pub fn frame_ratio(op: &AnalysisOperator, f: &Image) -> Result<f64> {
    let energy: f64 = f.as_slice().iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::invalid("frame ratio of the zero image is undefined"));
    }
    let c = op.forward(f)?;
    Ok(c.iter().map(|v| v * v).sum::<f64>() / energy)
}

/// Random image with samples uniform in `[0, 1)`, drawn from a stream
/// seeded by `seed`.
pub fn random_image(side: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(side, |_, _| rng.random::<f64>())
}

/// Extreme Ritz values of `Φ*Φ` from a Lanczos run with full
/// reorthogonalization. Both lie inside the true spectrum.
pub fn extreme_eigenvalues(op: &AnalysisOperator, steps: usize, seed: u64) -> (f64, f64) {
    let n = op.col_count();
    let m = steps.clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    normalize(&mut q);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut diag = Vec::with_capacity(m);
    let mut off = Vec::with_capacity(m);
    for _ in 0..m {
        let mut w = op.apply_frame_operator(&q);
        diag.push(dot(&w, &q));
        basis.push(q);
        for _ in 0..2 {
            for v in &basis {
                let h = dot(&w, v);
                for (wi, vi) in w.iter_mut().zip(v) {
                    *wi -= h * vi;
                }
            }
        }
        let b = dot(&w, &w).sqrt();
        if b <= 1e-12 * diag.iter().fold(0.0f64, |a, d| a.max(d.abs())) || basis.len() == m {
            break;
        }
        off.push(b);
        for wi in &mut w {
            *wi /= b;
        }
        q = w;
    }

    let k = diag.len();
    let t = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            diag[i]
        } else if i + 1 == j {
            off[i]
        } else if j + 1 == i {
            off[j]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(t).eigenvalues;
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let s = dot(v, v).sqrt();
    for x in v {
        *x /= s;
    }
}

/// Draws `trials` random images, checks every ratio `‖Φf‖²/‖f‖²` against
/// `[α − ε, β + ε]` with `ε = 1e−9·β`, and estimates the condition number
/// of `Φ*Φ`. Trial `t` uses the stream seeded with `seed + t`.
pub fn verify_frame_condition(op: &AnalysisOperator, trials: usize, seed: u64) -> Result<FrameReport> {
    if trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    let grid = op.grid();
    let n = grid.image_side;
    let beta = beta_bound(op.params(), grid)?;
    let alpha = alpha_bound_with(op.params(), n, grid.layer_count, op.options().coarse)?;
    let eps = 1e-9 * beta;

    let ratios = (0..trials)
        .into_par_iter()
        .map(|t| frame_ratio(op, &random_image(n, seed.wrapping_add(t as u64))))
        .collect::<Result<Vec<f64>>>()?;
    let empirical_min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let empirical_max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for &ratio in &ratios {
        if ratio < alpha - eps || ratio > beta + eps {
            return Err(Error::FrameConditionViolated { ratio, lower: alpha, upper: beta });
        }
    }

    let (ritz_min, ritz_max) = extreme_eigenvalues(op, DEFAULT_LANCZOS_STEPS, seed);
    let lambda_min = ritz_min.min(empirical_min);
    let lambda_max = ritz_max.max(empirical_max);
    Ok(FrameReport {
        image_side: n,
        layer_count: grid.layer_count,
        trials,
        alpha,
        beta,
        empirical_min,
        empirical_max,
        lambda_min,
        lambda_max,
        condition_estimate: lambda_max / lambda_min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{Boundary, OperatorOptions};
    use crate::pyramid::gaussian_kernel;

    fn operator(n: usize, k: usize) -> AnalysisOperator {
        let params = DoGParams::default();
        AnalysisOperator::new(GridSpec::new(n, k, &params).unwrap(), params).unwrap()
    }

    #[test]
    fn single_scaling_layer_has_unit_beta() {
        let params = DoGParams::default();
        let grid = GridSpec::new(9, 1, &params).unwrap();
        assert!((beta_bound(&params, &grid).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beta_does_not_depend_on_image_side() {
        let params = DoGParams::default();
        let a = beta_bound(&params, &GridSpec::new(17, 4, &params).unwrap()).unwrap();
        let b = beta_bound(&params, &GridSpec::new(64, 4, &params).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_gaussian_alpha_is_minimum_spectral_power() {
        let params = DoGParams { w_s: 0.0, ..Default::default() };
        let n = 12;
        let alpha = alpha_bound(&params, n, 1).unwrap();
        // Direct DFT of the wrapped Gaussian.
        let g = gaussian_kernel(0.5, 5).unwrap();
        let mut best = f64::INFINITY;
        for u in 0..n {
            for v in 0..n {
                let mut z = Complex::new(0.0, 0.0);
                for a in -5isize..=5 {
                    for b in -5isize..=5 {
                        let phase = -2.0 * std::f64::consts::PI * (u as f64 * a as f64 + v as f64 * b as f64) / n as f64;
                        z += Complex::from_polar(g.at(a, b), phase);
                    }
                }
                best = best.min(z.norm_sqr());
            }
        }
        assert!((alpha - best).abs() <= 1e-12 * best.max(1e-300), "{alpha} vs {best}");
    }

    #[test]
    fn alpha_is_positive_for_defaults() {
        for n in [9, 17, 33, 64] {
            let k = crate::pyramid::max_layers(n);
            assert!(alpha_bound(&DoGParams::default(), n, k).unwrap() > 0.0);
        }
    }

    #[test]
    fn zero_dc_coarse_layer_has_no_lower_bound() {
        let params = DoGParams::default();
        assert!(matches!(alpha_bound_with(&params, 17, 5, CoarseLayer::DoG), Err(Error::Consistency(_))));
    }

    #[test]
    fn constant_image_ratio() {
        let flat = Image::from_fn(17, |_, _| 1.0);
        assert!(frame_ratio(&operator(17, 5), &flat).unwrap() > 0.0);

        let params = DoGParams::default();
        let grid = GridSpec::new(17, 5, &params).unwrap();
        let opts = OperatorOptions { boundary: Boundary::Periodic, coarse: CoarseLayer::DoG, ..Default::default() };
        let op = AnalysisOperator::with_options(grid, params, opts).unwrap();
        let alpha = alpha_bound(&params, 17, 5).unwrap();
        assert!(frame_ratio(&op, &flat).unwrap() < 1e-20 * alpha.max(1.0));
    }

    #[test]
    fn report_lies_within_bounds() {
        let op = operator(17, 5);
        let r = verify_frame_condition(&op, 50, 3).unwrap();
        assert!(r.alpha > 0.0);
        assert!(r.alpha <= r.empirical_min && r.empirical_min <= r.empirical_max && r.empirical_max <= r.beta);
        assert!(r.condition_estimate.is_finite() && r.condition_estimate >= 1.0);
        let kv = r.to_key_value();
        assert!(kv.contains("condition_estimate=") && kv.lines().count() == 10);
    }

    #[test]
    fn lanczos_matches_dense_spectrum() {
        let op = operator(13, 4);
        let n = op.col_count();
        let mut dense = DMatrix::zeros(n, n);
        for a in 0..n {
            let mut e = vec![0.0; n];
            e[a] = 1.0;
            for (b, v) in op.apply_frame_operator(&e).into_iter().enumerate() {
                dense[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(dense).eigenvalues;
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (rlo, rhi) = extreme_eigenvalues(&op, n, 1);
        assert!((rlo - lo).abs() < 1e-8 * hi, "{rlo} vs {lo}");
        assert!((rhi - hi).abs() < 1e-8 * hi, "{rhi} vs {hi}");
        let (plo, phi) = extreme_eigenvalues(&op, 60, 1);
        assert!(plo >= lo - 1e-9 * hi && phi <= hi + 1e-9 * hi);
        assert!((phi - hi) / hi < 1e-6 && (plo - lo) / lo < 1e-3);
    }

    #[test]
    fn trials_are_reproducible() {
        let op = operator(9, 4);
        let a = verify_frame_condition(&op, 20, 42).unwrap();
        let b = verify_frame_condition(&op, 20, 42).unwrap();
        assert_eq!(a, b);
    }
}
