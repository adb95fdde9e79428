use std::path::Path;

use super::block::spd_inverse;
use super::ops::{combine_into, gemm_into, Region, View};
use super::store::{BlockMatrixStore, Layout};
use crate::error::{Error, Result};

/// Inverts a symmetric positive definite block matrix into a new symmetric
/// store at `dest`, by recursive 2×2 block elimination on the Schur
/// complement. Only the lower triangle of `m` is read. Intermediate
/// matrices go to a scratch directory next to `dest` that is removed
/// afterwards.
pub fn invert_recursive(m: &BlockMatrixStore, dest: impl AsRef<Path>) -> Result<BlockMatrixStore> {
    let dest = dest.as_ref();
    if m.rows() != m.cols() {
        return Err(Error::invalid(format!("cannot invert a {}x{} matrix", m.rows(), m.cols())));
    }
    let out = BlockMatrixStore::create_with(dest, m.rows(), m.cols(), m.block_size(), true, m.layout())?;
    let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let scratch = tempfile::Builder::new()
        .prefix(".invert-scratch-")
        .tempdir_in(parent)
        .map_err(|e| Error::storage(parent, e.to_string()))?;
    let mut ctx = Scratch { dir: scratch.path(), next: 0, block_size: m.block_size() };
    match invert_into(View::whole(m), Region::whole(&out), &mut ctx) {
        Ok(()) => Ok(out),
        Err(e) => {
            let _ = out.remove();
            Err(e)
        }
    }
}

struct Scratch<'a> {
    dir: &'a Path,
    next: usize,
    block_size: usize,
}

impl Scratch<'_> {
    fn store(&mut self, tag: &str, rows: usize, cols: usize, symmetric: bool) -> Result<BlockMatrixStore> {
        self.next += 1;
        let path = self.dir.join(format!("{tag}{}", self.next));
        BlockMatrixStore::create_with(path, rows, cols, self.block_size, symmetric, Layout::BlockFiles)
    }
}

fn extent(v: &View, horizontal: bool) -> usize {
    if horizontal {
        (0..v.block_cols()).map(|j| v.block_dims(0, j).1).sum()
    } else {
        (0..v.block_rows()).map(|i| v.block_dims(i, 0).0).sum()
    }
}

/// Writes the inverse of the square view `m` into `out`, a diagonal-aligned
/// region of the final inverse whose first row also locates pivots.
fn invert_into(m: View, out: Region, ctx: &mut Scratch) -> Result<()> {
    let nb = m.block_rows();
    if nb == 1 {
        let inv = spd_inverse(m.read(0, 0)?, out.first_row())?;
        return out.write(0, 0, &inv);
    }
    let h = nb.div_ceil(2);
    let a = m.sub(0, 0, h, h);
    let c = m.sub(h, 0, nb - h, h);
    let d = m.sub(h, h, nb - h, nb - h);

    let tl = out.sub(0, 0, h, h);
    invert_into(a, tl, ctx)?;
    let ainv = tl.view();

    let (n1, n2) = (extent(&a, false), extent(&d, false));
    // X = A⁻¹ Cᵀ
    let x = ctx.store("x", n1, n2, false)?;
    gemm_into(Region::whole(&x), 1.0, ainv, c.t(), 0.0, None)?;
    // Q = D − C X
    let q = ctx.store("q", n2, n2, true)?;
    gemm_into(Region::whole(&q), -1.0, c, View::whole(&x), 1.0, Some(d))?;

    let br = out.sub(h, h, nb - h, nb - h);
    invert_into(View::whole(&q), br, ctx)?;
    q.remove()?;

    // Y = X Q⁻¹
    let y = ctx.store("y", n1, n2, false)?;
    gemm_into(Region::whole(&y), 1.0, View::whole(&x), br.view(), 0.0, None)?;
    combine_into(out.sub(h, 0, nb - h, h), -1.0, View::whole(&y).t(), 0.0, None)?;
    gemm_into(tl, 1.0, View::whole(&y), View::whole(&x).t(), 1.0, Some(ainv))?;
    x.remove()?;
    y.remove()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ooc::{identity_residual, peak_block_elements, reset_peak_block_elements};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let m = g.transpose() * &g + DMatrix::identity(n, n) * n as f64 * 0.1;
        (0..n * n).map(|p| m[(p / n, p % n)]).collect()
    }

    #[test]
    fn inverse_of_identity_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let n = 10;
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let m = BlockMatrixStore::from_dense(dir.path().join("m"), n, n, 4, &eye, true).unwrap();
        let inv = invert_recursive(&m, dir.path().join("inv")).unwrap();
        assert_eq!(inv.to_dense().unwrap(), eye);
    }

    #[test]
    fn inverse_of_diagonal() {
        let dir = tempfile::tempdir().unwrap();
        let n = 9;
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = (i + 1) as f64;
        }
        let m = BlockMatrixStore::from_dense(dir.path().join("m"), n, n, 2, &d, false).unwrap();
        let inv = invert_recursive(&m, dir.path().join("inv")).unwrap().to_dense().unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert!((inv[i * n + j] - want).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn matches_dense_inverse() {
        let dir = tempfile::tempdir().unwrap();
        for (n, b, seed) in [(300, 64, 1), (50, 7, 2), (64, 64, 3), (65, 16, 4)] {
            let data = random_spd(n, seed);
            let m = BlockMatrixStore::from_dense(dir.path().join(format!("m{n}_{b}")), n, n, b, &data, true).unwrap();
            let inv = invert_recursive(&m, dir.path().join(format!("i{n}_{b}"))).unwrap();
            let got = DMatrix::from_row_slice(n, n, &inv.to_dense().unwrap());
            let want = DMatrix::from_row_slice(n, n, &data).cholesky().unwrap().inverse();
            let rel = (&got - &want).norm() / want.norm();
            assert!(rel < 1e-10, "n={n} b={b}: relative error {rel}");
            let res = identity_residual(&m, &inv).unwrap() / (n as f64).sqrt();
            assert!(res < 1e-10, "n={n} b={b}: residual {res}");
            let asym = (&got - got.transpose()).norm() / got.norm();
            assert!(asym <= 1e-8);
        }
    }

    #[test]
    fn upper_triangle_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let n = 12;
        let lower = random_spd(n, 7);
        let mut garbage = lower.clone();
        for i in 0..n {
            for j in i + 1..n {
                garbage[i * n + j] = 1e6;
            }
        }
        let a = BlockMatrixStore::from_dense(dir.path().join("a"), n, n, 5, &lower, false).unwrap();
        let b = BlockMatrixStore::from_dense(dir.path().join("b"), n, n, 5, &garbage, false).unwrap();
        let ia = invert_recursive(&a, dir.path().join("ia")).unwrap().to_dense().unwrap();
        let ib = invert_recursive(&b, dir.path().join("ib")).unwrap().to_dense().unwrap();
        assert_eq!(ia, ib);
    }

    #[test]
    fn indefinite_input_names_the_pivot() {
        let dir = tempfile::tempdir().unwrap();
        let n = 10;
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = if i == 7 { -2.0 } else { 1.0 };
        }
        let m = BlockMatrixStore::from_dense(dir.path().join("m"), n, n, 3, &d, true).unwrap();
        match invert_recursive(&m, dir.path().join("inv")) {
            Err(Error::NotPositiveDefinite { pivot, value }) => {
                assert_eq!(pivot, 7);
                assert_eq!(value, -2.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(!dir.path().join("inv").exists());
        let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn resident_blocks_stay_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let (n, b) = (120, 16);
        let data = random_spd(n, 11);
        let m = BlockMatrixStore::from_dense(dir.path().join("m"), n, n, b, &data, true).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let peak = pool.install(|| {
            reset_peak_block_elements();
            invert_recursive(&m, dir.path().join("inv")).unwrap();
            peak_block_elements()
        });
        assert!(peak <= 3 * b * b, "peak {peak} elements");
    }
}
