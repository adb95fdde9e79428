use std::path::Path;

use rayon::prelude::*;

use super::block::{gemm_acc, Block};
use super::store::{BlockMatrixStore, Layout};
use crate::error::{Error, Result};

/// Read-only window onto a rectangle of blocks, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    store: &'a BlockMatrixStore,
    r0: usize,
    c0: usize,
    nbr: usize,
    nbc: usize,
    trans: bool,
}

impl<'a> View<'a> {
    pub(crate) fn whole(store: &'a BlockMatrixStore) -> Self {
        Self { store, r0: 0, c0: 0, nbr: store.block_rows(), nbc: store.block_cols(), trans: false }
    }

    /// Sub-window in block coordinates relative to this view.
    pub(crate) fn sub(self, r: usize, c: usize, nbr: usize, nbc: usize) -> Self {
        assert!(r + nbr <= self.block_rows() && c + nbc <= self.block_cols(), "sub-view out of range");
        if self.trans {
            Self { r0: self.r0 + c, c0: self.c0 + r, nbr: nbc, nbc: nbr, ..self }
        } else {
            Self { r0: self.r0 + r, c0: self.c0 + c, nbr, nbc, ..self }
        }
    }

    pub(crate) fn t(self) -> Self {
        Self { trans: !self.trans, ..self }
    }

    pub(crate) fn block_rows(&self) -> usize {
        if self.trans { self.nbc } else { self.nbr }
    }

    pub(crate) fn block_cols(&self) -> usize {
        if self.trans { self.nbr } else { self.nbc }
    }

    pub(crate) fn block_dims(&self, i: usize, j: usize) -> (usize, usize) {
        if self.trans {
            let (h, w) = self.store.block_dims(self.r0 + j, self.c0 + i);
            (w, h)
        } else {
            self.store.block_dims(self.r0 + i, self.c0 + j)
        }
    }

    pub(crate) fn read(&self, i: usize, j: usize) -> Result<Block> {
        if self.trans {
            self.store.read_block_oriented(self.r0 + j, self.c0 + i, true)
        } else {
            self.store.read_block_oriented(self.r0 + i, self.c0 + j, false)
        }
    }

    fn block_size(&self) -> usize {
        self.store.block_size()
    }
}

/// Writable rectangle of blocks. On a symmetric store only blocks on or
/// below the global diagonal are produced.
#[derive(Clone, Copy)]
pub(crate) struct Region<'a> {
    store: &'a BlockMatrixStore,
    r0: usize,
    c0: usize,
    nbr: usize,
    nbc: usize,
}

impl<'a> Region<'a> {
    pub(crate) fn whole(store: &'a BlockMatrixStore) -> Self {
        Self { store, r0: 0, c0: 0, nbr: store.block_rows(), nbc: store.block_cols() }
    }

    pub(crate) fn sub(self, r: usize, c: usize, nbr: usize, nbc: usize) -> Self {
        assert!(r + nbr <= self.nbr && c + nbc <= self.nbc, "sub-region out of range");
        Self { r0: self.r0 + r, c0: self.c0 + c, nbr, nbc, ..self }
    }

    pub(crate) fn view(self) -> View<'a> {
        View { store: self.store, r0: self.r0, c0: self.c0, nbr: self.nbr, nbc: self.nbc, trans: false }
    }

    fn wanted(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.nbr {
            for j in 0..self.nbc {
                if self.store.stores_block(self.r0 + i, self.c0 + j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn block_dims(&self, i: usize, j: usize) -> (usize, usize) {
        self.store.block_dims(self.r0 + i, self.c0 + j)
    }

    /// Global index of the first matrix row covered by the region.
    pub(crate) fn first_row(&self) -> usize {
        self.r0 * self.store.block_size()
    }

    pub(crate) fn write(&self, i: usize, j: usize, b: &Block) -> Result<()> {
        self.store.write_block(self.r0 + i, self.c0 + j, b)
    }
}

fn check_tiling(out: &Region, views: &[View]) -> Result<()> {
    let b = out.store.block_size();
    if views.iter().any(|v| v.block_size() != b) {
        return Err(Error::invalid("operands use different block sizes"));
    }
    Ok(())
}

fn check_shape(out: &Region, v: &View) -> Result<()> {
    if (v.block_rows(), v.block_cols()) != (out.nbr, out.nbc) {
        return Err(Error::invalid("operand shape does not match the output"));
    }
    for i in 0..out.nbr {
        for j in 0..out.nbc {
            if v.block_dims(i, j) != out.block_dims(i, j) {
                return Err(Error::invalid("operand tiling does not match the output"));
            }
        }
    }
    Ok(())
}

/// `out = alpha · a · b + beta · cin`. Output blocks are computed in
/// parallel, each summing over the inner index in a fixed order.
pub(crate) fn gemm_into(out: Region, alpha: f64, a: View, b: View, beta: f64, cin: Option<View>) -> Result<()> {
    check_tiling(&out, &[a, b])?;
    if a.block_cols() != b.block_rows() || a.block_rows() != out.nbr || b.block_cols() != out.nbc {
        return Err(Error::invalid("operand shapes are incompatible"));
    }
    for l in 0..a.block_cols() {
        if a.block_dims(0, l).1 != b.block_dims(l, 0).0 {
            return Err(Error::invalid("inner tiling differs"));
        }
    }
    for i in 0..out.nbr {
        if a.block_dims(i, 0).0 != out.block_dims(i, 0).0 {
            return Err(Error::invalid("operand tiling does not match the output"));
        }
    }
    for j in 0..out.nbc {
        if b.block_dims(0, j).1 != out.block_dims(0, j).1 {
            return Err(Error::invalid("operand tiling does not match the output"));
        }
    }
    if let Some(c) = &cin {
        check_tiling(&out, &[*c])?;
        check_shape(&out, c)?;
    }
    out.wanted().into_par_iter().try_for_each(|(i, j)| {
        let (h, w) = out.block_dims(i, j);
        let mut acc = match &cin {
            Some(c) if beta != 0.0 => {
                let mut blk = c.read(i, j)?;
                blk.scale(beta);
                blk
            }
            _ => Block::zeros(h, w),
        };
        if alpha != 0.0 {
            for l in 0..a.block_cols() {
                let ab = a.read(i, l)?;
                let bb = b.read(l, j)?;
                gemm_acc(&mut acc, alpha, &ab, &bb);
            }
        }
        out.write(i, j, &acc)
    })
}

/// `out = alpha · a + beta · b`.
pub(crate) fn combine_into(out: Region, alpha: f64, a: View, beta: f64, b: Option<View>) -> Result<()> {
    check_tiling(&out, &[a])?;
    check_shape(&out, &a)?;
    if let Some(b) = &b {
        check_tiling(&out, &[*b])?;
        check_shape(&out, b)?;
    }
    out.wanted().into_par_iter().try_for_each(|(i, j)| {
        let mut acc = a.read(i, j)?;
        acc.scale(alpha);
        if let Some(b) = &b {
            if beta != 0.0 {
                let bb = b.read(i, j)?;
                acc.axpy(beta, &bb);
            }
        }
        out.write(i, j, &acc)
    })
}

/// `C ← alpha · A · B + beta · C`, in place. When `C` is symmetric only its
/// stored lower blocks are updated, which is exact whenever the result is
/// itself symmetric.
pub fn block_gemm(
    a: &BlockMatrixStore,
    b: &BlockMatrixStore,
    c: &BlockMatrixStore,
    alpha: f64,
    beta: f64,
) -> Result<()> {
    if alpha == 0.0 && beta == 1.0 {
        return Ok(());
    }
    if a.cols() != b.rows() || a.rows() != c.rows() || b.cols() != c.cols() {
        return Err(Error::invalid(format!(
            "cannot multiply {}x{} by {}x{} into {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            c.rows(),
            c.cols()
        )));
    }
    let cin = View::whole(c);
    gemm_into(Region::whole(c), alpha, View::whole(a), View::whole(b), beta, Some(cin))
}

fn elementwise(
    a: &BlockMatrixStore,
    b: &BlockMatrixStore,
    dest: &Path,
    beta: f64,
) -> Result<BlockMatrixStore> {
    if (a.rows(), a.cols()) != (b.rows(), b.cols()) {
        return Err(Error::invalid(format!(
            "shapes differ: {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let symmetric = a.is_symmetric() && b.is_symmetric();
    let out = BlockMatrixStore::create_with(dest, a.rows(), a.cols(), a.block_size(), symmetric, Layout::default())?;
    combine_into(Region::whole(&out), 1.0, View::whole(a), beta, Some(View::whole(b)))?;
    Ok(out)
}

/// `A + B` into a new store at `dest`.
pub fn block_add(a: &BlockMatrixStore, b: &BlockMatrixStore, dest: impl AsRef<Path>) -> Result<BlockMatrixStore> {
    elementwise(a, b, dest.as_ref(), 1.0)
}

/// `A − B` into a new store at `dest`.
pub fn block_sub(a: &BlockMatrixStore, b: &BlockMatrixStore, dest: impl AsRef<Path>) -> Result<BlockMatrixStore> {
    elementwise(a, b, dest.as_ref(), -1.0)
}

/// `‖A·B − I‖_F`, accumulated block by block without storing the product.
pub fn identity_residual(a: &BlockMatrixStore, b: &BlockMatrixStore) -> Result<f64> {
    if a.rows() != b.cols() || a.cols() != b.rows() || a.block_size() != b.block_size() {
        return Err(Error::invalid("residual needs a square product with a shared tiling"));
    }
    let (va, vb) = (View::whole(a), View::whole(b));
    let cells: Vec<(usize, usize)> =
        (0..va.block_rows()).flat_map(|i| (0..vb.block_cols()).map(move |j| (i, j))).collect();
    let partial = cells
        .into_par_iter()
        .map(|(i, j)| -> Result<f64> {
            let (h, w) = (va.block_dims(i, 0).0, vb.block_dims(0, j).1);
            let mut acc = if i == j { Block::identity(h) } else { Block::zeros(h, w) };
            for l in 0..va.block_cols() {
                let ab = va.read(i, l)?;
                let bb = vb.read(l, j)?;
                gemm_acc(&mut acc, 1.0, &ab, &bb);
            }
            if i == j {
                // acc holds I + AB; remove the identity twice to get AB - I.
                for d in 0..h {
                    acc.data_mut()[d * h + d] -= 2.0;
                }
            }
            Ok(acc.frobenius_sq())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(partial.iter().sum::<f64>().sqrt())
}

/// `A · x`, one block row per task.
pub fn block_matvec(a: &BlockMatrixStore, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.cols() {
        return Err(Error::invalid(format!("vector has {} entries, matrix has {} columns", x.len(), a.cols())));
    }
    let bs = a.block_size();
    let rows: Vec<Vec<f64>> = (0..a.block_rows())
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let h = a.block_dims(r, 0).0;
            let mut y = vec![0.0; h];
            for c in 0..a.block_cols() {
                let blk = a.read_block(r, c)?;
                let xs = &x[c * bs..c * bs + blk.cols()];
                for (i, yi) in y.iter_mut().enumerate() {
                    let row = &blk.data()[i * blk.cols()..(i + 1) * blk.cols()];
                    *yi += row.iter().zip(xs).map(|(m, v)| m * v).sum::<f64>();
                }
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    Ok(rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: usize, cols: usize, seed: f64) -> Vec<f64> {
        (0..rows * cols).map(|p| ((p as f64 + seed) * 0.7).sin()).collect()
    }

    fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                c[i * m + j] = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_dense_product() {
        let dir = tempfile::tempdir().unwrap();
        let (n, k, m) = (23, 17, 9);
        let (da, db, dc) = (dense(n, k, 0.0), dense(k, m, 3.0), dense(n, m, 7.0));
        let a = BlockMatrixStore::from_dense(dir.path().join("a"), n, k, 5, &da, false).unwrap();
        let b = BlockMatrixStore::from_dense(dir.path().join("b"), k, m, 5, &db, false).unwrap();
        let c = BlockMatrixStore::from_dense(dir.path().join("c"), n, m, 5, &dc, false).unwrap();
        block_gemm(&a, &b, &c, 2.0, -0.5).unwrap();
        let got = c.to_dense().unwrap();
        let ab = matmul(&da, &db, n, k, m);
        for p in 0..n * m {
            assert!((got[p] - (2.0 * ab[p] - 0.5 * dc[p])).abs() < 1e-12);
        }
    }

    fn rel_frobenius(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn square_product_matches_dense_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let n = 96;
        let (da, db) = (dense(n, n, 11.0), dense(n, n, 13.0));
        let a = BlockMatrixStore::from_dense(dir.path().join("a"), n, n, 40, &da, false).unwrap();
        let b = BlockMatrixStore::from_dense(dir.path().join("b"), n, n, 40, &db, false).unwrap();
        let c = BlockMatrixStore::create(dir.path().join("c"), n, n, 40).unwrap();
        block_gemm(&a, &b, &c, 1.0, 0.0).unwrap();
        assert!(rel_frobenius(&c.to_dense().unwrap(), &matmul(&da, &db, n, n, n)) < 1e-12);
    }

    #[test]
    fn add_and_sub_match_dense_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let n = 200;
        let (da, db) = (dense(n, n, 1.0), dense(n, n, 2.0));
        let a = BlockMatrixStore::from_dense(dir.path().join("a"), n, n, 64, &da, false).unwrap();
        let b = BlockMatrixStore::from_dense(dir.path().join("b"), n, n, 64, &db, false).unwrap();
        let sum = block_add(&a, &b, dir.path().join("s")).unwrap();
        let want: Vec<f64> = da.iter().zip(&db).map(|(x, y)| x + y).collect();
        assert_eq!(sum.to_dense().unwrap(), want);
        let back = block_sub(&sum, &b, dir.path().join("d")).unwrap().to_dense().unwrap();
        assert!(back.iter().zip(&da).all(|(x, y)| (x - y).abs() <= 1e-15));
    }

    #[test]
    fn multiply_by_identity() {
        let dir = tempfile::tempdir().unwrap();
        let n = 128;
        let da = dense(n, n, 1.0);
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let a = BlockMatrixStore::from_dense(dir.path().join("a"), n, n, 48, &da, false).unwrap();
        let i = BlockMatrixStore::from_dense(dir.path().join("i"), n, n, 48, &eye, true).unwrap();
        let c = BlockMatrixStore::create(dir.path().join("c"), n, n, 48).unwrap();
        block_gemm(&a, &i, &c, 1.0, 0.0).unwrap();
        assert_eq!(c.to_dense().unwrap(), da);
    }

    #[test]
    fn zero_alpha_unit_beta_is_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let n = 9;
        let dc = dense(n, n, 2.0);
        let a = BlockMatrixStore::from_dense(dir.path().join("a"), n, n, 4, &dense(n, n, 0.0), false).unwrap();
        let c = BlockMatrixStore::from_dense(dir.path().join("c"), n, n, 4, &dc, false).unwrap();
        let before = std::fs::read(dir.path().join("c/blk_0_0.f64")).unwrap();
        block_gemm(&a, &a, &c, 0.0, 1.0).unwrap();
        assert_eq!(std::fs::read(dir.path().join("c/blk_0_0.f64")).unwrap(), before);
        assert_eq!(c.to_dense().unwrap(), dc);
    }

    #[test]
    fn subtracting_itself_gives_zero() {
        let dir = tempfile::tempdir().unwrap();
        let a = BlockMatrixStore::from_dense(dir.path().join("a"), 10, 6, 4, &dense(10, 6, 5.0), false).unwrap();
        let d = block_sub(&a, &a, dir.path().join("d")).unwrap();
        assert!(d.to_dense().unwrap().iter().all(|&v| v == 0.0));
        let s = block_add(&a, &a, dir.path().join("s")).unwrap();
        let twice: Vec<f64> = a.to_dense().unwrap().iter().map(|v| 2.0 * v).collect();
        assert_eq!(s.to_dense().unwrap(), twice);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = BlockMatrixStore::create(dir.path().join("a"), 4, 5, 2).unwrap();
        let c = BlockMatrixStore::create(dir.path().join("c"), 4, 4, 2).unwrap();
        assert!(block_gemm(&a, &a, &c, 1.0, 0.0).is_err());
        let b = BlockMatrixStore::create(dir.path().join("b"), 5, 4, 3).unwrap();
        assert!(block_gemm(&a, &b, &c, 1.0, 0.0).is_err());
    }

    #[test]
    fn transposed_views() {
        let dir = tempfile::tempdir().unwrap();
        let (n, m) = (11, 7);
        let da = dense(n, m, 4.0);
        let a = BlockMatrixStore::from_dense(dir.path().join("a"), n, m, 3, &da, false).unwrap();
        let at = BlockMatrixStore::create(dir.path().join("at"), m, n, 3).unwrap();
        combine_into(Region::whole(&at), 1.0, View::whole(&a).t(), 0.0, None).unwrap();
        let got = at.to_dense().unwrap();
        for i in 0..n {
            for j in 0..m {
                assert_eq!(got[j * n + i], da[i * m + j]);
            }
        }
        let sub = View::whole(&a).t().sub(1, 2, 2, 1);
        let blk = sub.read(0, 0).unwrap();
        assert_eq!((blk.rows(), blk.cols()), (3, 3));
        assert_eq!(blk.at(0, 0), da[6 * m + 3]);
    }

    #[test]
    fn residual_and_matvec() {
        let dir = tempfile::tempdir().unwrap();
        let n = 10;
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let i = BlockMatrixStore::from_dense(dir.path().join("i"), n, n, 4, &eye, true).unwrap();
        assert_eq!(identity_residual(&i, &i).unwrap(), 0.0);
        let da = dense(n, n, 9.0);
        let a = BlockMatrixStore::from_dense(dir.path().join("a"), n, n, 4, &da, false).unwrap();
        let x: Vec<f64> = (0..n).map(|v| v as f64 - 3.0).collect();
        let y = block_matvec(&a, &x).unwrap();
        for r in 0..n {
            let want: f64 = (0..n).map(|c| da[r * n + c] * x[c]).sum();
            assert!((y[r] - want).abs() < 1e-12);
        }
    }
}
