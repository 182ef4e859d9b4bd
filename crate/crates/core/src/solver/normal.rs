//! Gauss–Newton normal equations with a banded knot part and a dense
//! calibration border, and their damped solution.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::residuals::Linearization;

use super::layout::ParameterLayout;

/// Symmetric positive-definite band matrix stored as its upper band.
#[derive(Clone, Debug, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    /// Row `i` holds `A(i, i..=i+bw)`.
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// `A(i, j)` for `i <= j <= i + bw`.
    #[inline]
    pub fn upper(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.bw + 1) + (j - i)]
    }

    #[inline]
    fn upper_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * (self.bw + 1) + (j - i)]
    }

    /// Entry of the full symmetric matrix; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        if b - a > self.bw {
            0.0
        } else {
            self.upper(a, b)
        }
    }

    /// Adds `v` to the symmetric pair `(i, j)`, `(j, i)`.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        assert!(b - a <= self.bw, "entry ({a}, {b}) outside bandwidth {}", self.bw);
        *self.upper_mut(a, b) += v;
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| self.upper(i, i))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Upper Cholesky factor `U` with `A = UᵀU`, in the same band layout.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let (n, bw) = (self.n, self.bw);
        let stride = bw + 1;
        let mut data = self.data.clone();
        for i in 0..n {
            let end = n.min(i + bw + 1);
            let (head, tail) = data.split_at_mut((i + 1) * stride);
            let row = &mut head[i * stride..i * stride + (end - i)];
            let s = row[0];
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::SingularSystem);
            }
            let d = s.sqrt();
            row[0] = d;
            row[1..].iter_mut().for_each(|x| *x /= d);
            // right-looking update of the trailing rows inside the band
            for j in i + 1..end {
                let f = row[j - i];
                if f == 0.0 {
                    continue;
                }
                let base = (j - i - 1) * stride;
                let target = &mut tail[base..base + (end - j)];
                for (t, &u) in target.iter_mut().zip(&row[j - i..]) {
                    *t -= f * u;
                }
            }
        }
        Ok(BandCholesky {
            u: BandMatrix { n, bw, data },
        })
    }
}

pub struct BandCholesky {
    u: BandMatrix,
}

impl BandCholesky {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, bw) = (self.u.n, self.u.bw);
        let stride = bw + 1;
        let data = &self.u.data;
        // Uᵀ y = b
        for i in 0..n {
            let end = n.min(i + bw + 1);
            let row = &data[i * stride..i * stride + (end - i)];
            let yi = b[i] / row[0];
            b[i] = yi;
            for (x, &u) in b[i + 1..end].iter_mut().zip(&row[1..]) {
                *x -= u * yi;
            }
        }
        // U x = y
        for i in (0..n).rev() {
            let end = n.min(i + bw + 1);
            let row = &data[i * stride..i * stride + (end - i)];
            let s: f64 = row[1..].iter().zip(&b[i + 1..end]).map(|(u, x)| u * x).sum();
            b[i] = (b[i] - s) / row[0];
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }
}

/// `H = JᵀJ`, `g = Jᵀr` and `cost = rᵀr` over whitened residuals, split
/// into the banded knot block `A`, the border `B` (knot × calibration) and
/// the dense corner `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalSystem {
    pub band: BandMatrix,
    pub border: DMatrix<f64>,
    pub corner: DMatrix<f64>,
    pub g: DVector<f64>,
    pub cost: f64,
    pub residual_count: usize,
}

impl NormalSystem {
    pub fn zeros(band_dim: usize, bandwidth: usize, calib_dim: usize) -> Self {
        Self {
            band: BandMatrix::zeros(band_dim, bandwidth),
            border: DMatrix::zeros(band_dim, calib_dim),
            corner: DMatrix::zeros(calib_dim, calib_dim),
            g: DVector::zeros(band_dim + calib_dim),
            cost: 0.0,
            residual_count: 0,
        }
    }

    /// Bandwidth needed by the knot columns of `lins` under `layout`.
    pub fn required_bandwidth<'a>(
        layout: &ParameterLayout,
        lins: impl IntoIterator<Item = &'a Linearization>,
    ) -> usize {
        let mut bw = 0;
        for lin in lins {
            let mut lo = usize::MAX;
            let mut hi = 0;
            for &(block, _) in lin.blocks() {
                if let Some(c) = layout.column(block).filter(|&c| c < layout.band_dim()) {
                    lo = lo.min(c);
                    hi = hi.max(c + block.dim() - 1);
                }
            }
            if lo != usize::MAX {
                bw = bw.max(hi - lo);
            }
        }
        bw
    }

    pub fn from_linearizations<'a>(
        layout: &ParameterLayout,
        lins: impl IntoIterator<Item = &'a Linearization> + Clone,
    ) -> Self {
        let bw = Self::required_bandwidth(layout, lins.clone());
        let mut sys = Self::zeros(layout.band_dim(), bw, layout.calib_dim());
        for lin in lins {
            sys.accumulate(layout, lin);
        }
        sys
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn band_dim(&self) -> usize {
        self.band.dim()
    }

    pub fn calib_dim(&self) -> usize {
        self.corner.nrows()
    }

    /// Adds one whitened residual block. Blocks without a column in
    /// `layout` (fixed parameters) are dropped.
    pub fn accumulate(&mut self, layout: &ParameterLayout, lin: &Linearization) {
        self.cost += lin.residual.norm_squared();
        self.residual_count += 1;
        // (global column, local column, width), sorted by global column
        let mut cols: Vec<(usize, usize, usize)> = lin
            .blocks()
            .iter()
            .filter_map(|&(block, off)| layout.column(block).map(|c| (c, off, block.dim())))
            .collect();
        if cols.is_empty() {
            return;
        }
        cols.sort_unstable();
        match lin.dim() {
            1 => self.accumulate_rows::<1>(&cols, lin),
            3 => self.accumulate_rows::<3>(&cols, lin),
            6 => self.accumulate_rows::<6>(&cols, lin),
            _ => self.accumulate_rows::<0>(&cols, lin),
        }
    }

    /// `JᵀJ` and `Jᵀr` for one residual; `M` fixes the residual dimension
    /// at compile time for the common sizes, `M = 0` reads it at run time.
    ///
    /// Knot columns of a residual span a short contiguous range, so the band
    /// part is formed as rank-one row updates over a dense copy of that range.
    fn accumulate_rows<const M: usize>(&mut self, cols: &[(usize, usize, usize)], lin: &Linearization) {
        const SPAN: usize = 64;
        let m = if M > 0 { M } else { lin.dim() };
        let jac = lin.jacobian_slice();
        let column = |c: usize| &jac[c * m..(c + 1) * m];
        let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
        let r = lin.residual.as_slice();
        let nb = self.band_dim();
        for &(gc, lc, d) in cols {
            for k in 0..d {
                self.g[gc + k] += dot(column(lc + k), r);
            }
        }

        let split = cols.partition_point(|c| c.0 < nb);
        let (band_cols, calib_cols) = cols.split_at(split);
        if let (Some(first), Some(last)) = (band_cols.first(), band_cols.last()) {
            let lo = first.0;
            let w = last.0 + last.2 - lo;
            assert!(
                w - 1 <= self.band.bw,
                "residual spans {w} columns, bandwidth {}",
                self.band.bw
            );
            let mut stack = [0.0; 6 * SPAN];
            let mut heap = Vec::new();
            let buf: &mut [f64] = if m * w <= stack.len() {
                &mut stack[..m * w]
            } else {
                heap.resize(m * w, 0.0);
                &mut heap
            };
            for &(gc, lc, d) in band_cols {
                for k in 0..d {
                    for (row, &v) in column(lc + k).iter().enumerate() {
                        buf[row * w + gc - lo + k] = v;
                    }
                }
            }
            let stride = self.band.bw + 1;
            for row in buf.chunks_exact(w) {
                for (i, &v) in row.iter().enumerate() {
                    if v == 0.0 {
                        continue;
                    }
                    let at = (lo + i) * stride;
                    for (dst, &x) in self.band.data[at..at + w - i].iter_mut().zip(&row[i..]) {
                        *dst += v * x;
                    }
                }
            }
        }

        for (a, &(ga, la, da)) in calib_cols.iter().enumerate() {
            for i in 0..da {
                let ci = column(la + i);
                let p = ga - nb + i;
                for &(gb, lb, db) in band_cols {
                    for j in 0..db {
                        self.border[(gb + j, p)] += dot(ci, column(lb + j));
                    }
                }
                for &(gb, lb, db) in &calib_cols[a..] {
                    let j0 = if gb == ga { i } else { 0 };
                    for j in j0..db {
                        let v = dot(ci, column(lb + j));
                        let q = gb - nb + j;
                        self.corner[(p, q)] += v;
                        if p != q {
                            self.corner[(q, p)] += v;
                        }
                    }
                }
            }
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim());
        d.rows_mut(0, self.band_dim()).copy_from(&self.band.diagonal());
        d.rows_mut(self.band_dim(), self.calib_dim())
            .copy_from(&self.corner.diagonal());
        d
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (nb, nc) = (self.band_dim(), self.calib_dim());
        let mut h = DMatrix::zeros(nb + nc, nb + nc);
        h.view_mut((0, 0), (nb, nb)).copy_from(&self.band.to_dense());
        h.view_mut((0, nb), (nb, nc)).copy_from(&self.border);
        h.view_mut((nb, 0), (nc, nb)).copy_from(&self.border.transpose());
        h.view_mut((nb, nb), (nc, nc)).copy_from(&self.corner);
        h
    }

    /// Solves `(H + λ·D) φ = −g` with `D = diag(H)` floored at a small
    /// fraction of its largest entry, eliminating calibration last.
    pub fn solve_damped(&self, lambda: f64) -> Result<DVector<f64>> {
        let diag = self.diagonal();
        let floor = 1e-9 * diag.amax().max(1e-12);
        let mut band = self.band.clone();
        for i in 0..self.band_dim() {
            band.add(i, i, lambda * diag[i].max(floor));
        }
        let mut corner = self.corner.clone();
        for i in 0..self.calib_dim() {
            corner[(i, i)] += lambda * diag[self.band_dim() + i].max(floor);
        }
        let chol = band.cholesky()?;
        let nb = self.band_dim();
        let neg_g1 = -self.g.rows(0, nb).into_owned();
        if self.calib_dim() == 0 {
            return Ok(chol.solve(&neg_g1));
        }
        let neg_g2 = -self.g.rows(nb, self.calib_dim()).into_owned();
        let (schur, ainv_b) = schur_complement(&chol, &self.border, &corner);
        let y = chol.solve(&neg_g1);
        let rhs = neg_g2 - self.border.transpose() * &y;
        let z = schur.cholesky().ok_or(Error::SingularSystem)?.solve(&rhs);
        let x = y - ainv_b * &z;
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, nb).copy_from(&x);
        out.rows_mut(nb, self.calib_dim()).copy_from(&z);
        Ok(out)
    }

    /// Condition number of the Jacobi-scaled, undamped calibration Schur
    /// complement; `None` without calibration columns. Infinite when the
    /// knot block itself cannot be factorized.
    pub fn calibration_condition(&self) -> Option<f64> {
        if self.calib_dim() == 0 {
            return None;
        }
        let mut band = self.band.clone();
        // tiny regularization keeps gauge-free knot directions factorizable
        let floor = 1e-12 * self.diagonal().amax().max(1e-12);
        for i in 0..self.band_dim() {
            band.add(i, i, floor);
        }
        let Ok(chol) = band.cholesky() else {
            return Some(f64::INFINITY);
        };
        let (s, _) = schur_complement(&chol, &self.border, &self.corner);
        let d = s.diagonal().map(|x| if x > 0.0 { 1.0 / x.sqrt() } else { 0.0 });
        if d.iter().any(|&x| x == 0.0) {
            return Some(f64::INFINITY);
        }
        let scaled = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| s[(i, j)] * d[i] * d[j]);
        let eig = scaled.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        Some(if lo > 0.0 { hi / lo } else { f64::INFINITY })
    }
}

/// `(C − Bᵀ A⁻¹ B, A⁻¹ B)`.
fn schur_complement(chol: &BandCholesky, border: &DMatrix<f64>, corner: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut ainv_b = border.clone();
    for mut col in ainv_b.column_iter_mut() {
        chol.solve_in_place(col.as_mut_slice());
    }
    let mut s = corner - border.transpose() * &ainv_b;
    s = (&s + s.transpose()) * 0.5;
    (s, ainv_b)
}
