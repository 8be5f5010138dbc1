use rayon::prelude::*;

use crate::error::{CometError, Result};

/// Dense row-major matrix of finite `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Zero matrix. Zero-sized dimensions are allowed for empty batches.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CometError::shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(CometError::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        let m = Self { rows, cols, data };
        m.check_finite("matrix")?;
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CometError::shape("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Single row vector.
    pub fn row_vector(values: &[f32]) -> Result<Self> {
        Self::from_vec(1, values.len(), values.to_vec())
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        let c = self.cols.max(1);
        self.data.chunks_exact(c).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        let mut out = vec![0.0; self.data.len()];
        const BLOCK: usize = 32;
        for ib in (0..self.rows).step_by(BLOCK) {
            for jb in (0..self.cols).step_by(BLOCK) {
                for i in ib..(ib + BLOCK).min(self.rows) {
                    for j in jb..(jb + BLOCK).min(self.cols) {
                        out[j * self.rows + i] = self.data[i * self.cols + j];
                    }
                }
            }
        }
        Self::from_raw(self.cols, self.rows, out)
    }

    /// Gathers the listed rows into a new matrix, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(indices.len(), self.cols, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(CometError::shape(format!(
                "elementwise product of {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Self::from_raw(self.rows, self.cols, data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(p) => Err(CometError::numeric(format!(
                "{what} has non-finite value {} at ({}, {})",
                self.data[p],
                p / self.cols.max(1),
                p % self.cols.max(1)
            ))),
        }
    }

    /// Count of nonzero entries in row `i`.
    pub fn row_nnz(&self, i: usize) -> usize {
        self.row(i).iter().filter(|v| **v != 0.0).count()
    }
}

/// Dot product with `f64` accumulation over four independent lanes.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

const ROW_BLOCK: usize = 8;
const COL_BLOCK: usize = 256;
const TILE: usize = 16;
/// Rows per parallel work item; several row blocks share each column strip of `b`.
const ROW_CHUNK: usize = 32;
const PAR_THRESHOLD: usize = 1 << 18;

/// Standard product `a · b`.
///
/// Each output element accumulates `a[i,k] * b[k,j]` over increasing `k` in `f64`
/// with fused multiply-adds, skipping zero `a` entries (an exact no-op on the sum).
/// The result is therefore bit-identical for any row partitioning, thread count
/// or SIMD width.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(CometError::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, n) = (a.rows, b.cols);
    let mut out = vec![0.0f32; m * n];
    if m == 0 || n == 0 {
        return Ok(Matrix::from_raw(m, n, out));
    }
    // with finite `b`, adding `0 * b` equals skipping, so rows can share tiles
    let tiled = b.is_finite();
    let run = |(blk, dst): (usize, &mut [f32])| {
        if tiled {
            block_tiled(a, b, blk * ROW_CHUNK, dst)
        } else {
            for (i, sub) in dst.chunks_mut(ROW_BLOCK * n).enumerate() {
                block_sparse(a, b, blk * ROW_CHUNK + i * ROW_BLOCK, sub)
            }
        }
    };
    for_row_chunks(&mut out, n, m * n * a.cols, run);
    Ok(Matrix::from_raw(m, n, out))
}

fn for_row_chunks<F>(out: &mut [f32], n: usize, work: usize, run: F)
where
    F: Fn((usize, &mut [f32])) + Sync + Send,
{
    let chunk = ROW_CHUNK * n;
    if work >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(chunk).enumerate().for_each(run);
    } else {
        out.chunks_mut(chunk).enumerate().for_each(run);
    }
}

fn block_tiled(a: &Matrix, b: &Matrix, row0: usize, dst: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled feature set
            return unsafe { tiled_avx512(a, b, row0, dst) };
        }
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: as above
            return unsafe { tiled_avx2(a, b, row0, dst) };
        }
    }
    tiled_body(a, b, row0, dst)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn tiled_avx512(a: &Matrix, b: &Matrix, row0: usize, dst: &mut [f32]) {
    tiled_body(a, b, row0, dst)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn tiled_avx2(a: &Matrix, b: &Matrix, row0: usize, dst: &mut [f32]) {
    tiled_body(a, b, row0, dst)
}

/// Register tiles of `ROW_BLOCK x TILE` accumulators over `dst`'s rows; `k` steps
/// where every row of a block has a zero coefficient are skipped.
#[inline(always)]
fn tiled_body(a: &Matrix, b: &Matrix, row0: usize, dst: &mut [f32]) {
    let n = b.cols;
    let inner = a.cols;
    let nrows = dst.len() / n;
    let blocks: Vec<(usize, Vec<usize>, Vec<[f64; ROW_BLOCK]>)> = (0..nrows)
        .step_by(ROW_BLOCK)
        .map(|r0| {
            let rows = ROW_BLOCK.min(nrows - r0);
            let mut nz = Vec::with_capacity(inner);
            let mut coefs = Vec::with_capacity(inner);
            for k in 0..inner {
                let mut c = [0.0f64; ROW_BLOCK];
                for (r, slot) in c.iter_mut().enumerate().take(rows) {
                    *slot = a.data[(row0 + r0 + r) * inner + k] as f64;
                }
                if c.iter().any(|&v| v != 0.0) {
                    nz.push(k);
                    coefs.push(c);
                }
            }
            (r0, nz, coefs)
        })
        .collect();
    let full = n - n % TILE;
    for jt in (0..full).step_by(TILE) {
        for (r0, nz, coefs) in &blocks {
            let mut acc = [[0.0f64; TILE]; ROW_BLOCK];
            for (&k, c) in nz.iter().zip(coefs) {
                let brow: &[f32; TILE] = b.data[k * n + jt..k * n + jt + TILE]
                    .try_into()
                    .expect("tile width");
                let mut bv = [0.0f64; TILE];
                for (d, &s) in bv.iter_mut().zip(brow) {
                    *d = s as f64;
                }
                for (row, &cr) in acc.iter_mut().zip(c) {
                    for (s, &v) in row.iter_mut().zip(&bv) {
                        *s = cr.mul_add(v, *s);
                    }
                }
            }
            let rows = ROW_BLOCK.min(nrows - r0);
            for (r, row) in acc.iter().enumerate().take(rows) {
                let at = (r0 + r) * n + jt;
                for (d, &s) in dst[at..at + TILE].iter_mut().zip(row) {
                    *d = s as f32;
                }
            }
        }
    }
    for j in full..n {
        for (r0, nz, coefs) in &blocks {
            let mut acc = [0.0f64; ROW_BLOCK];
            for (&k, c) in nz.iter().zip(coefs) {
                let v = b.data[k * n + j] as f64;
                for (s, &cr) in acc.iter_mut().zip(c) {
                    *s = cr.mul_add(v, *s);
                }
            }
            for (r, &s) in acc.iter().enumerate().take(ROW_BLOCK.min(nrows - r0)) {
                dst[(r0 + r) * n + j] = s as f32;
            }
        }
    }
}

/// Row-at-a-time kernel that never touches `b` for a zero coefficient.
fn block_sparse(a: &Matrix, b: &Matrix, row0: usize, dst: &mut [f32]) {
    let n = b.cols;
    let inner = a.cols;
    let nrows = dst.len() / n;
    let mut acc = [[0.0f64; COL_BLOCK]; ROW_BLOCK];
    for jb in (0..n).step_by(COL_BLOCK) {
        let w = COL_BLOCK.min(n - jb);
        for row in acc.iter_mut().take(nrows) {
            row[..w].fill(0.0);
        }
        for k in 0..inner {
            let brow = &b.data[k * n + jb..k * n + jb + w];
            for r in 0..nrows {
                let c = a.data[(row0 + r) * inner + k] as f64;
                if c == 0.0 {
                    continue;
                }
                for (s, &bv) in acc[r][..w].iter_mut().zip(brow) {
                    *s = c.mul_add(bv as f64, *s);
                }
            }
        }
        for r in 0..nrows {
            for (d, s) in dst[r * n + jb..r * n + jb + w].iter_mut().zip(&acc[r][..w]) {
                *d = *s as f32;
            }
        }
    }
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(CometError::shape(format!(
            "matmul_nt {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for ar in a.iter_rows() {
        for br in b.iter_rows() {
            out.push(dot(ar, br) as f32);
        }
    }
    Ok(Matrix::from_raw(a.rows, b.rows, out))
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(CometError::shape(format!(
            "matmul_tn ({}x{})ᵀ by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    matmul(&a.transpose(), b)
}

/// Normalized inner product. Zero vectors are a domain error.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CometError::shape(format!(
            "cosine similarity of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = dot(u, u);
    let nv = dot(v, v);
    if nu == 0.0 || nv == 0.0 {
        return Err(CometError::domain("cosine similarity of a zero vector"));
    }
    Ok((dot(u, v) / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}
