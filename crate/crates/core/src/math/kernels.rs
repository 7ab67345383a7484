//! Dense kernels behind the tape ops. All matrices are row-major slices and
//! every routine accumulates into its output (`c += ...`).

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_blocked(m, k, n, a, (k, 1), b, c);
}

const MR: usize = 4;
const NR: usize = 4;

/// `c += op(a) · b` with `b` row-major `[k×n]` and `op(a)[i][p] = a[i*si + p*sp]`.
fn gemm_blocked(m: usize, k: usize, n: usize, a: &[f64], strides: (usize, usize), b: &[f64], c: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were just detected.
        unsafe { gemm_blocked_fma(m, k, n, a, strides, b, c) };
        return;
    }
    gemm_blocked_impl::<MR, NR, false>(m, k, n, a, strides, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_blocked_fma(m: usize, k: usize, n: usize, a: &[f64], strides: (usize, usize), b: &[f64], c: &mut [f64]) {
    gemm_blocked_impl::<4, 8, true>(m, k, n, a, strides, b, c);
}

#[inline(always)]
fn gemm_blocked_impl<const BM: usize, const BN: usize, const FMA: bool>(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (si, sp): (usize, usize),
    b: &[f64],
    c: &mut [f64],
) {
    let (mb, nb) = (m - m % BM, n - n % BN);
    let mut panel = vec![0.0; k * BM];
    for i0 in (0..mb).step_by(BM) {
        for (p, dst) in panel.chunks_exact_mut(BM).enumerate() {
            for (r, d) in dst.iter_mut().enumerate() {
                *d = a[(i0 + r) * si + p * sp];
            }
        }
        for j0 in (0..nb).step_by(BN) {
            let mut acc = [[0.0f64; BN]; BM];
            for (ap, brow) in panel.chunks_exact(BM).zip(b.chunks_exact(n)) {
                let br: &[f64; BN] = brow[j0..j0 + BN].try_into().expect("BN slice");
                for (row, &av) in acc.iter_mut().zip(ap) {
                    for q in 0..BN {
                        row[q] = if FMA { av.mul_add(br[q], row[q]) } else { row[q] + av * br[q] };
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                for (cv, v) in c[(i0 + r) * n + j0..(i0 + r) * n + j0 + BN].iter_mut().zip(row) {
                    *cv += v;
                }
            }
        }
    }
    // ragged edges
    for i in 0..m {
        let j_start = if i < mb { nb } else { 0 };
        if j_start == n {
            continue;
        }
        for p in 0..k {
            let av = a[i * si + p * sp];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n + j_start..(p + 1) * n];
            for (cv, &bv) in c[i * n + j_start..(i + 1) * n].iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m >= MR && n >= NR {
        let mut bt = vec![0.0; k * n];
        for (j, row) in b.chunks_exact(k).enumerate() {
            for (p, &v) in row.iter().enumerate() {
                bt[p * n + j] = v;
            }
        }
        gemm_blocked(m, k, n, a, (k, 1), &bt, c);
        return;
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_blocked(m, k, n, a, (1, m), b, c);
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums keep the loop vectorisable without reassociation flags
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a 2-D convolution over one `C×H×W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Unrolls the image into a `patch_len × (out_h·out_w)` column matrix.
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        let plane = oh * ow;
        for c in 0..self.channels {
            let img = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.height as isize {
                            out.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &img[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.width as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatters a column-matrix gradient back onto the image gradient.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let k = self.kernel;
        let plane = oh * ow;
        for c in 0..self.channels {
            let img = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut img[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a stride-1 1-D convolution over one `C×L` sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl Conv1dGeom {
    pub fn out_len(&self) -> usize {
        self.len + 2 * self.pad - self.kernel + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel
    }

    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ol = self.out_len();
        for c in 0..self.channels {
            let seq = &x[c * self.len..(c + 1) * self.len];
            for kk in 0..self.kernel {
                let row = c * self.kernel + kk;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for (o, d) in dst.iter_mut().enumerate() {
                    let i = (o + kk) as isize - self.pad as isize;
                    *d = if i < 0 || i >= self.len as isize { 0.0 } else { seq[i as usize] };
                }
            }
        }
    }

    /// Unrolls a batch `x[B,C,L]` into one `patch_len × (B·out_len)` matrix,
    /// sample-major along the columns.
    pub fn im2col_batch(&self, x: &[f64], batch: usize, cols: &mut [f64]) {
        let ol = self.out_len();
        let width = batch * ol;
        let seq_len = self.channels * self.len;
        for bi in 0..batch {
            let xs = &x[bi * seq_len..(bi + 1) * seq_len];
            for c in 0..self.channels {
                let seq = &xs[c * self.len..(c + 1) * self.len];
                for kk in 0..self.kernel {
                    let row = c * self.kernel + kk;
                    let dst = &mut cols[row * width + bi * ol..row * width + (bi + 1) * ol];
                    for (o, d) in dst.iter_mut().enumerate() {
                        let i = (o + kk) as isize - self.pad as isize;
                        *d = if i < 0 || i >= self.len as isize { 0.0 } else { seq[i as usize] };
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col_batch`].
    pub fn col2im_batch(&self, cols: &[f64], batch: usize, dx: &mut [f64]) {
        let ol = self.out_len();
        let width = batch * ol;
        let seq_len = self.channels * self.len;
        for bi in 0..batch {
            let xs = &mut dx[bi * seq_len..(bi + 1) * seq_len];
            for c in 0..self.channels {
                let seq = &mut xs[c * self.len..(c + 1) * self.len];
                for kk in 0..self.kernel {
                    let row = c * self.kernel + kk;
                    let src = &cols[row * width + bi * ol..row * width + (bi + 1) * ol];
                    for (o, &s) in src.iter().enumerate() {
                        let i = (o + kk) as isize - self.pad as isize;
                        if i >= 0 && i < self.len as isize {
                            seq[i as usize] += s;
                        }
                    }
                }
            }
        }
    }

    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let ol = self.out_len();
        for c in 0..self.channels {
            let seq = &mut dx[c * self.len..(c + 1) * self.len];
            for kk in 0..self.kernel {
                let row = c * self.kernel + kk;
                let src = &cols[row * ol..(row + 1) * ol];
                for (o, &s) in src.iter().enumerate() {
                    let i = (o + kk) as isize - self.pad as isize;
                    if i >= 0 && i < self.len as isize {
                        seq[i as usize] += s;
                    }
                }
            }
        }
    }
}
