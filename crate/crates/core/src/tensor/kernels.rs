//! Dense compute kernels shared by the tape ops.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`; the transpose flags describe how
/// the stored buffers relate to those logical shapes.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m*k, k*n and m*n
    // buffers whose lengths are asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis, or `None` if the kernel
/// does not fit the padded input.
pub fn conv2d_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds the input into a `[c_in*kh*kw, h_out*w_out]` matrix.
    pub fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let l = self.positions();
        let mut col = vec![0.0; self.patch_len() * l];
        let pad = self.padding as isize;
        for c in 0..self.c_in {
            let plane = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * l..(row + 1) * l];
                    for oy in 0..self.h_out {
                        let y = (oy * self.stride + ki) as isize - pad;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let src_row = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let x = (ox * self.stride + kj) as isize - pad;
                            if x >= 0 && x < self.w as isize {
                                dst[oy * self.w_out + ox] = src_row[x as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters a column matrix back into
    /// an input-shaped buffer, accumulating overlaps.
    pub fn col2im(&self, col: &[f64], out: &mut [f64]) {
        let l = self.positions();
        let pad = self.padding as isize;
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * l..(row + 1) * l];
                    for oy in 0..self.h_out {
                        let y = (oy * self.stride + ki) as isize - pad;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let base = c * self.h * self.w + y as usize * self.w;
                        for ox in 0..self.w_out {
                            let x = (ox * self.stride + kj) as isize - pad;
                            if x >= 0 && x < self.w as isize {
                                out[base + x as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
