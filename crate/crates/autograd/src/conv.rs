//! 2D convolution kernels (im2col + GEMM) and nearest-neighbor upsampling.
//!
//! Layout: activations are (C, H, W) row-major, kernels (Cout, Cin, KH, KW).

use crate::gemm::{gemm_nt, gemm_tn};
use crate::Element;

#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.pad - self.kw) / self.stride + 1
    }
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.h_out() * self.w_out()
    }
}

/// cols is (cin*kh*kw, h_out*w_out); rows indexed by (c, ki, kj).
fn im2col<E: Element>(x: &[E], s: &ConvShape, cols: &mut [E]) {
    let (h_out, w_out) = (s.h_out(), s.w_out());
    let positions = s.positions();
    debug_assert_eq!(cols.len(), s.patch() * positions);
    let mut row = 0;
    for c in 0..s.cin {
        let plane = &x[c * s.h_in * s.w_in..(c + 1) * s.h_in * s.w_in];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                let mut p = 0;
                for oy in 0..h_out {
                    let iy = (oy * s.stride + ki) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h_in as isize {
                        for _ in 0..w_out {
                            dst[p] = E::zero();
                            p += 1;
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * s.w_in..(iy as usize + 1) * s.w_in];
                    for ox in 0..w_out {
                        let ix = (ox * s.stride + kj) as isize - s.pad as isize;
                        dst[p] = if ix < 0 || ix >= s.w_in as isize {
                            E::zero()
                        } else {
                            src_row[ix as usize]
                        };
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add transpose of im2col.
fn col2im<E: Element>(cols: &[E], s: &ConvShape, x: &mut [E]) {
    let (h_out, w_out) = (s.h_out(), s.w_out());
    let positions = s.positions();
    let mut row = 0;
    for c in 0..s.cin {
        let plane = &mut x[c * s.h_in * s.w_in..(c + 1) * s.h_in * s.w_in];
        for ki in 0..s.kh {
            for kj in 0..s.kw {
                let src = &cols[row * positions..(row + 1) * positions];
                let mut p = 0;
                for oy in 0..h_out {
                    let iy = (oy * s.stride + ki) as isize - s.pad as isize;
                    if iy < 0 || iy >= s.h_in as isize {
                        p += w_out;
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * s.w_in..(iy as usize + 1) * s.w_in];
                    for ox in 0..w_out {
                        let ix = (ox * s.stride + kj) as isize - s.pad as isize;
                        if ix >= 0 && ix < s.w_in as isize {
                            dst_row[ix as usize] += src[p];
                        }
                        p += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// y(cout, h_out*w_out) = w(cout, patch) * im2col(x) + b
pub fn conv2d_forward<E: Element>(x: &[E], w: &[E], b: &[E], s: &ConvShape) -> Vec<E> {
    let positions = s.positions();
    let patch = s.patch();
    let mut cols = vec![E::zero(); patch * positions];
    im2col(x, s, &mut cols);
    let mut y = vec![E::zero(); s.cout * positions];
    for (co, chunk) in y.chunks_mut(positions).enumerate() {
        chunk.fill(b[co]);
    }
    crate::gemm::gemm_nn(s.cout, patch, positions, w, &cols, &mut y);
    y
}

/// Gradients for x, w, b given dy(cout, h_out*w_out).
pub fn conv2d_backward<E: Element>(
    x: &[E],
    w: &[E],
    dy: &[E],
    s: &ConvShape,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let positions = s.positions();
    let patch = s.patch();

    let mut cols = vec![E::zero(); patch * positions];
    im2col(x, s, &mut cols);

    // dW(cout, patch) = dy(cout, P) * cols(patch, P)^T
    let mut dw = vec![E::zero(); s.cout * patch];
    gemm_nt(s.cout, positions, patch, dy, &cols, &mut dw);

    // db(cout) = row sums of dy
    let mut db = vec![E::zero(); s.cout];
    for co in 0..s.cout {
        let mut acc = E::zero();
        for v in &dy[co * positions..(co + 1) * positions] {
            acc += *v;
        }
        db[co] = acc;
    }

    // dcols(patch, P) = w(cout, patch)^T * dy(cout, P)
    let mut dcols = vec![E::zero(); patch * positions];
    gemm_tn(patch, s.cout, positions, w, dy, &mut dcols);

    let mut dx = vec![E::zero(); s.cin * s.h_in * s.w_in];
    col2im(&dcols, s, &mut dx);
    (dx, dw, db)
}

/// Nearest-neighbor 2x upsample of (c, h, w).
pub fn upsample2x_forward<E: Element>(x: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let mut y = vec![E::zero(); c * 4 * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut y[ch * h2 * w2..(ch + 1) * h2 * w2];
        for i in 0..h2 {
            let si = i / 2;
            for j in 0..w2 {
                dst[i * w2 + j] = src[si * w + j / 2];
            }
        }
    }
    y
}

/// 2x2 sum-pool: adjoint of nearest-neighbor upsampling.
pub fn upsample2x_backward<E: Element>(dy: &[E], c: usize, h: usize, w: usize) -> Vec<E> {
    let mut dx = vec![E::zero(); c * h * w];
    let (h2, w2) = (2 * h, 2 * w);
    for ch in 0..c {
        let src = &dy[ch * h2 * w2..(ch + 1) * h2 * w2];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                dst[(i / 2) * w + j / 2] += src[i * w2 + j];
            }
        }
    }
    dx
}
