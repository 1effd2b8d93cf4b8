//! 2-D convolution kernels (NCHW, square kernels) via im2col and GEMM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

/// `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides (checked above in debug builds, guaranteed by
    // the callers' shape validation), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Dims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

fn im2col(x: &[f64], d: &Dims, geom: ConvGeom, cols: &mut [f64]) {
    let plane = d.ho * d.wo;
    for c in 0..d.cin {
        let xc = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    let line = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
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

fn col2im(cols: &[f64], d: &Dims, geom: ConvGeom, x: &mut [f64]) {
    let plane = d.ho * d.wo;
    for c in 0..d.cin {
        let xc = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.ho {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dims(op: &'static str, x_shape: &[usize], w_shape: &[usize], geom: ConvGeom) -> Result<Dims> {
    if x_shape.len() != 4
        || w_shape.len() != 4
        || w_shape[2] != w_shape[3]
        || x_shape[1] != w_shape[1]
    {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        });
    }
    let k = w_shape[2];
    let (ho, wo) = match (geom.out_len(x_shape[2], k), geom.out_len(x_shape[3], k)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::InvalidArgument {
                op,
                msg: format!("kernel {k} does not fit input {x_shape:?} with {geom:?}"),
            })
        }
    };
    Ok(Dims {
        n: x_shape[0],
        cin: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        cout: w_shape[0],
        k,
        ho,
        wo,
    })
}

/// `x: [N, Cin, H, W]`, `w: [Cout, Cin, K, K]` → `[N, Cout, Ho, Wo]`.
pub fn conv2d(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let d = dims("conv2d", x.shape(), w.shape(), geom)?;
    let plane = d.ho * d.wo;
    let kk = d.cin * d.k * d.k;
    let mut cols = vec![0.0; kk * plane];
    let mut out = vec![0.0; d.n * d.cout * plane];
    for b in 0..d.n {
        let xb = &x.data()[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
        im2col(xb, &d, geom, &mut cols);
        let ob = &mut out[b * d.cout * plane..(b + 1) * d.cout * plane];
        gemm(
            d.cout,
            kk,
            plane,
            w.data(),
            (kk, 1),
            &cols,
            (plane, 1),
            0.0,
            ob,
        );
    }
    Tensor::new(vec![d.n, d.cout, d.ho, d.wo], out)
}

/// Gradient of `conv2d` w.r.t. its input; `input_hw` recovers the spatial
/// size lost to stride flooring.
pub fn conv2d_input_grad(
    g: &Tensor,
    w: &Tensor,
    geom: ConvGeom,
    input_hw: (usize, usize),
) -> Result<Tensor> {
    let gs = g.shape();
    let ws = w.shape();
    if gs.len() != 4 || ws.len() != 4 || gs[1] != ws[0] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_input_grad",
            lhs: gs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let x_shape = [gs[0], ws[1], input_hw.0, input_hw.1];
    let d = dims("conv2d_input_grad", &x_shape, ws, geom)?;
    if d.ho != gs[2] || d.wo != gs[3] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_input_grad",
            lhs: gs.to_vec(),
            rhs: vec![d.n, d.cout, d.ho, d.wo],
        });
    }
    let plane = d.ho * d.wo;
    let kk = d.cin * d.k * d.k;
    let mut cols = vec![0.0; kk * plane];
    let mut out = vec![0.0; d.n * d.cin * d.h * d.w];
    for b in 0..d.n {
        let gb = &g.data()[b * d.cout * plane..(b + 1) * d.cout * plane];
        // cols = Wᵀ · g
        gemm(
            kk,
            d.cout,
            plane,
            w.data(),
            (1, kk),
            gb,
            (plane, 1),
            0.0,
            &mut cols,
        );
        col2im(
            &cols,
            &d,
            geom,
            &mut out[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w],
        );
    }
    Tensor::new(x_shape.to_vec(), out)
}

/// Gradient of `conv2d` w.r.t. its kernel, summed over the batch.
pub fn conv2d_weight_grad(x: &Tensor, g: &Tensor, geom: ConvGeom, kernel: usize) -> Result<Tensor> {
    let xs = x.shape();
    let gs = g.shape();
    if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_weight_grad",
            lhs: xs.to_vec(),
            rhs: gs.to_vec(),
        });
    }
    let w_shape = [gs[1], xs[1], kernel, kernel];
    let d = dims("conv2d_weight_grad", xs, &w_shape, geom)?;
    if d.ho != gs[2] || d.wo != gs[3] {
        return Err(Error::ShapeMismatch {
            op: "conv2d_weight_grad",
            lhs: gs.to_vec(),
            rhs: vec![d.n, d.cout, d.ho, d.wo],
        });
    }
    let plane = d.ho * d.wo;
    let kk = d.cin * d.k * d.k;
    let mut cols = vec![0.0; kk * plane];
    let mut out = vec![0.0; d.cout * kk];
    for b in 0..d.n {
        let xb = &x.data()[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
        im2col(xb, &d, geom, &mut cols);
        let gb = &g.data()[b * d.cout * plane..(b + 1) * d.cout * plane];
        // out += g · colsᵀ
        let beta = if b == 0 { 0.0 } else { 1.0 };
        gemm(
            d.cout,
            plane,
            kk,
            gb,
            (plane, 1),
            &cols,
            (1, plane),
            beta,
            &mut out,
        );
    }
    Tensor::new(w_shape.to_vec(), out)
}
