use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(
        op: &str,
        cin: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config(format!("{op}: stride must be positive")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Config(format!(
                "{op}: {h}x{w} input with padding {padding} admits no {kh}x{kw} placement"
            )));
        }
        Ok(Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Maps an output coordinate and kernel tap to an input coordinate.
    #[inline]
    fn source(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + tap) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Element>(g: &Geometry, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let src = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.source(oy, ki, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src_row = &src[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kj, g.w) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Geometry, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dst = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let Some(iy) = g.source(oy, ki, g.h) else { continue };
                    let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                    for (ox, v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            dst_row[ix] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation. `input: (B, Cin, H, W)`, `weight: (Cout, Cin, kh, kw)`.
/// Output extents use floor division when the stride does not fit exactly.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", weight, 4)?;
    let (b, cin, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (cout, wcin, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wcin != cin {
        return Err(Error::Config(format!(
            "conv2d: input has {cin} channels, weight expects {wcin}"
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [cout] {
            return Err(Error::Config(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                bias.shape()
            )));
        }
    }
    let g = Geometry::new("conv2d", cin, h, w, kh, kw, stride, padding)?;
    let (rows, plane) = (g.col_rows(), g.out_plane());
    let in_len = cin * h * w;
    let out_len = cout * plane;

    let mut out = vec![T::zero(); b * out_len];
    {
        let x = input.data();
        let wt = weight.data();
        let mut cols = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); rows * plane]
        };
        for bi in 0..b {
            let image = &x[bi * in_len..(bi + 1) * in_len];
            let cols_ref: &[T] = if g.is_pointwise() {
                image
            } else {
                im2col(&g, image, &mut cols);
                &cols
            };
            T::gemm(
                cout,
                rows,
                plane,
                &wt,
                false,
                cols_ref,
                false,
                &mut out[bi * out_len..(bi + 1) * out_len],
                false,
            );
        }
        if let Some(bias) = bias {
            let bv = bias.data();
            for chunk in out.chunks_exact_mut(plane).enumerate() {
                let (idx, plane_vals) = chunk;
                let bb = bv[idx % cout];
                plane_vals.iter_mut().for_each(|v| *v += bb);
            }
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    let (xc, wc, has_bias) = (input.clone(), weight.clone(), bias.is_some());
    Tensor::from_op(
        out,
        &[b, cout, g.ho, g.wo],
        parents,
        Box::new(move |grad| {
            let need_dx = xc.requires_grad();
            let need_dw = wc.requires_grad();
            let x = xc.data();
            let wt = wc.data();
            let mut dx = need_dx.then(|| vec![T::zero(); b * in_len]);
            let mut dw = need_dw.then(|| vec![T::zero(); cout * rows]);
            let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * plane }];
            let mut dcols = vec![T::zero(); if need_dx { rows * plane } else { 0 }];
            for bi in 0..b {
                let go = &grad[bi * out_len..(bi + 1) * out_len];
                if let Some(dw) = dw.as_mut() {
                    let image = &x[bi * in_len..(bi + 1) * in_len];
                    let cols_ref: &[T] = if g.is_pointwise() {
                        image
                    } else {
                        im2col(&g, image, &mut cols);
                        &cols
                    };
                    T::gemm(cout, plane, rows, go, false, cols_ref, true, dw, true);
                }
                if let Some(dx) = dx.as_mut() {
                    let dimg = &mut dx[bi * in_len..(bi + 1) * in_len];
                    if g.is_pointwise() {
                        T::gemm(rows, cout, plane, &wt, true, go, false, dimg, false);
                    } else {
                        T::gemm(rows, cout, plane, &wt, true, go, false, &mut dcols, false);
                        col2im(&g, &dcols, dimg);
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                let mut db = vec![T::zero(); cout];
                for (idx, plane_vals) in grad.chunks_exact(plane).enumerate() {
                    db[idx % cout] += plane_vals.iter().copied().sum::<T>();
                }
                grads.push(Some(db));
            }
            grads
        }),
        "conv2d",
    )
}

/// Max pooling with implicit `-inf` padding.
pub fn max_pool2d<T: Element>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    expect_rank("max_pool2d", input, 4)?;
    let s = input.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if padding * 2 > kernel {
        return Err(Error::Config(format!(
            "max_pool2d: padding {padding} exceeds half of kernel {kernel}"
        )));
    }
    let g = Geometry::new("max_pool2d", c, h, w, kernel, kernel, stride, padding)?;
    let plane_in = h * w;
    let plane_out = g.out_plane();
    let mut out = Vec::with_capacity(b * c * plane_out);
    let mut argmax = Vec::with_capacity(b * c * plane_out);
    {
        let x = input.data();
        for (pi, src) in x.chunks_exact(plane_in).enumerate() {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for ki in 0..kernel {
                        let Some(iy) = g.source(oy, ki, h) else { continue };
                        for kj in 0..kernel {
                            let Some(ix) = g.source(ox, kj, w) else { continue };
                            let v = src[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = iy * w + ix;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(pi * plane_in + best_idx);
                }
            }
        }
    }
    let n_in = input.numel();
    Tensor::from_op(
        out,
        &[b, c, g.ho, g.wo],
        vec![input.clone()],
        Box::new(move |grad| {
            let mut dx = vec![T::zero(); n_in];
            for (gv, &idx) in grad.iter().zip(&argmax) {
                dx[idx] += *gv;
            }
            vec![Some(dx)]
        }),
        "max_pool2d",
    )
}
