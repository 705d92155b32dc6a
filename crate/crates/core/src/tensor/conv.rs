//! 2-D convolution and resolution-changing operations on NCHW tensors.
//!
//! The two convolution gradients (`conv2d_backward_input`,
//! `conv2d_backward_kernel`) are ordinary first-class operations rather
//! than hidden backward kernels: the set {conv, input-grad, kernel-grad}
//! is closed under differentiation, which is what makes second-order
//! terms such as gradient penalties expressible on the tape.
//!
//! All accumulations run in a fixed sequential order, so results are
//! bit-for-bit reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tape::Op;
use crate::tensor::Tensor;

/// `out += a x b` for row-major `a [m,k]`, `b [k,n]`, `out [m,n]`.
pub(crate) fn matmul_raw<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
}

/// `out += a x b^T` for row-major `a [m,k]`, `b [n,k]`, `out [m,n]`.
pub(crate) fn matmul_bt_raw<E: Scalar>(
    a: &[E],
    b: &[E],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [E],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// Geometry of one convolution, validated once and reused by all three ops.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn resolve(
        op: &'static str,
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        if input_shape.len() != 4 || kernel_shape.len() != 4 {
            return Err(Error::shape(
                op,
                format!(
                    "expected NCHW input and OCKK kernel, got {:?} and {:?}",
                    input_shape, kernel_shape
                ),
            ));
        }
        let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
        let (o, kc, kh, kw) = (
            kernel_shape[0],
            kernel_shape[1],
            kernel_shape[2],
            kernel_shape[3],
        );
        if kc != c {
            return Err(Error::shape(
                op,
                format!("kernel expects {} input channels, input has {}", kc, c),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(op, "stride must be positive".to_string()));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0
        {
            return Err(Error::shape(
                op,
                format!(
                    "kernel {}x{} stride {} pad {} does not tile a {}x{} input exactly",
                    kh, kw, stride, pad, h, w
                ),
            ));
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
        })
    }

    fn patch_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn patches(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one sample into a `[C*KH*KW, OH*OW]` patch matrix. Out-of-bounds
/// (padding) entries are zero.
fn im2col<E: Scalar>(g: &ConvGeom, sample: &[E], col: &mut [E]) {
    debug_assert_eq!(sample.len(), g.c * g.h * g.w);
    debug_assert_eq!(col.len(), g.patch_rows() * g.patches());
    for v in col.iter_mut() {
        *v = E::zero();
    }
    let patches = g.patches();
    for c in 0..g.c {
        let plane = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * patches;
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let in_row = y as usize * g.w;
                    let out_row = row + oy * g.ow;
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x < 0 || x >= g.w as isize {
                            continue;
                        }
                        col[out_row + ox] = plane[in_row + x as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto one input sample; the
/// exact transpose of [`im2col`].
fn col2im_add<E: Scalar>(g: &ConvGeom, col: &[E], sample: &mut [E]) {
    debug_assert_eq!(sample.len(), g.c * g.h * g.w);
    debug_assert_eq!(col.len(), g.patch_rows() * g.patches());
    let patches = g.patches();
    for c in 0..g.c {
        let plane = &mut sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * patches;
                for oy in 0..g.oh {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let in_row = y as usize * g.w;
                    let out_row = row + oy * g.ow;
                    for ox in 0..g.ow {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x < 0 || x >= g.w as isize {
                            continue;
                        }
                        let idx = in_row + x as usize;
                        plane[idx] = plane[idx] + col[out_row + ox];
                    }
                }
            }
        }
    }
}

impl<E: Scalar> Tensor<E> {
    /// 2-D cross-correlation of an NCHW input with an `[O,C,KH,KW]` kernel.
    /// The kernel must tile the padded input exactly.
    pub fn conv2d(&self, kernel: &Tensor<E>, stride: usize, pad: usize) -> Result<Tensor<E>> {
        let g = ConvGeom::resolve("conv2d", self.shape(), kernel.shape(), stride, pad)?;
        let (rows, patches) = (g.patch_rows(), g.patches());
        let mut col = vec![E::zero(); rows * patches];
        let mut out = vec![E::zero(); g.n * g.o * patches];
        let in_span = g.c * g.h * g.w;
        let out_span = g.o * patches;
        for s in 0..g.n {
            im2col(&g, &self.data()[s * in_span..(s + 1) * in_span], &mut col);
            matmul_raw(
                kernel.data(),
                &col,
                g.o,
                rows,
                patches,
                &mut out[s * out_span..(s + 1) * out_span],
            );
        }
        let tape = Tensor::common_tape(&[self, kernel])?;
        Tensor::finish_op(
            "conv2d",
            tape,
            &[self, kernel],
            |ids| Op::Conv2d {
                input: ids[0],
                kernel: ids[1],
                stride,
                pad,
            },
            vec![g.n, g.o, g.oh, g.ow],
            out,
        )
    }

    /// Gradient of [`Tensor::conv2d`] with respect to its input: `self` is
    /// the output gradient `[N,O,OH,OW]`, the result has shape
    /// `[N,C,in_h,in_w]`.
    pub fn conv2d_backward_input(
        &self,
        kernel: &Tensor<E>,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Tensor<E>> {
        if self.shape().len() != 4 || kernel.shape().len() != 4 {
            return Err(Error::shape(
                "conv2d_backward_input",
                format!(
                    "expected NCHW gradient and OCKK kernel, got {:?} and {:?}",
                    self.shape(),
                    kernel.shape()
                ),
            ));
        }
        let n = self.shape()[0];
        let c = kernel.shape()[1];
        let g = ConvGeom::resolve(
            "conv2d_backward_input",
            &[n, c, in_h, in_w],
            kernel.shape(),
            stride,
            pad,
        )?;
        if self.shape() != [g.n, g.o, g.oh, g.ow] {
            return Err(Error::shape(
                "conv2d_backward_input",
                format!(
                    "output gradient {:?} does not match expected {:?}",
                    self.shape(),
                    [g.n, g.o, g.oh, g.ow]
                ),
            ));
        }
        let (rows, patches) = (g.patch_rows(), g.patches());
        // [C*KH*KW, O] transpose of the kernel matrix, built once.
        let mut kt = vec![E::zero(); rows * g.o];
        for o in 0..g.o {
            for r in 0..rows {
                kt[r * g.o + o] = kernel.data()[o * rows + r];
            }
        }
        let mut col = vec![E::zero(); rows * patches];
        let mut out = vec![E::zero(); g.n * g.c * g.h * g.w];
        let in_span = g.c * g.h * g.w;
        let out_span = g.o * patches;
        for s in 0..g.n {
            for v in col.iter_mut() {
                *v = E::zero();
            }
            matmul_raw(
                &kt,
                &self.data()[s * out_span..(s + 1) * out_span],
                rows,
                g.o,
                patches,
                &mut col,
            );
            col2im_add(&g, &col, &mut out[s * in_span..(s + 1) * in_span]);
        }
        let tape = Tensor::common_tape(&[self, kernel])?;
        Tensor::finish_op(
            "conv2d_backward_input",
            tape,
            &[self, kernel],
            |ids| Op::ConvInputGrad {
                grad_out: ids[0],
                kernel: ids[1],
                stride,
                pad,
            },
            vec![g.n, g.c, g.h, g.w],
            out,
        )
    }

    /// Gradient of [`Tensor::conv2d`] with respect to its kernel: `self` is
    /// the forward input `[N,C,H,W]`, `grad_out` is `[N,O,OH,OW]`, the
    /// result has shape `[O,C,k_h,k_w]`.
    pub fn conv2d_backward_kernel(
        &self,
        grad_out: &Tensor<E>,
        stride: usize,
        pad: usize,
        k_h: usize,
        k_w: usize,
    ) -> Result<Tensor<E>> {
        if self.shape().len() != 4 || grad_out.shape().len() != 4 {
            return Err(Error::shape(
                "conv2d_backward_kernel",
                format!(
                    "expected NCHW input and NCHW gradient, got {:?} and {:?}",
                    self.shape(),
                    grad_out.shape()
                ),
            ));
        }
        let o = grad_out.shape()[1];
        let c = self.shape()[1];
        let g = ConvGeom::resolve(
            "conv2d_backward_kernel",
            self.shape(),
            &[o, c, k_h, k_w],
            stride,
            pad,
        )?;
        if grad_out.shape() != [g.n, g.o, g.oh, g.ow] {
            return Err(Error::shape(
                "conv2d_backward_kernel",
                format!(
                    "output gradient {:?} does not match expected {:?}",
                    grad_out.shape(),
                    [g.n, g.o, g.oh, g.ow]
                ),
            ));
        }
        let (rows, patches) = (g.patch_rows(), g.patches());
        let mut col = vec![E::zero(); rows * patches];
        let mut out = vec![E::zero(); g.o * rows];
        let in_span = g.c * g.h * g.w;
        let out_span = g.o * patches;
        for s in 0..g.n {
            im2col(&g, &self.data()[s * in_span..(s + 1) * in_span], &mut col);
            matmul_bt_raw(
                &grad_out.data()[s * out_span..(s + 1) * out_span],
                &col,
                g.o,
                patches,
                rows,
                &mut out,
            );
        }
        let tape = Tensor::common_tape(&[self, grad_out])?;
        Tensor::finish_op(
            "conv2d_backward_kernel",
            tape,
            &[self, grad_out],
            |ids| Op::ConvKernelGrad {
                input: ids[0],
                grad_out: ids[1],
                stride,
                pad,
            },
            vec![g.o, g.c, g.kh, g.kw],
            out,
        )
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape(
                "upsample2x",
                format!("expected NCHW, got {:?}", s),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![E::zero(); n * c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for plane in 0..n * c {
            let src = &self.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..h {
                for x in 0..w {
                    let v = src[y * w + x];
                    let base = 2 * y * ow + 2 * x;
                    dst[base] = v;
                    dst[base + 1] = v;
                    dst[base + ow] = v;
                    dst[base + ow + 1] = v;
                }
            }
        }
        Tensor::finish_op(
            "upsample2x",
            self.tape(),
            &[self],
            |ids| Op::Upsample2x(ids[0]),
            vec![n, c, oh, ow],
            out,
        )
    }

    /// 2x2 average pooling of an NCHW tensor with even spatial extents.
    pub fn avgpool2x(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(
                "avgpool2x",
                format!("expected NCHW with even spatial extents, got {:?}", s),
            ));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = E::lit(0.25);
        let mut out = vec![E::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &self.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let base = 2 * y * w + 2 * x;
                    dst[y * ow + x] =
                        (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
                }
            }
        }
        Tensor::finish_op(
            "avgpool2x",
            self.tape(),
            &[self],
            |ids| Op::Avgpool2x(ids[0]),
            vec![n, c, oh, ow],
            out,
        )
    }
}
