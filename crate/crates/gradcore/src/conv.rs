//! Geometry and patch (im2col) kernels for 2-D convolution over `[B, T, F, C]` arrays.

use crate::error::{GradError, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; the kernel must fit inside the input.
    Valid,
    /// Zero padding so that `out = ceil(in / stride)`; extra padding goes after.
    Same,
}

/// Output extent and leading pad for one axis.
pub fn axis_extent(
    op: &'static str,
    axis: &'static str,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(GradError::Invalid(format!("{op}: stride on `{axis}` must be >= 1")));
    }
    match padding {
        Padding::Valid => {
            if kernel > len {
                return Err(GradError::KernelTooLarge {
                    op,
                    axis,
                    kernel,
                    input: len,
                });
            }
            Ok(((len - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(len);
            Ok((out, total / 2))
        }
    }
}

/// Resolved geometry of a convolution `[B,T,F,Cin] * [kt,kf,Cin,Cout] -> [B,T',F',Cout]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_t: usize,
    pub in_f: usize,
    pub cin: usize,
    pub kt: usize,
    pub kf: usize,
    pub cout: usize,
    pub stride_t: usize,
    pub stride_f: usize,
    pub pad_t: usize,
    pub pad_f: usize,
    pub out_t: usize,
    pub out_f: usize,
}

impl ConvGeom {
    pub fn new(
        op: &'static str,
        input: &[usize],
        kernel: &[usize],
        stride_t: usize,
        stride_f: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [batch, in_t, in_f, cin] = *input else {
            return Err(GradError::Invalid(format!("{op}: input must be rank 4 [B,T,F,C]")));
        };
        let [kt, kf, kcin, cout] = *kernel else {
            return Err(GradError::Invalid(format!(
                "{op}: kernel must be rank 4 [kt,kf,Cin,Cout]"
            )));
        };
        if kcin != cin {
            return Err(GradError::Dim {
                op,
                axis: "channels_in",
                left: cin,
                right: kcin,
            });
        }
        let (out_t, pad_t) = axis_extent(op, "time", in_t, kt, stride_t, padding)?;
        let (out_f, pad_f) = axis_extent(op, "freq", in_f, kf, stride_f, padding)?;
        Ok(ConvGeom {
            batch,
            in_t,
            in_f,
            cin,
            kt,
            kf,
            cout,
            stride_t,
            stride_f,
            pad_t,
            pad_f,
            out_t,
            out_f,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kt * self.kf * self.cin
    }

    pub fn positions(&self) -> usize {
        self.batch * self.out_t * self.out_f
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [self.batch, self.in_t, self.in_f, self.cin]
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.batch, self.out_t, self.out_f, self.cout]
    }

    pub fn kernel_dims(&self) -> [usize; 4] {
        [self.kt, self.kf, self.cin, self.cout]
    }

    /// Visits every (patch row segment, input row segment) pair. For each output
    /// position and kernel row `i`, `f(dst_offset, src_offset, len)` is called
    /// for the in-bounds span, with offsets into the patch matrix and the input.
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize)) {
        let seg = self.kf * self.cin;
        let row_len = self.patch_len();
        for b in 0..self.batch {
            for ot in 0..self.out_t {
                for of in 0..self.out_f {
                    let row = ((b * self.out_t + ot) * self.out_f + of) * row_len;
                    for i in 0..self.kt {
                        let t = (ot * self.stride_t + i) as isize - self.pad_t as isize;
                        if t < 0 || t >= self.in_t as isize {
                            continue;
                        }
                        let f0 = (of * self.stride_f) as isize - self.pad_f as isize;
                        let jlo = (-f0).max(0) as usize;
                        let jhi = (self.in_f as isize - f0).min(self.kf as isize);
                        if jhi <= jlo as isize {
                            continue;
                        }
                        let jhi = jhi as usize;
                        let src = ((b * self.in_t + t as usize) * self.in_f
                            + (f0 + jlo as isize) as usize)
                            * self.cin;
                        let dst = row + i * seg + jlo * self.cin;
                        f(dst, src, (jhi - jlo) * self.cin);
                    }
                }
            }
        }
    }
}

/// Gathers input patches into a `[positions, kt*kf*Cin]` matrix (zero padded).
pub fn im2col<T: Real>(geom: &ConvGeom, input: &[T]) -> Vec<T> {
    let mut cols = vec![T::zero(); geom.positions() * geom.patch_len()];
    geom.for_each_span(|dst, src, len| {
        cols[dst..dst + len].copy_from_slice(&input[src..src + len]);
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back into an input-shaped buffer.
pub fn col2im<T: Real>(geom: &ConvGeom, cols: &[T], out: &mut [T]) {
    geom.for_each_span(|dst, src, len| {
        for (o, c) in out[src..src + len].iter_mut().zip(&cols[dst..dst + len]) {
            *o += *c;
        }
    });
}
