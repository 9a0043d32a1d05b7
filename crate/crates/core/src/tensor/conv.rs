//! Dilated 2D cross-correlation kernels over `B×C×H×W` buffers.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{dim_err, TensorError};

/// Geometry of a dilated convolution. The same dilation applies on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub dilation: usize,
    /// (height, width)
    pub stride: (usize, usize),
    /// Zero padding added on each side, (height, width).
    pub padding: (usize, usize),
}

impl Conv2dParams {
    pub fn unit() -> Self {
        Self {
            dilation: 1,
            stride: (1, 1),
            padding: (0, 0),
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.dilation == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(TensorError::Parameter(
                "dilation and strides must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Output extent along one axis: `floor((input + 2·pad − effective)/stride) + 1`
/// where `effective = (kernel − 1)·dilation + 1`.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    dilation: usize,
    stride: usize,
    pad: usize,
) -> Result<usize, TensorError> {
    if kernel == 0 || dilation == 0 || stride == 0 {
        return Err(TensorError::Parameter(
            "kernel, dilation and stride must be positive".into(),
        ));
    }
    let effective = (kernel - 1) * dilation + 1;
    let padded = input + 2 * pad;
    if effective > padded {
        return Err(dim_err(alloc::format!(
            "effective kernel extent {effective} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - effective) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvShape {
    pub fn infer(
        x_shape: &[usize],
        k_shape: &[usize],
        p: &Conv2dParams,
    ) -> Result<Self, TensorError> {
        p.validate()?;
        let (batch, c_in, height, width) = match *x_shape {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(dim_err("convolution input must be C×H×W or B×C×H×W")),
        };
        let [c_out, kc, kh, kw] = *k_shape else {
            return Err(dim_err("kernels must be C_out×C_in×kh×kw"));
        };
        if kc != c_in {
            return Err(dim_err(alloc::format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        let out_h = conv_output_extent(height, kh, p.dilation, p.stride.0, p.padding.0)?;
        let out_w = conv_output_extent(width, kw, p.dilation, p.stride.1, p.padding.1)?;
        Ok(Self {
            batch,
            c_in,
            height,
            width,
            c_out,
            kh,
            kw,
            out_h,
            out_w,
        })
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.out_h * self.out_w
    }
}

/// Range of output indices `o` for which `o·stride + offset` lands in `[0, extent)`.
#[inline]
fn valid_range(out: usize, stride: usize, offset: isize, extent: usize) -> (usize, usize) {
    let extent = extent as isize;
    let stride_i = stride as isize;
    // o·s + offset ≥ 0
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + stride_i - 1) / stride_i) as usize
    };
    // o·s + offset ≤ extent − 1
    let hi_num = extent - 1 - offset;
    let hi = if hi_num < 0 {
        0
    } else {
        ((hi_num / stride_i) as usize + 1).min(out)
    };
    (lo.min(hi), hi)
}

pub(crate) fn forward(x: &[f64], k: &[f64], s: &ConvShape, p: &Conv2dParams) -> Vec<f64> {
    let mut out = vec![0.0; s.out_len()];
    let plane_in = s.height * s.width;
    let plane_out = s.out_h * s.out_w;
    let (sh, sw) = p.stride;
    for b in 0..s.batch {
        for co in 0..s.c_out {
            let o_base = (b * s.c_out + co) * plane_out;
            for ci in 0..s.c_in {
                let x_base = (b * s.c_in + ci) * plane_in;
                for ky in 0..s.kh {
                    let off_y = (ky * p.dilation) as isize - p.padding.0 as isize;
                    let (y_lo, y_hi) = valid_range(s.out_h, sh, off_y, s.height);
                    for kx in 0..s.kw {
                        let w = k[((co * s.c_in + ci) * s.kh + ky) * s.kw + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let off_x = (kx * p.dilation) as isize - p.padding.1 as isize;
                        let (x_lo, x_hi) = valid_range(s.out_w, sw, off_x, s.width);
                        for oy in y_lo..y_hi {
                            let iy = (oy * sh) as isize + off_y;
                            let x_row = x_base + iy as usize * s.width;
                            let o_row = o_base + oy * s.out_w;
                            for ox in x_lo..x_hi {
                                let ix = ((ox * sw) as isize + off_x) as usize;
                                out[o_row + ox] += w * x[x_row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(d_input, d_kernels)`; either may be skipped.
pub(crate) fn backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    s: &ConvShape,
    p: &Conv2dParams,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0; k.len()]);
    let plane_in = s.height * s.width;
    let plane_out = s.out_h * s.out_w;
    let (sh, sw) = p.stride;
    for b in 0..s.batch {
        for co in 0..s.c_out {
            let o_base = (b * s.c_out + co) * plane_out;
            for ci in 0..s.c_in {
                let x_base = (b * s.c_in + ci) * plane_in;
                for ky in 0..s.kh {
                    let off_y = (ky * p.dilation) as isize - p.padding.0 as isize;
                    let (y_lo, y_hi) = valid_range(s.out_h, sh, off_y, s.height);
                    for kx in 0..s.kw {
                        let k_idx = ((co * s.c_in + ci) * s.kh + ky) * s.kw + kx;
                        let w = k[k_idx];
                        let off_x = (kx * p.dilation) as isize - p.padding.1 as isize;
                        let (x_lo, x_hi) = valid_range(s.out_w, sw, off_x, s.width);
                        let mut acc = 0.0;
                        for oy in y_lo..y_hi {
                            let iy = (oy * sh) as isize + off_y;
                            let x_row = x_base + iy as usize * s.width;
                            let o_row = o_base + oy * s.out_w;
                            for ox in x_lo..x_hi {
                                let ix = ((ox * sw) as isize + off_x) as usize;
                                let g = dy[o_row + ox];
                                acc += g * x[x_row + ix];
                                if let Some(dx) = dx.as_mut() {
                                    dx[x_row + ix] += g * w;
                                }
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[k_idx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}
