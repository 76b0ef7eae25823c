//! Convolution and matrix-product loops shared by the f32 and int8 paths.
//!
//! Reductions always run in ascending index order so that results are
//! bit-reproducible for a given input regardless of batching.

use crate::error::{Error, Result};

/// Accumulator arithmetic. `i32` saturates instead of wrapping.
pub(crate) trait Acc: Copy + Default {
    fn mac(self, a: Self, b: Self) -> Self;
}

impl Acc for f32 {
    #[inline]
    fn mac(self, a: f32, b: f32) -> f32 {
        self + a * b
    }
}

impl Acc for i32 {
    #[inline]
    fn mac(self, a: i32, b: i32) -> i32 {
        self.saturating_add(a.saturating_mul(b))
    }
}

/// 2-D convolution geometry for NCHW inputs and MCkk weights.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: [usize; 2],
    pub dilation: [usize; 2],
    /// top, left, bottom, right
    pub pads: [usize; 4],
    pub group: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        out_extent(self.in_h, self.pads[0] + self.pads[2], self.kernel_h, self.stride[0], self.dilation[0])
    }

    pub fn out_w(&self) -> usize {
        out_extent(self.in_w, self.pads[1] + self.pads[3], self.kernel_w, self.stride[1], self.dilation[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.group == 0
            || !self.in_channels.is_multiple_of(self.group)
            || !self.out_channels.is_multiple_of(self.group)
        {
            return Err(Error::Argument(format!(
                "group {} does not divide channels {}/{}",
                self.group, self.in_channels, self.out_channels
            )));
        }
        if self.stride.contains(&0) || self.dilation.contains(&0) {
            return Err(Error::Argument("strides and dilations must be positive".into()));
        }
        let span_h = self.dilation[0] * (self.kernel_h.max(1) - 1) + 1;
        let span_w = self.dilation[1] * (self.kernel_w.max(1) - 1) + 1;
        if self.kernel_h == 0
            || self.kernel_w == 0
            || span_h > self.in_h + self.pads[0] + self.pads[2]
            || span_w > self.in_w + self.pads[1] + self.pads[3]
        {
            return Err(Error::Argument("kernel larger than padded input".into()));
        }
        Ok(())
    }
}

fn out_extent(input: usize, pad: usize, kernel: usize, stride: usize, dilation: usize) -> usize {
    (input + pad - dilation * (kernel - 1) - 1) / stride + 1
}

/// `bias` (one value per output channel) seeds each accumulator.
pub(crate) fn conv2d<T: Acc>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cg = g.in_channels / g.group;
    let mg = g.out_channels / g.group;
    let mut out = Vec::with_capacity(g.batch * g.out_channels * oh * ow);
    for n in 0..g.batch {
        for m in 0..g.out_channels {
            let c0 = (m / mg) * cg;
            let seed = bias.map_or_else(T::default, |b| b[m]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = seed;
                    for c in 0..cg {
                        let x_plane = ((n * g.in_channels) + c0 + c) * g.in_h * g.in_w;
                        let w_plane = ((m * cg) + c) * g.kernel_h * g.kernel_w;
                        for ky in 0..g.kernel_h {
                            let iy = (oy * g.stride[0] + ky * g.dilation[0]) as isize - g.pads[0] as isize;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            for kx in 0..g.kernel_w {
                                let ix = (ox * g.stride[1] + kx * g.dilation[1]) as isize
                                    - g.pads[1] as isize;
                                if ix < 0 || ix >= g.in_w as isize {
                                    continue;
                                }
                                let xv = x[x_plane + iy as usize * g.in_w + ix as usize];
                                let wv = w[w_plane + ky * g.kernel_w + kx];
                                acc = acc.mac(xv, wv);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// `rows x inner` times `inner x cols`, optionally transposed operands, with
/// `bias` (length `cols`) seeding each accumulator.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Acc>(
    a: &[T],
    b: &[T],
    rows: usize,
    inner: usize,
    cols: usize,
    trans_a: bool,
    trans_b: bool,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = bias.map_or_else(T::default, |bv| bv[j]);
            for k in 0..inner {
                let av = if trans_a { a[k * rows + i] } else { a[i * inner + k] };
                let bv = if trans_b { b[j * inner + k] } else { b[k * cols + j] };
                acc = acc.mac(av, bv);
            }
            out.push(acc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn i32_accumulation_saturates() {
        let acc = i32::MAX - 1;
        assert_eq!(acc.mac(10, 10), i32::MAX);
        assert_eq!(i32::MIN.mac(-1, 1), i32::MIN);
    }

    #[test]
    fn grouped_conv_uses_its_own_channels() {
        // two channels, depthwise 1x1 kernels with distinct values
        let g = ConvGeometry {
            batch: 1,
            in_channels: 2,
            in_h: 1,
            in_w: 2,
            out_channels: 2,
            kernel_h: 1,
            kernel_w: 1,
            stride: [1, 1],
            dilation: [1, 1],
            pads: [0; 4],
            group: 2,
        };
        g.validate().unwrap();
        let x = [1.0f32, 2.0, 10.0, 20.0];
        let w = [2.0f32, 3.0];
        assert_eq!(conv2d(&x, &w, None, &g), vec![2.0, 4.0, 30.0, 60.0]);
    }

    #[test]
    fn dilated_and_padded_geometry() {
        let g = ConvGeometry {
            batch: 1,
            in_channels: 1,
            in_h: 5,
            in_w: 5,
            out_channels: 1,
            kernel_h: 3,
            kernel_w: 3,
            stride: [2, 2],
            dilation: [2, 2],
            pads: [1, 1, 1, 1],
            group: 1,
        };
        assert_eq!((g.out_h(), g.out_w()), (2, 2));
    }

    #[test]
    fn matmul_transposes_agree() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let at = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0]; // 3x2
        let b = [1.0f32, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let bt = [1.0f32, 0.0, 1.0, 0.0, 1.0, 1.0]; // 2x3
        let plain = matmul(&a, &b, 2, 3, 2, false, false, None);
        assert_eq!(plain, vec![4.0, 5.0, 10.0, 11.0]);
        assert_eq!(matmul(&at, &bt, 2, 3, 2, true, true, None), plain);
        assert_eq!(
            matmul(&a, &b, 2, 3, 2, false, false, Some(&[1.0, -1.0])),
            vec![5.0, 4.0, 11.0, 10.0]
        );
    }
}
