//! 3-D convolution over `[channels, T, H, W]` tensors via im2col + GEMM.

use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(t, h, w)` kernel extent.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn out_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return Err(shape(format!(
                    "axis {a}: extent {} (padded {padded}) smaller than kernel {}",
                    input[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// `[patch_len, To*Ho*Wo]` patch matrix.
    pub fn im2col(&self, input: ArrayView4<'_, f64>) -> Result<Array2<f64>> {
        let (c, t, h, w) = input.dim();
        if c != self.in_channels {
            return Err(shape(format!("conv expects {} input channels, got {c}", self.in_channels)));
        }
        let [to, ho, wo] = self.out_extent([t, h, w])?;
        let n = to * ho * wo;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let input = input.as_standard_layout();
        let src = input.as_slice().expect("standard layout");
        let mut cols = Array2::<f64>::zeros((self.patch_len(), n));
        let dst = cols.as_slice_mut().expect("fresh array");
        let mut row = 0;
        for ci in 0..c {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let out_row = &mut dst[row * n..(row + 1) * n];
                        for ot in 0..to {
                            let it = (ot * st + dt) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let base = ((ci * t + it as usize) * h + ih as usize) * w;
                                let obase = (ot * ho + oh) * wo;
                                for ow in 0..wo {
                                    let iw = (ow * sw + dw) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        out_row[obase + ow] = src[base + iw as usize];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        Ok(cols)
    }

    /// Scatter-adds a patch matrix back into an input-shaped tensor.
    pub fn col2im(&self, cols: &Array2<f64>, input_extent: [usize; 3]) -> Result<Array4<f64>> {
        let [t, h, w] = input_extent;
        let [to, ho, wo] = self.out_extent(input_extent)?;
        let n = to * ho * wo;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let mut out = Array4::<f64>::zeros((self.in_channels, t, h, w));
        let dst = out.as_slice_mut().expect("fresh array");
        let cols = cols.as_standard_layout();
        let src = cols.as_slice().expect("standard layout");
        let mut row = 0;
        for ci in 0..self.in_channels {
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let in_row = &src[row * n..(row + 1) * n];
                        for ot in 0..to {
                            let it = (ot * st + dt) as isize - pt as isize;
                            if it < 0 || it >= t as isize {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * sh + dh) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let base = ((ci * t + it as usize) * h + ih as usize) * w;
                                let obase = (ot * ho + oh) * wo;
                                for ow in 0..wo {
                                    let iw = (ow * sw + dw) as isize - pw as isize;
                                    if iw >= 0 && iw < w as isize {
                                        dst[base + iw as usize] += in_row[obase + ow];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Returns the output and the patch matrix needed by [`backward`](Self::backward).
    pub fn forward(
        &self,
        weight: &Array2<f64>,
        bias: &Array1<f64>,
        input: ArrayView4<'_, f64>,
    ) -> Result<(Array4<f64>, Array2<f64>)> {
        let (_, t, h, w) = input.dim();
        let [to, ho, wo] = self.out_extent([t, h, w])?;
        let cols = self.im2col(input)?;
        let mut out = weight.dot(&cols);
        for (mut row, b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row += *b;
        }
        let out = out
            .into_shape_with_order((self.out_channels, to, ho, wo))
            .map_err(|e| shape(e.to_string()))?;
        Ok((out, cols))
    }

    /// Gradients w.r.t. weight, bias and (optionally) the input.
    pub fn backward(
        &self,
        weight: &Array2<f64>,
        cols: &Array2<f64>,
        dout: &Array4<f64>,
        input_extent: [usize; 3],
        want_input_grad: bool,
    ) -> Result<ConvGrads> {
        let n = dout.len() / self.out_channels;
        let dout2 = dout
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, n))
            .map_err(|e| shape(e.to_string()))?;
        let d_weight = dout2.dot(&cols.t());
        let d_bias = dout2.sum_axis(Axis(1));
        let d_input = if want_input_grad {
            let dcols = weight.t().dot(&dout2);
            Some(self.col2im(&dcols, input_extent)?)
        } else {
            None
        };
        Ok(ConvGrads { d_weight, d_bias, d_input })
    }
}

pub struct ConvGrads {
    pub d_weight: Array2<f64>,
    pub d_bias: Array1<f64>,
    pub d_input: Option<Array4<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn naive(geom: &ConvGeom, w: &Array2<f64>, b: &Array1<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (_, t, h, wd) = x.dim();
        let [to, ho, wo] = geom.out_extent([t, h, wd]).unwrap();
        let [kt, kh, kw] = geom.kernel;
        Array4::from_shape_fn((geom.out_channels, to, ho, wo), |(co, ot, oh, ow)| {
            let mut s = b[co];
            for ci in 0..geom.in_channels {
                for dt in 0..kt {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let it = (ot * geom.stride[0] + dt) as isize - geom.pad[0] as isize;
                            let ih = (oh * geom.stride[1] + dh) as isize - geom.pad[1] as isize;
                            let iw = (ow * geom.stride[2] + dw) as isize - geom.pad[2] as isize;
                            if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                                continue;
                            }
                            let k = ((ci * kt + dt) * kh + dh) * kw + dw;
                            s += w[[co, k]] * x[[ci, it as usize, ih as usize, iw as usize]];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn matches_direct_convolution() {
        let mut r = rng::seeded(3);
        for geom in [
            ConvGeom { in_channels: 3, out_channels: 4, kernel: [1, 3, 3], stride: [1, 2, 2], pad: [0, 1, 1] },
            ConvGeom { in_channels: 2, out_channels: 3, kernel: [3, 1, 1], stride: [2, 1, 1], pad: [1, 0, 0] },
            ConvGeom { in_channels: 2, out_channels: 2, kernel: [1, 4, 4], stride: [1, 4, 4], pad: [0, 0, 0] },
        ] {
            let x = Array4::from_shape_simple_fn((geom.in_channels, 4, 8, 8), || r.random_range(-1.0..1.0));
            let w = Array2::from_shape_simple_fn((geom.out_channels, geom.patch_len()), || r.random_range(-1.0..1.0));
            let b = Array1::from_shape_simple_fn(geom.out_channels, || r.random_range(-1.0..1.0));
            let (out, _) = geom.forward(&w, &b, x.view()).unwrap();
            let expected = naive(&geom, &w, &b, &x);
            for (a, e) in out.iter().zip(expected.iter()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut r = rng::seeded(5);
        let geom = ConvGeom { in_channels: 2, out_channels: 1, kernel: [3, 3, 3], stride: [2, 1, 2], pad: [1, 1, 1] };
        let x = Array4::from_shape_simple_fn((2, 5, 6, 7), || r.random_range(-1.0..1.0));
        let cols = geom.im2col(x.view()).unwrap();
        let y = Array2::from_shape_simple_fn(cols.raw_dim(), || r.random_range(-1.0..1.0));
        let lhs: f64 = (&cols * &y).sum();
        let back = geom.col2im(&y, [5, 6, 7]).unwrap();
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
