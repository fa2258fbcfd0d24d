//! Cross-correlation kernels on `[H, W, C]` feature maps with zero padding.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

use super::{Op, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub padding: usize,
}

/// `floor((n + 2p − k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    (padded >= k && stride >= 1).then(|| (padded - k) / stride + 1)
}

impl Conv2dSpec {
    fn build(
        (in_h, in_w, in_c): (usize, usize, usize),
        (k_h, k_w): (usize, usize),
        out_c: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if k_h % 2 == 0 || k_w % 2 == 0 {
            return dim_err(format!("kernel extents must be odd, got {k_h}x{k_w}"));
        }
        if stride == 0 {
            return dim_err("stride must be at least 1");
        }
        let (Some(out_h), Some(out_w)) = (
            conv_out_extent(in_h, k_h, stride, padding),
            conv_out_extent(in_w, k_w, stride, padding),
        ) else {
            return dim_err(format!(
                "kernel {k_h}x{k_w} larger than padded input {in_h}x{in_w} (padding {padding})"
            ));
        };
        Ok(Self {
            in_h,
            in_w,
            in_c,
            out_h,
            out_w,
            out_c,
            k_h,
            k_w,
            stride,
            padding,
        })
    }

    /// Input pixel feeding output `(i, j)` through kernel tap `(k, l)`.
    #[inline]
    fn source(&self, i: usize, j: usize, k: usize, l: usize) -> Option<(usize, usize)> {
        let y = (i * self.stride + k).checked_sub(self.padding)?;
        let x = (j * self.stride + l).checked_sub(self.padding)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }
}

impl Tape {
    /// Dense convolution. `input` is `[H,W,C_in]`, `weight` is `[K,L,C_in,C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let in_dims = self.value(input).dims3()?;
        let (k_h, k_w, w_in, out_c) = self.value(weight).dims4()?;
        if w_in != in_dims.2 {
            return dim_err(format!(
                "conv2d: input has {} channels, weight expects {w_in}",
                in_dims.2
            ));
        }
        let spec = Conv2dSpec::build(in_dims, (k_h, k_w), out_c, stride, padding)?;
        let out = conv2d_forward(&spec, self.value(input), self.value(weight));
        Ok(self.push(
            out,
            Op::Conv2d {
                x: input,
                w: weight,
                spec,
            },
            &[input, weight],
        ))
    }

    /// Per-channel spatial filtering. `weight` is `[K,L,C]`.
    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let in_dims = self.value(input).dims3()?;
        let (k_h, k_w, c) = self.value(weight).dims3()?;
        if c != in_dims.2 {
            return dim_err(format!(
                "depthwise_conv2d: input has {} channels, weight has {c}",
                in_dims.2
            ));
        }
        let spec = Conv2dSpec::build(in_dims, (k_h, k_w), c, stride, padding)?;
        let out = depthwise_forward(&spec, self.value(input), self.value(weight));
        Ok(self.push(
            out,
            Op::Depthwise {
                x: input,
                w: weight,
                spec,
            },
            &[input, weight],
        ))
    }

    /// 1×1 convolution: a per-pixel `[C_in, C_out]` linear map.
    pub fn pointwise_conv2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (h, w, c) = self.value(input).dims3()?;
        let (w_in, out_c) = self.value(weight).dims2()?;
        if w_in != c {
            return dim_err(format!(
                "pointwise_conv2d: input has {c} channels, weight expects {w_in}"
            ));
        }
        let flat = self.reshape(input, &[h * w, c])?;
        let y = self.matmul(flat, weight)?;
        self.reshape(y, &[h, w, out_c])
    }

    /// Depthwise then pointwise.
    pub fn dsconv(
        &mut self,
        input: Var,
        depthwise: Var,
        pointwise: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let d = self.depthwise_conv2d(input, depthwise, stride, padding)?;
        self.pointwise_conv2d(d, pointwise)
    }
}

fn conv2d_forward(spec: &Conv2dSpec, x: &Tensor, w: &Tensor) -> Tensor {
    let (xd, wd) = (x.data(), w.data());
    let (cin, cout) = (spec.in_c, spec.out_c);
    let mut out = vec![0.0; spec.out_h * spec.out_w * cout];
    for i in 0..spec.out_h {
        for j in 0..spec.out_w {
            let orow = &mut out[(i * spec.out_w + j) * cout..][..cout];
            for k in 0..spec.k_h {
                for l in 0..spec.k_w {
                    let Some((y, xx)) = spec.source(i, j, k, l) else {
                        continue;
                    };
                    let xpix = &xd[(y * spec.in_w + xx) * cin..][..cin];
                    let wtap = &wd[(k * spec.k_w + l) * cin * cout..][..cin * cout];
                    for (c, &xv) in xpix.iter().enumerate() {
                        let wrow = &wtap[c * cout..][..cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[spec.out_h, spec.out_w, cout], out).expect("conv2d output shape")
}

pub(super) fn conv2d_grad_input(spec: &Conv2dSpec, w: &Tensor, g: &[f64], dx: &mut [f64]) {
    let wd = w.data();
    let (cin, cout) = (spec.in_c, spec.out_c);
    for i in 0..spec.out_h {
        for j in 0..spec.out_w {
            let grow = &g[(i * spec.out_w + j) * cout..][..cout];
            for k in 0..spec.k_h {
                for l in 0..spec.k_w {
                    let Some((y, xx)) = spec.source(i, j, k, l) else {
                        continue;
                    };
                    let dpix = &mut dx[(y * spec.in_w + xx) * cin..][..cin];
                    let wtap = &wd[(k * spec.k_w + l) * cin * cout..][..cin * cout];
                    for (c, d) in dpix.iter_mut().enumerate() {
                        *d += super::dot(&wtap[c * cout..][..cout], grow);
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_grad_weight(spec: &Conv2dSpec, x: &Tensor, g: &[f64], dw: &mut [f64]) {
    let xd = x.data();
    let (cin, cout) = (spec.in_c, spec.out_c);
    for i in 0..spec.out_h {
        for j in 0..spec.out_w {
            let grow = &g[(i * spec.out_w + j) * cout..][..cout];
            for k in 0..spec.k_h {
                for l in 0..spec.k_w {
                    let Some((y, xx)) = spec.source(i, j, k, l) else {
                        continue;
                    };
                    let xpix = &xd[(y * spec.in_w + xx) * cin..][..cin];
                    let dtap = &mut dw[(k * spec.k_w + l) * cin * cout..][..cin * cout];
                    for (c, &xv) in xpix.iter().enumerate() {
                        let drow = &mut dtap[c * cout..][..cout];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_forward(spec: &Conv2dSpec, x: &Tensor, w: &Tensor) -> Tensor {
    let (xd, wd) = (x.data(), w.data());
    let c = spec.in_c;
    let mut out = vec![0.0; spec.out_h * spec.out_w * c];
    for i in 0..spec.out_h {
        for j in 0..spec.out_w {
            let orow = &mut out[(i * spec.out_w + j) * c..][..c];
            for k in 0..spec.k_h {
                for l in 0..spec.k_w {
                    let Some((y, xx)) = spec.source(i, j, k, l) else {
                        continue;
                    };
                    let xpix = &xd[(y * spec.in_w + xx) * c..][..c];
                    let wtap = &wd[(k * spec.k_w + l) * c..][..c];
                    for ((o, &xv), &wv) in orow.iter_mut().zip(xpix).zip(wtap) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    Tensor::new(&[spec.out_h, spec.out_w, c], out).expect("depthwise output shape")
}

pub(super) fn depthwise_grad_input(spec: &Conv2dSpec, w: &Tensor, g: &[f64], dx: &mut [f64]) {
    let wd = w.data();
    let c = spec.in_c;
    for i in 0..spec.out_h {
        for j in 0..spec.out_w {
            let grow = &g[(i * spec.out_w + j) * c..][..c];
            for k in 0..spec.k_h {
                for l in 0..spec.k_w {
                    let Some((y, xx)) = spec.source(i, j, k, l) else {
                        continue;
                    };
                    let dpix = &mut dx[(y * spec.in_w + xx) * c..][..c];
                    let wtap = &wd[(k * spec.k_w + l) * c..][..c];
                    for ((d, &gv), &wv) in dpix.iter_mut().zip(grow).zip(wtap) {
                        *d += gv * wv;
                    }
                }
            }
        }
    }
}

pub(super) fn depthwise_grad_weight(spec: &Conv2dSpec, x: &Tensor, g: &[f64], dw: &mut [f64]) {
    let xd = x.data();
    let c = spec.in_c;
    for i in 0..spec.out_h {
        for j in 0..spec.out_w {
            let grow = &g[(i * spec.out_w + j) * c..][..c];
            for k in 0..spec.k_h {
                for l in 0..spec.k_w {
                    let Some((y, xx)) = spec.source(i, j, k, l) else {
                        continue;
                    };
                    let xpix = &xd[(y * spec.in_w + xx) * c..][..c];
                    let dtap = &mut dw[(k * spec.k_w + l) * c..][..c];
                    for ((d, &gv), &xv) in dtap.iter_mut().zip(grow).zip(xpix) {
                        *d += gv * xv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the convolution sum, written independently of
    /// the kernel above (signed indices, explicit bounds check).
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (h, wd, cin) = x.dims3().unwrap();
        let (kh, kw, _, cout) = w.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[oh, ow, cout]);
        for i in 0..oh {
            for j in 0..ow {
                for o in 0..cout {
                    let mut acc = 0.0;
                    for k in 0..kh {
                        for l in 0..kw {
                            for c in 0..cin {
                                let y = (i * stride + k) as isize - pad as isize;
                                let xx = (j * stride + l) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((y as usize) * wd + xx as usize) * cin + c];
                                let wv = w.data()[((k * kw + l) * cin + c) * cout + o];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[(i * ow + j) * cout + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_ones() {
        let mut t = Tape::default();
        let x = t.constant(Tensor::ones(&[3, 3, 1]));
        let w = t.constant(Tensor::ones(&[3, 3, 1, 1]));
        let y = t.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1]);
        assert_eq!(t.value(y).item(), 9.0);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::default();
        let xv = Tensor::uniform(&[4, 5, 1], -1.0, 1.0, &mut rng);
        let x = t.constant(xv.clone());
        let w = t.constant(Tensor::ones(&[1, 1, 1, 1]));
        let y = t.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(t.value(y), &xv);
    }

    #[test]
    fn matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let xv = Tensor::uniform(&[5, 5, 2], -1.0, 1.0, &mut rng);
            let wv = Tensor::uniform(&[3, 3, 2, 4], -1.0, 1.0, &mut rng);
            let mut t = Tape::default();
            let x = t.constant(xv.clone());
            let w = t.constant(wv.clone());
            let y = t.conv2d(x, w, stride, pad).unwrap();
            let expect = naive_conv(&xv, &wv, stride, pad);
            assert_eq!(t.value(y).shape(), expect.shape());
            for (a, b) in t.value(y).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_out_extent(5, 3, 1, 0), Some(3));
        assert_eq!(conv_out_extent(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_extent(7, 3, 2, 1), Some(4));
        assert_eq!(conv_out_extent(1, 3, 1, 0), None);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut t = Tape::default();
        let x = t.constant(Tensor::ones(&[3, 3, 2]));
        let w = t.constant(Tensor::ones(&[3, 3, 3, 1]));
        assert!(matches!(
            t.conv2d(x, w, 1, 0),
            Err(crate::Error::Dimension(_))
        ));
        let wd = t.constant(Tensor::ones(&[3, 3, 3]));
        assert!(matches!(
            t.depthwise_conv2d(x, wd, 1, 0),
            Err(crate::Error::Dimension(_))
        ));
        let wp = t.constant(Tensor::ones(&[3, 1]));
        assert!(matches!(
            t.pointwise_conv2d(x, wp),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut t = Tape::default();
        let x = t.constant(Tensor::ones(&[4, 4, 1]));
        let w = t.constant(Tensor::ones(&[2, 2, 1, 1]));
        assert!(t.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn depthwise_ones() {
        let mut t = Tape::default();
        let x = t.constant(Tensor::ones(&[3, 3, 2]));
        let w = t.constant(Tensor::ones(&[3, 3, 2]));
        let y = t.depthwise_conv2d(x, w, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &[9.0, 9.0]);
        let z = t.constant(Tensor::zeros(&[3, 3, 2]));
        let y0 = t.depthwise_conv2d(x, z, 1, 1).unwrap();
        assert!(t.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_equals_channel_masked_dense_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = 3;
        let xv = Tensor::uniform(&[6, 5, c], -1.0, 1.0, &mut rng);
        let wv = Tensor::uniform(&[3, 3, c], -1.0, 1.0, &mut rng);
        let mut dense = Tensor::zeros(&[3, 3, c, c]);
        for tap in 0..9 {
            for ch in 0..c {
                dense.data_mut()[(tap * c + ch) * c + ch] = wv.data()[tap * c + ch];
            }
        }
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
            let mut t = Tape::default();
            let x = t.constant(xv.clone());
            let w = t.constant(wv.clone());
            let y = t.depthwise_conv2d(x, w, stride, pad).unwrap();
            let expect = naive_conv(&xv, &dense, stride, pad);
            for (a, b) in t.value(y).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_identity_and_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
        let mut t = Tape::default();
        let x = t.constant(xv.clone());
        let eye = t.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = t.pointwise_conv2d(x, eye).unwrap();
        assert_eq!(t.value(y), &xv);

        let nine = t.constant(Tensor::full(&[1, 1, 2], 9.0));
        let col = t.constant(Tensor::ones(&[2, 1]));
        let s = t.pointwise_conv2d(nine, col).unwrap();
        assert_eq!(t.value(s).item(), 18.0);
    }

    #[test]
    fn pointwise_equals_unit_dense_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = Tensor::uniform(&[4, 3, 3], -1.0, 1.0, &mut rng);
        let wv = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let mut t = Tape::default();
        let x = t.constant(xv.clone());
        let w = t.constant(wv.clone());
        let y = t.pointwise_conv2d(x, w).unwrap();
        let expect = naive_conv(&xv, &wv.clone().reshape(&[1, 1, 3, 2]).unwrap(), 1, 0);
        for (a, b) in t.value(y).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dsconv_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = Tensor::uniform(&[5, 5, 2], -1.0, 1.0, &mut rng);
        let mut t = Tape::default();
        let x = t.constant(xv);
        let wd = t.constant(Tensor::ones(&[3, 3, 2]));
        let eye = t.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = t.dsconv(x, wd, eye, 1, 1).unwrap();
        let d = t.depthwise_conv2d(x, wd, 1, 1).unwrap();
        assert_eq!(t.value(y), t.value(d));

        let zero = t.constant(Tensor::zeros(&[2, 3]));
        let z = t.dsconv(x, wd, zero, 1, 1).unwrap();
        assert_eq!(t.value(z).shape(), &[5, 5, 3]);
        assert!(t.value(z).data().iter().all(|&v| v == 0.0));
    }
}
