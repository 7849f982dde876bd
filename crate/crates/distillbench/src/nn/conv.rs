//! 2-D convolution and linear layers with explicit forward/backward passes.
//!
//! Convolution goes through im2col so the inner loop is a single matrix
//! multiply. Everything is f64; batches are (B, C, H, W).

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (out_channels, in_channels, kh, kw)
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub dw: Array4<f64>,
    pub db: Array1<f64>,
}

fn normal(rng: &mut ChaCha12Rng, std: f64) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

impl Conv2d {
    pub fn init(
        rng: &mut ChaCha12Rng,
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Array4::from_shape_fn((out_ch, in_ch, kernel, kernel), |_| normal(rng, std));
        Conv2d {
            w,
            b: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.w.shape()[2];
        let kw = self.w.shape()[3];
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (batch, in_ch, h, w) = dim4(x);
        let oc = self.w.shape()[0];
        let kh = self.w.shape()[2];
        let kw = self.w.shape()[3];
        let (oh, ow) = self.out_spatial(h, w);
        let wmat = self
            .w
            .view()
            .into_shape((oc, in_ch * kh * kw))
            .expect("contiguous kernel");
        let mut y = Array4::zeros((batch, oc, oh, ow));
        for bi in 0..batch {
            let cols = self.im2col(x, bi, oh, ow);
            let out = wmat.dot(&cols); // (oc, oh*ow)
            for c in 0..oc {
                let bias = self.b[c];
                for i in 0..oh {
                    for j in 0..ow {
                        y[[bi, c, i, j]] = out[[c, i * ow + j]] + bias;
                    }
                }
            }
        }
        y
    }

    /// Backward pass: returns (dx, grads) given the forward input and dy.
    pub fn backward(&self, x: &Array4<f64>, dy: &Array4<f64>) -> (Array4<f64>, ConvGrad) {
        let (batch, in_ch, h, w) = dim4(x);
        let oc = self.w.shape()[0];
        let kh = self.w.shape()[2];
        let kw = self.w.shape()[3];
        let (oh, ow) = self.out_spatial(h, w);
        let wmat = self
            .w
            .view()
            .into_shape((oc, in_ch * kh * kw))
            .expect("contiguous kernel");
        let mut dwmat = Array2::<f64>::zeros((oc, in_ch * kh * kw));
        let mut db = Array1::<f64>::zeros(oc);
        let mut dx = Array4::<f64>::zeros((batch, in_ch, h, w));
        for bi in 0..batch {
            let cols = self.im2col(x, bi, oh, ow);
            let mut dy_mat = Array2::<f64>::zeros((oc, oh * ow));
            for c in 0..oc {
                for i in 0..oh {
                    for j in 0..ow {
                        dy_mat[[c, i * ow + j]] = dy[[bi, c, i, j]];
                    }
                }
            }
            dwmat = dwmat + dy_mat.dot(&cols.t());
            db = db + dy_mat.sum_axis(Axis(1));
            let dcols = wmat.t().dot(&dy_mat); // (in_ch*kh*kw, oh*ow)
            self.col2im(&dcols, &mut dx, bi, oh, ow);
        }
        let dw = dwmat
            .into_shape((oc, in_ch, kh, kw))
            .expect("kernel shape");
        (dx, ConvGrad { dw, db })
    }

    fn im2col(&self, x: &Array4<f64>, bi: usize, oh: usize, ow: usize) -> Array2<f64> {
        let (_, in_ch, h, w) = dim4(x);
        let kh = self.w.shape()[2];
        let kw = self.w.shape()[3];
        let mut cols = Array2::<f64>::zeros((in_ch * kh * kw, oh * ow));
        for c in 0..in_ch {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    for i in 0..oh {
                        let src_i = (i * self.stride + ki) as isize - self.pad as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let src_j = (j * self.stride + kj) as isize - self.pad as isize;
                            if src_j < 0 || src_j >= w as isize {
                                continue;
                            }
                            cols[[row, i * ow + j]] = x[[bi, c, src_i as usize, src_j as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<f64>, dx: &mut Array4<f64>, bi: usize, oh: usize, ow: usize) {
        let in_ch = dx.shape()[1];
        let h = dx.shape()[2];
        let w = dx.shape()[3];
        let kh = self.w.shape()[2];
        let kw = self.w.shape()[3];
        for c in 0..in_ch {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    for i in 0..oh {
                        let src_i = (i * self.stride + ki) as isize - self.pad as isize;
                        if src_i < 0 || src_i >= h as isize {
                            continue;
                        }
                        for j in 0..ow {
                            let src_j = (j * self.stride + kj) as isize - self.pad as isize;
                            if src_j < 0 || src_j >= w as isize {
                                continue;
                            }
                            dx[[bi, c, src_i as usize, src_j as usize]] +=
                                dcols[[row, i * ow + j]];
                        }
                    }
                }
            }
        }
    }

    pub fn param_len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// (out, in)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LinearGrad {
    pub dw: Array2<f64>,
    pub db: Array1<f64>,
}

impl Linear {
    pub fn init(rng: &mut ChaCha12Rng, out: usize, input: usize) -> Self {
        let std = (1.0 / input as f64).sqrt();
        let w = Array2::from_shape_fn((out, input), |_| normal(rng, std));
        Linear {
            w,
            b: Array1::zeros(out),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (Array2<f64>, LinearGrad) {
        let dw = dy.t().dot(x);
        let db = dy.sum_axis(Axis(0));
        let dx = dy.dot(&self.w);
        (dx, LinearGrad { dw, db })
    }

    pub fn param_len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

pub fn dim4(x: &Array4<f64>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(pre: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(pre, |d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn finite_diff_conv(conv: &Conv2d, x: &Array4<f64>) {
        // Scalar objective: sum of squares of outputs.
        let objective = |c: &Conv2d, x: &Array4<f64>| -> f64 {
            c.forward(x).iter().map(|v| v * v).sum::<f64>() * 0.5
        };
        let y = conv.forward(x);
        let (dx, grad) = conv.backward(x, &y);
        let h = 1e-6;
        // Check a scattering of input coordinates.
        let mut xp = x.clone();
        for &idx in &[0usize, 3, 7] {
            let coords = {
                let s = x.shape();
                let n = s[1] * s[2] * s[3];
                let i = idx % (s[0] * n);
                (
                    i / n,
                    (i % n) / (s[2] * s[3]),
                    (i % (s[2] * s[3])) / s[3],
                    i % s[3],
                )
            };
            let orig = xp[coords];
            xp[coords] = orig + h;
            let fp = objective(conv, &xp);
            xp[coords] = orig - h;
            let fm = objective(conv, &xp);
            xp[coords] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = dx[coords];
            assert!((num - ana).abs() <= 1e-5 * (1.0 + ana.abs()), "{num} vs {ana}");
        }
        // Check a weight coordinate.
        let mut cp = conv.clone();
        let orig = cp.w[[0, 0, 0, 0]];
        cp.w[[0, 0, 0, 0]] = orig + h;
        let fp = objective(&cp, x);
        cp.w[[0, 0, 0, 0]] = orig - h;
        let fm = objective(&cp, x);
        let num = (fp - fm) / (2.0 * h);
        let ana = grad.dw[[0, 0, 0, 0]];
        assert!((num - ana).abs() <= 1e-5 * (1.0 + ana.abs()), "{num} vs {ana}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let conv = Conv2d::init(&mut rng, 2, 3, 3, 1, 1);
        let x = Array4::from_shape_fn((2, 3, 5, 5), |_| rng.gen::<f64>() - 0.5);
        finite_diff_conv(&conv, &x);
        let strided = Conv2d::init(&mut rng, 2, 3, 3, 2, 1);
        finite_diff_conv(&strided, &x);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let lin = Linear::init(&mut rng, 3, 4);
        let x = Array2::from_shape_fn((2, 4), |_| rng.gen::<f64>() - 0.5);
        let y = lin.forward(&x);
        let (dx, grad) = lin.backward(&x, &y);
        let f = |l: &Linear, x: &Array2<f64>| l.forward(x).iter().map(|v| v * v).sum::<f64>() * 0.5;
        let h = 1e-6;
        let mut xp = x.clone();
        xp[[1, 2]] += h;
        let fp = f(&lin, &xp);
        xp[[1, 2]] -= 2.0 * h;
        let fm = f(&lin, &xp);
        let num = (fp - fm) / (2.0 * h);
        assert!((num - dx[[1, 2]]).abs() < 1e-6);
        let mut lp = lin.clone();
        lp.w[[0, 1]] += h;
        let fp = f(&lp, &x);
        lp.w[[0, 1]] -= 2.0 * h;
        let fm = f(&lp, &x);
        let num = (fp - fm) / (2.0 * h);
        assert!((num - grad.dw[[0, 1]]).abs() < 1e-6);
    }
}
