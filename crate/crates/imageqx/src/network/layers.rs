//! Network building blocks with explicit forward caches and hand-written
//! backward passes. Everything is generic over the float type so gradient
//! checks can run at 64-bit while training runs at 32-bit.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

/// Float scalar usable in network math. `NdFloat` brings `LinalgScalar`
/// (GEMM) and `ScalarOperand`.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite f64 fits")
    }
    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float converts")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Sample `U(-limit, limit)` with `limit = sqrt(6 / fan_in)`: fan-in scaled
/// uniform initialization with variance `2 / fan_in`.
pub fn fan_in_uniform<F: Scalar>(rng: &mut ChaCha12Rng, fan_in: usize) -> F {
    let limit = (6.0 / fan_in as f64).sqrt();
    F::from_f64(rng.gen_range(-limit..limit))
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

pub fn silu_derivative<F: Scalar>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Unfold 3x3 patches (zero padding 1) into rows of shape `(C*9)`, one row
/// per output position. Output positions follow `(n, oy, ox)` order.
pub fn im2col<F: Scalar>(x: &Array4<F>, stride: usize) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let k = c * 9;
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<F>::zeros((n * oh * ow, k));
    let per_image = oh * ow * k;
    cols.as_slice_mut()
        .unwrap()
        .par_chunks_mut(per_image)
        .enumerate()
        .for_each(|(ni, chunk)| {
            let base = ni * c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (oy * ow + ox) * k;
                    for ci in 0..c {
                        let cbase = base + ci * h * w;
                        for kr in 0..3 {
                            let iy = (oy * stride + kr) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let rbase = cbase + iy as usize * w;
                            let col0 = row + (ci * 3 + kr) * 3;
                            for kc in 0..3 {
                                let ix = (ox * stride + kc) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                chunk[col0 + kc as usize] = xs[rbase + ix as usize];
                            }
                        }
                    }
                }
            }
        });
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back to image layout.
pub fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    shape: (usize, usize, usize, usize),
    stride: usize,
) -> Array4<F> {
    let (_, c, h, w) = shape;
    let oh = (h - 1) / stride + 1;
    let ow = (w - 1) / stride + 1;
    let k = c * 9;
    let ds = dcols.as_slice().expect("standard layout");
    let mut dx = Array4::<F>::zeros(shape);
    let per_image = c * h * w;
    dx.as_slice_mut()
        .unwrap()
        .par_chunks_mut(per_image)
        .enumerate()
        .for_each(|(ni, chunk)| {
            let cols_base = ni * oh * ow * k;
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = cols_base + (oy * ow + ox) * k;
                    for ci in 0..c {
                        let cbase = ci * h * w;
                        for kr in 0..3 {
                            let iy = (oy * stride + kr) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let rbase = cbase + iy as usize * w;
                            let col0 = row + (ci * 3 + kr) * 3;
                            for kc in 0..3 {
                                let ix = (ox * stride + kc) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                chunk[rbase + ix as usize] =
                                    chunk[rbase + ix as usize] + ds[col0 + kc as usize];
                            }
                        }
                    }
                }
            }
        });
    dx
}

// ---------------------------------------------------------------------------
// Conv 3x3
// ---------------------------------------------------------------------------

/// 3x3 convolution, zero padding 1. The weight is stored as
/// `(out_ch, in_ch * 9)`, row-major equivalent of `(out_ch, in_ch, 3, 3)`.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

pub struct ConvCache<F> {
    cols: Array2<F>,
    in_shape: (usize, usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct ConvGrads<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn init(rng: &mut ChaCha12Rng, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let fan_in = in_ch * 9;
        let weight = Array2::from_shape_fn((out_ch, fan_in), |_| fan_in_uniform(rng, fan_in));
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            in_ch,
            out_ch,
            stride,
        }
    }

    pub fn zero_grads(&self) -> ConvGrads<F> {
        ConvGrads {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (n, _, h, w) = x.dim();
        let oh = (h - 1) / self.stride + 1;
        let ow = (w - 1) / self.stride + 1;
        let cols = im2col(x, self.stride);
        let mut y2 = cols.dot(&self.weight.t());
        y2 += &self.bias;
        let y = y2
            .into_shape_with_order((n, oh, ow, self.out_ch))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (
            y,
            ConvCache {
                cols,
                in_shape: x.dim(),
            },
        )
    }

    pub fn backward(&self, cache: &ConvCache<F>, dy: &Array4<F>, grads: &mut ConvGrads<F>) -> Array4<F> {
        let (n, co, oh, ow) = dy.dim();
        let dmat = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((n * oh * ow, co))
            .unwrap();
        grads.weight += &dmat.t().dot(&cache.cols);
        grads.bias += &dmat.sum_axis(Axis(0));
        let dcols = dmat.dot(&self.weight);
        col2im(&dcols, cache.in_shape, self.stride)
    }
}

// ---------------------------------------------------------------------------
// Batch normalization (spatial and 1-d)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct BnGrads<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

pub struct Bn2dCache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
    pub batch_mean: Array1<F>,
    pub batch_var: Array1<F>,
    train: bool,
}

pub struct Bn1dCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
    pub batch_mean: Array1<F>,
    pub batch_var: Array1<F>,
    train: bool,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn init(features: usize) -> Self {
        Self {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
        }
    }

    pub fn zero_grads(&self) -> BnGrads<F> {
        BnGrads {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }

    /// Fold batch statistics into the running estimates with momentum 0.1.
    pub fn update_running(&mut self, batch_mean: &Array1<F>, batch_var: &Array1<F>) {
        let momentum = F::from_f64(BN_MOMENTUM);
        let keep = F::one() - momentum;
        ndarray::Zip::from(&mut self.running_mean)
            .and(batch_mean)
            .for_each(|r, &m| *r = keep * *r + momentum * m);
        ndarray::Zip::from(&mut self.running_var)
            .and(batch_var)
            .for_each(|r, &v| *r = keep * *r + momentum * v);
    }

    pub fn forward_2d(&self, x: &Array4<F>, train: bool) -> (Array4<F>, Bn2dCache<F>) {
        let (n, c, h, w) = x.dim();
        let m = F::from_f64((n * h * w) as f64);
        let eps = F::from_f64(BN_EPS);

        let (mean, var) = if train {
            let mut mean = Array1::<F>::zeros(c);
            let mut var = Array1::<F>::zeros(c);
            for ci in 0..c {
                let ch = x.index_axis(Axis(1), ci);
                let mu = ch.sum() / m;
                mean[ci] = mu;
                var[ci] = ch.fold(F::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / m;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };

        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let mut xhat = x.clone();
        let mut y = Array4::<F>::zeros(x.raw_dim());
        for ci in 0..c {
            let (mu, is) = (mean[ci], inv_std[ci]);
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            let mut xc = xhat.index_axis_mut(Axis(1), ci);
            xc.mapv_inplace(|v| (v - mu) * is);
            ndarray::Zip::from(y.index_axis_mut(Axis(1), ci))
                .and(&xc)
                .for_each(|yv, &xh| *yv = g * xh + b);
        }
        (
            y,
            Bn2dCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                train,
            },
        )
    }

    pub fn backward_2d(&self, cache: &Bn2dCache<F>, dy: &Array4<F>, grads: &mut BnGrads<F>) -> Array4<F> {
        let (n, c, h, w) = dy.dim();
        let m = F::from_f64((n * h * w) as f64);
        let mut dx = Array4::<F>::zeros(dy.raw_dim());
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xhc = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy = dyc.sum();
            let sum_dy_xhat = ndarray::Zip::from(&dyc)
                .and(&xhc)
                .fold(F::zero(), |acc, &d, &xh| acc + d * xh);
            grads.gamma[ci] = grads.gamma[ci] + sum_dy_xhat;
            grads.beta[ci] = grads.beta[ci] + sum_dy;

            let scale = self.gamma[ci] * cache.inv_std[ci];
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            if cache.train {
                ndarray::Zip::from(&mut dxc)
                    .and(&dyc)
                    .and(&xhc)
                    .for_each(|o, &d, &xh| {
                        *o = scale * (d - sum_dy / m - xh * sum_dy_xhat / m);
                    });
            } else {
                // Running statistics are constants in eval mode.
                ndarray::Zip::from(&mut dxc)
                    .and(&dyc)
                    .for_each(|o, &d| *o = scale * d);
            }
        }
        dx
    }

    pub fn forward_1d(&self, x: &Array2<F>, train: bool) -> (Array2<F>, Bn1dCache<F>) {
        let (n, c) = x.dim();
        let m = F::from_f64(n as f64);
        let eps = F::from_f64(BN_EPS);

        let (mean, var) = if train {
            let mean = x.sum_axis(Axis(0)) / m;
            let mut var = Array1::<F>::zeros(c);
            for ci in 0..c {
                let mu = mean[ci];
                var[ci] = x
                    .index_axis(Axis(1), ci)
                    .fold(F::zero(), |acc, &v| acc + (v - mu) * (v - mu))
                    / m;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };

        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let mut xhat = x.clone();
        for ci in 0..c {
            let (mu, is) = (mean[ci], inv_std[ci]);
            xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|v| (v - mu) * is);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (
            y,
            Bn1dCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                train,
            },
        )
    }

    pub fn backward_1d(&self, cache: &Bn1dCache<F>, dy: &Array2<F>, grads: &mut BnGrads<F>) -> Array2<F> {
        let (n, c) = dy.dim();
        let m = F::from_f64(n as f64);
        let mut dx = Array2::<F>::zeros(dy.raw_dim());
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xhc = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy = dyc.sum();
            let sum_dy_xhat = ndarray::Zip::from(&dyc)
                .and(&xhc)
                .fold(F::zero(), |acc, &d, &xh| acc + d * xh);
            grads.gamma[ci] = grads.gamma[ci] + sum_dy_xhat;
            grads.beta[ci] = grads.beta[ci] + sum_dy;

            let scale = self.gamma[ci] * cache.inv_std[ci];
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            if cache.train {
                ndarray::Zip::from(&mut dxc)
                    .and(&dyc)
                    .and(&xhc)
                    .for_each(|o, &d, &xh| {
                        *o = scale * (d - sum_dy / m - xh * sum_dy_xhat / m);
                    });
            } else {
                ndarray::Zip::from(&mut dxc)
                    .and(&dyc)
                    .for_each(|o, &d| *o = scale * d);
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear<F> {
    /// `(out_features, in_features)`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

pub struct LinearCache<F> {
    input: Array2<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn init(rng: &mut ChaCha12Rng, in_features: usize, out_features: usize) -> Self {
        let weight =
            Array2::from_shape_fn((out_features, in_features), |_| fan_in_uniform(rng, in_features));
        Self {
            weight,
            bias: Array1::zeros(out_features),
        }
    }

    pub fn zero_grads(&self) -> LinearGrads<F> {
        LinearGrads {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let y = x.dot(&self.weight.t()) + &self.bias;
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(&self, cache: &LinearCache<F>, dy: &Array2<F>, grads: &mut LinearGrads<F>) -> Array2<F> {
        grads.weight += &dy.t().dot(&cache.input);
        grads.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: mask entries are `0` or `1/(1-rate)`.
pub fn dropout_mask<F: Scalar>(rng: &mut ChaCha12Rng, shape: (usize, usize), rate: f64) -> Array2<F> {
    let keep_scale = F::from_f64(1.0 / (1.0 - rate));
    Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < rate {
            F::zero()
        } else {
            keep_scale
        }
    })
}
