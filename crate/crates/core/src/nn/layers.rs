//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Every layer has an inference `forward(&self, ..)` and a training pair
//! `forward_train` / `backward`; the cache returned by `forward_train` holds
//! exactly what the backward pass needs.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Array4, ArrayView2, Axis, Ix2, Ix4, NdFloat};
use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};

fn weight2<F: NdFloat>(p: &ParamStore<F>, id: ParamId) -> ArrayView2<'_, F> {
    p.get(id).view().into_dimensionality::<Ix2>().unwrap()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: NdFloat, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], bound, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[out_dim]);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: NdFloat>(&self, p: &ParamStore<F>, x: &Array2<F>) -> Array2<F> {
        let w = weight2(p, self.weight);
        let mut y = x.dot(&w.t());
        y += p.get(self.bias);
        y
    }

    /// Backward given the layer input; returns the input gradient.
    pub fn backward<F: NdFloat>(
        &self,
        p: &ParamStore<F>,
        x: &Array2<F>,
        dy: &Array2<F>,
        g: &mut Grads<F>,
    ) -> Array2<F> {
        let w = weight2(p, self.weight);
        {
            let mut gw = g
                .get_mut(self.weight)
                .view_mut()
                .into_dimensionality::<Ix2>()
                .unwrap();
            general_mat_mul(F::one(), &dy.t(), x, F::one(), &mut gw);
        }
        *g.get_mut(self.bias) += &dy.sum_axis(Axis(0)).into_dyn();
        dy.dot(&w)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<F> {
    /// Per-sample column matrices, shape `(N, C * k * k, Ho * Wo)`.
    cols: Array3<F>,
    in_shape: (usize, usize, usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: NdFloat, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            bound,
            rng,
        );
        let bias = store.add_zeros(format!("{name}.bias"), &[out_ch]);
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn weight_matrix<'a, F: NdFloat>(&self, p: &'a ParamStore<F>) -> ArrayView2<'a, F> {
        p.get(self.weight)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.kernel * self.kernel))
            .unwrap()
    }

    fn im2col<F: NdFloat>(&self, x: &Array4<F>) -> Array3<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let plane = ho * wo;
        let mut cols = Array3::<F>::zeros((n, c * k * k, plane));
        let xs = x.as_standard_layout();
        let src = xs.as_slice().unwrap();
        let dst = cols.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let img = &src[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ni * c * k * k + (ci * k + ky) * k + kx;
                        let out_img = &mut dst[row * plane..(row + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &img[iy as usize * w..(iy as usize + 1) * w];
                            let out_line = &mut out_img[oy * wo..(oy + 1) * wo];
                            if self.stride == 1 {
                                // contiguous run of valid columns
                                let lo = self.pad.saturating_sub(kx);
                                let hi = (w + self.pad - kx).min(wo);
                                if lo < hi {
                                    let s0 = lo + kx - self.pad;
                                    out_line[lo..hi].copy_from_slice(&src_row[s0..s0 + hi - lo]);
                                }
                            } else {
                                for (ox, o) in out_line.iter_mut().enumerate() {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        *o = src_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<F: NdFloat>(&self, cols: &Array3<F>, shape: (usize, usize, usize, usize)) -> Array4<F> {
        let (n, c, h, w) = shape;
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let plane = ho * wo;
        let mut dx = Array4::<F>::zeros(shape);
        let dst = dx.as_slice_mut().unwrap();
        let src = cols.as_slice().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let img = &mut dst[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ni * c * k * k + (ci * k + ky) * k + kx;
                        let in_img = &src[row * plane..(row + 1) * plane];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut img[iy as usize * w..(iy as usize + 1) * w];
                            let in_line = &in_img[oy * wo..(oy + 1) * wo];
                            if self.stride == 1 {
                                let lo = self.pad.saturating_sub(kx);
                                let hi = (w + self.pad - kx).min(wo);
                                if lo < hi {
                                    let s0 = lo + kx - self.pad;
                                    for (d, v) in dst_row[s0..s0 + hi - lo].iter_mut().zip(&in_line[lo..hi]) {
                                        *d += *v;
                                    }
                                }
                            } else {
                                for (ox, v) in in_line.iter().enumerate() {
                                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dst_row[ix as usize] += *v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn apply<F: NdFloat>(&self, p: &ParamStore<F>, cols: &Array3<F>, ho: usize, wo: usize) -> Array4<F> {
        let n = cols.dim().0;
        let wm = self.weight_matrix(p);
        let bias = p.get(self.bias);
        let mut out = Array4::<F>::zeros((n, self.out_ch, ho, wo));
        for ni in 0..n {
            let mut o = out
                .index_axis_mut(Axis(0), ni)
                .into_shape_with_order((self.out_ch, ho * wo))
                .unwrap();
            for (oc, mut row) in o.outer_iter_mut().enumerate() {
                row.fill(bias[[oc]]);
            }
            general_mat_mul(F::one(), &wm, &cols.index_axis(Axis(0), ni), F::one(), &mut o);
        }
        out
    }

    pub fn forward<F: NdFloat>(&self, p: &ParamStore<F>, x: &Array4<F>) -> Array4<F> {
        let (_, _, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let cols = self.im2col(x);
        self.apply(p, &cols, ho, wo)
    }

    pub fn forward_train<F: NdFloat>(&self, p: &ParamStore<F>, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (_, _, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let cols = self.im2col(x);
        let y = self.apply(p, &cols, ho, wo);
        (
            y,
            ConvCache {
                cols,
                in_shape: x.dim(),
            },
        )
    }

    pub fn backward<F: NdFloat>(
        &self,
        p: &ParamStore<F>,
        cache: &ConvCache<F>,
        dy: &Array4<F>,
        g: &mut Grads<F>,
    ) -> Array4<F> {
        let (n, o, ho, wo) = dy.dim();
        let dy = dy.as_standard_layout();
        let wm = self.weight_matrix(p);
        let ckk = self.in_ch * self.kernel * self.kernel;
        let mut dcols = Array3::<F>::zeros((n, ckk, ho * wo));
        {
            let gw = g.get_mut(self.weight);
            let mut gw2 = gw.view_mut().into_shape_with_order((o, ckk)).unwrap();
            for ni in 0..n {
                let dyn_ = dy
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((o, ho * wo))
                    .unwrap();
                let cols = cache.cols.index_axis(Axis(0), ni);
                general_mat_mul(F::one(), &dyn_, &cols.t(), F::one(), &mut gw2);
                let mut dc = dcols.index_axis_mut(Axis(0), ni);
                general_mat_mul(F::one(), &wm.t(), &dyn_, F::zero(), &mut dc);
            }
        }
        *g.get_mut(self.bias) += &dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn();
        self.col2im(&dcols, cache.in_shape)
    }
}

pub fn sigmoid<F: NdFloat>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: NdFloat, D: ndarray::Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of SiLU evaluated at the pre-activation `x`.
pub fn silu_backward<F: NdFloat, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut out = dy.clone();
    ndarray::Zip::from(&mut out).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d = *d * s * (F::one() + v * (F::one() - s));
    });
    out
}

pub fn upsample2<F: NdFloat>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(a, b, y, xx)| x[[a, b, y / 2, xx / 2]])
}

pub fn upsample2_backward<F: NdFloat>(dy: &Array4<F>) -> Array4<F> {
    let (n, c, h2, w2) = dy.dim();
    let mut dx = Array4::<F>::zeros((n, c, h2 / 2, w2 / 2));
    for ((a, b, y, xx), v) in dy.indexed_iter() {
        dx[[a, b, y / 2, xx / 2]] += *v;
    }
    dx
}

pub fn global_avg_pool<F: NdFloat>(x: &Array4<F>) -> Array2<F> {
    let (_, _, h, w) = x.dim();
    let scale = F::from(1.0 / (h * w) as f64).unwrap();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v * scale)
}

pub fn global_avg_pool_backward<F: NdFloat>(dy: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (n, c) = dy.dim();
    let scale = F::from(1.0 / (h * w) as f64).unwrap();
    Array4::from_shape_fn((n, c, h, w), |(a, b, _, _)| dy[[a, b]] * scale)
}

/// `y[n, c, :, :] = x[n, c, :, :] * (1 + scale[n, c]) + shift[n, c]`.
pub fn modulate<F: NdFloat>(x: &Array4<F>, scale: &Array2<F>, shift: &Array2<F>) -> Array4<F> {
    let mut y = x.clone();
    let (n, c, _, _) = x.dim();
    for ni in 0..n {
        for ci in 0..c {
            let s = F::one() + scale[[ni, ci]];
            let b = shift[[ni, ci]];
            y.index_axis_mut(Axis(0), ni)
                .index_axis_move(Axis(0), ci)
                .mapv_inplace(|v| v * s + b);
        }
    }
    y
}

/// Returns `(dx, dscale, dshift)` for [`modulate`].
pub fn modulate_backward<F: NdFloat>(
    x: &Array4<F>,
    scale: &Array2<F>,
    dy: &Array4<F>,
) -> (Array4<F>, Array2<F>, Array2<F>) {
    let (n, c, _, _) = x.dim();
    let mut dx = dy.clone();
    let mut dscale = Array2::<F>::zeros((n, c));
    let mut dshift = Array2::<F>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.index_axis(Axis(0), ni);
            let xp = xp.index_axis(Axis(0), ci);
            let dp = dy.index_axis(Axis(0), ni);
            let dp = dp.index_axis(Axis(0), ci);
            let mut ds = F::zero();
            let mut db = F::zero();
            ndarray::Zip::from(&xp).and(&dp).for_each(|&xv, &dv| {
                ds += xv * dv;
                db += dv;
            });
            dscale[[ni, ci]] = ds;
            dshift[[ni, ci]] = db;
            let s = F::one() + scale[[ni, ci]];
            dx.index_axis_mut(Axis(0), ni)
                .index_axis_move(Axis(0), ci)
                .mapv_inplace(|v| v * s);
        }
    }
    (dx, dscale, dshift)
}

/// Broadcast-add a per-(sample, channel) bias over the spatial dims.
pub fn add_channel_bias<F: NdFloat>(x: &mut Array4<F>, bias: &Array2<F>) {
    let (n, c, _, _) = x.dim();
    for ni in 0..n {
        for ci in 0..c {
            let b = bias[[ni, ci]];
            x.index_axis_mut(Axis(0), ni)
                .index_axis_move(Axis(0), ci)
                .mapv_inplace(|v| v + b);
        }
    }
}

/// Spatial sum, the gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_sums<F: NdFloat>(dy: &Array4<F>) -> Array2<F> {
    dy.sum_axis(Axis(3)).sum_axis(Axis(2))
}

pub fn as4<F: NdFloat>(a: ndarray::ArrayD<F>) -> Array4<F> {
    a.into_dimensionality::<Ix4>().unwrap()
}
