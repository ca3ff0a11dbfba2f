//! Layer primitives and losses.
//!
//! The `*_rows` / `*_batch` functions work on ndarray views and are what the
//! models use; the tensor-level functions are thin single-example wrappers.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, ArrayViewMut3, Axis, Zip};

use super::{tensor_from_array, Real, Tensor};
use crate::error::{Error, Result};

/// Default negative slope of the leaky activation.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Variance floor of batch normalisation.
pub const BN_EPS: f64 = 1e-5;

/// `y = x·Wᵀ + b` for a batch of rows; `w` is `(out, in)`.
pub fn dense_rows<T: Real>(x: ArrayView2<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> Array2<T> {
    let mut y = Array2::zeros((x.nrows(), w.nrows()));
    y.rows_mut().into_iter().for_each(|mut r| r.assign(&b));
    general_mat_mul(T::one(), &x, &w.t(), T::one(), &mut y);
    y
}

/// Accumulates weight and bias gradients of [`dense_rows`]; returns the input gradient.
pub fn dense_rows_backward<T: Real>(
    x: ArrayView2<T>,
    w: ArrayView2<T>,
    dy: ArrayView2<T>,
    mut dw: ArrayViewMut2<T>,
    mut db: ArrayViewMut1<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &dy.t(), &x, T::one(), &mut dw);
    db += &dy.sum_axis(Axis(0));
    dy.dot(&w)
}

pub fn deconv1d_len(len_in: usize, kernel: usize, stride: usize) -> usize {
    (len_in - 1) * stride + kernel
}

/// Transposed 1-D convolution over `(batch, len_in, c_in)` with kernels
/// `(k, c_in, c_out)`: input position `i` scatters `x[i]·K[j]` into output
/// position `i·stride + j`.
pub fn deconv1d_batch<T: Real>(x: ArrayView3<T>, k: ArrayView3<T>, stride: usize) -> Array3<T> {
    let (b, len_in, c_in) = x.dim();
    let (taps, _, c_out) = k.dim();
    let mut y = Array3::zeros((b, deconv1d_len(len_in, taps, stride), c_out));
    let x2 = fold(x);
    let span = (len_in - 1) * stride + 1;
    for j in 0..taps {
        let contrib = x2.dot(&k.index_axis(Axis(0), j));
        let contrib = contrib.into_shape_with_order((b, len_in, c_out)).unwrap();
        let mut dst = y.slice_mut(s![.., j..j + span; stride, ..]);
        dst += &contrib;
    }
    debug_assert_eq!(c_in, k.dim().1);
    y
}

/// Accumulates kernel gradients of [`deconv1d_batch`]; returns the input gradient.
pub fn deconv1d_batch_backward<T: Real>(
    x: ArrayView3<T>,
    k: ArrayView3<T>,
    stride: usize,
    dy: ArrayView3<T>,
    mut dk: ArrayViewMut3<T>,
) -> Array3<T> {
    let (b, len_in, c_in) = x.dim();
    let (taps, _, c_out) = k.dim();
    let x2 = fold(x);
    let span = (len_in - 1) * stride + 1;
    let mut dx = Array2::zeros((b * len_in, c_in));
    for j in 0..taps {
        let g = dy.slice(s![.., j..j + span; stride, ..]).as_standard_layout().into_owned();
        let g = g.into_shape_with_order((b * len_in, c_out)).unwrap();
        let mut dkj = dk.index_axis_mut(Axis(0), j);
        general_mat_mul(T::one(), &x2.t(), &g, T::one(), &mut dkj);
        general_mat_mul(T::one(), &g, &k.index_axis(Axis(0), j).t(), T::one(), &mut dx);
    }
    dx.into_shape_with_order((b, len_in, c_in)).unwrap()
}

fn fold<T: Real>(x: ArrayView3<T>) -> ArrayView2<T> {
    let (b, l, c) = x.dim();
    x.into_shape_with_order((b * l, c))
        .expect("activations are kept in standard layout")
}

#[inline]
pub fn leaky<T: Real>(v: T, slope: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * slope
    }
}

/// Derivative of [`leaky`]; taken as `slope` at zero.
#[inline]
pub fn leaky_grad<T: Real>(v: T, slope: T) -> T {
    if v > T::zero() {
        T::one()
    } else {
        slope
    }
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(logits: ArrayView2<T>) -> Array2<T> {
    let mut p = logits.to_owned();
    for mut row in p.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

/// Summed cross-entropy of row-wise softmax against class targets, plus the
/// gradient `softmax − onehot` with respect to the logits.
pub fn softmax_ce_rows<T: Real>(logits: ArrayView2<T>, targets: &[usize]) -> (T, Array2<T>) {
    assert_eq!(logits.nrows(), targets.len(), "one target per row");
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = T::zero();
    for ((row, mut g), &t) in logits.rows().into_iter().zip(grad.rows_mut()).zip(targets) {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        Zip::from(&mut g).and(&row).for_each(|g, &v| {
            *g = (v - m).exp();
            z += *g;
        });
        loss += z.ln() - (row[t] - m);
        g.mapv_inplace(|e| e / z);
        g[t] -= T::one();
    }
    (loss, grad)
}

/// Summed Gaussian KL against the standard normal, with gradients for `mu`
/// and `logvar`.
pub fn kl_gauss_rows<T: Real>(mu: ArrayView2<T>, logvar: ArrayView2<T>) -> (T, Array2<T>, Array2<T>) {
    let half = T::lit(0.5);
    let mut kl = T::zero();
    Zip::from(&mu).and(&logvar).for_each(|&m, &lv| {
        kl += -half * (T::one() + lv - m * m - lv.exp());
    });
    let dmu = mu.to_owned();
    let dlv = logvar.mapv(|lv| half * (lv.exp() - T::one()));
    (kl, dmu, dlv)
}

/// Batch-statistics normalisation over rows, per column.
pub struct BatchNormCache<T> {
    pub xhat: Array2<T>,
    pub mean: ndarray::Array1<T>,
    pub var: ndarray::Array1<T>,
}

pub fn batch_norm_train<T: Real>(
    x: ArrayView2<T>,
    gamma: ArrayView1<T>,
    beta: ArrayView1<T>,
) -> (Array2<T>, BatchNormCache<T>) {
    let n = T::lit(x.nrows() as f64);
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = &x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = var.mapv(|v| T::one() / (v + T::lit(BN_EPS)).sqrt());
    let xhat = centered * &inv_std;
    let y = &xhat * &gamma + &beta;
    (y, BatchNormCache { xhat, mean, var })
}

pub fn batch_norm_apply<T: Real>(
    x: ArrayView2<T>,
    gamma: ArrayView1<T>,
    beta: ArrayView1<T>,
    mean: ArrayView1<T>,
    var: ArrayView1<T>,
) -> Array2<T> {
    let scale = Zip::from(&gamma).and(&var).map_collect(|&g, &v| g / (v + T::lit(BN_EPS)).sqrt());
    (&x - &mean) * &scale + &beta
}

pub fn batch_norm_train_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: ArrayView1<T>,
    dy: ArrayView2<T>,
    mut dgamma: ArrayViewMut1<T>,
    mut dbeta: ArrayViewMut1<T>,
) -> Array2<T> {
    let n = T::lit(dy.nrows() as f64);
    dgamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
    dbeta += &dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let sum_d = dxhat.sum_axis(Axis(0));
    let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
    let inv_std = cache.var.mapv(|v| T::one() / (v + T::lit(BN_EPS)).sqrt());
    let mut dx = dxhat * n - &sum_d - &cache.xhat * &sum_dx;
    dx *= &(inv_std / n);
    dx
}

/// `y = W·x + b` for a single example.
pub fn dense_forward<T: Real>(weights: &Tensor<T>, bias: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let [out, inp] = weights.shape()[..] else {
        return Err(Error::Shape(format!("dense weights must be rank 2, got {:?}", weights.shape())));
    };
    if bias.shape() != [out] || x.shape() != [inp] {
        return Err(Error::Shape(format!(
            "dense {out}x{inp} got bias {:?} and input {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let y = dense_rows(x.view2(), weights.view2(), bias.view1());
    Ok(tensor_from_array(y.into_shape_with_order(out).unwrap()))
}

/// Transposed convolution of a `(len_in, c_in)` input with `(k, c_in, c_out)` kernels.
pub fn deconv1d_forward<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    if !(1..=2).contains(&stride) {
        return Err(Error::Shape(format!("stride must be 1 or 2, got {stride}")));
    }
    let (x, k) = match (input.shape(), kernels.shape()) {
        (&[l, ci], &[kk, kci, co]) if ci == kci => (
            ArrayView3::from_shape((1, l, ci), input.data()).unwrap(),
            ArrayView3::from_shape((kk, kci, co), kernels.data()).unwrap(),
        ),
        (a, b) => {
            return Err(Error::Shape(format!("deconv1d input {a:?} incompatible with kernels {b:?}")));
        }
    };
    let y = deconv1d_batch(x, k, stride);
    let (_, l, c) = y.dim();
    Ok(tensor_from_array(y.into_shape_with_order((l, c)).unwrap()))
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = leaky(*v, slope));
    y
}

/// Cross-entropy of `softmax(logits)` against a one-hot target.
pub fn softmax_ce<T: Real>(logits: &Tensor<T>, target_class: usize) -> Result<T> {
    if logits.shape().len() != 1 {
        return Err(Error::Shape(format!("logits must be rank 1, got {:?}", logits.shape())));
    }
    if target_class >= logits.len() {
        return Err(Error::Shape(format!(
            "target class {target_class} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(softmax_ce_rows(logits.view2(), &[target_class]).0)
}

/// `−½ Σ (1 + logvar − mu² − e^logvar)`.
pub fn kl_gauss<T: Real>(mu: &Tensor<T>, logvar: &Tensor<T>) -> Result<T> {
    if mu.shape() != logvar.shape() {
        return Err(Error::Shape(format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape())));
    }
    Ok(kl_gauss_rows(mu.view2(), logvar.view2()).0)
}
