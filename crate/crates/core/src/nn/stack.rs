//! Sequential networks described by a list of [`LayerSpec`]s.

use ndarray::{s, Array1, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, ArrayViewMut3, Axis};
use rand::Rng;

use super::ops::{self, BatchNormCache};
use super::{Gradients, ModelParameters, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    /// Fully connected over the flattened input; the output has `len`
    /// positions of `units` features each.
    Dense { len: usize, units: usize },
    /// Transposed convolution plus bias, cropped to `len_in · stride` positions.
    Deconv1d { filters: usize, kernel: usize, stride: usize },
    LeakyRelu { slope: f64 },
    /// Per-channel normalisation with learned scale and shift.
    BatchNorm,
    /// `x + leaky(deconv(x) + b)` at stride 1, channel count preserved.
    ResidualBlock { kernel: usize, slope: f64 },
    /// Per-position projection to class logits.
    SoftmaxHead { classes: usize },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Shape(format!("{self:?}: {why}")));
        match *self {
            LayerSpec::Dense { len, units } if len == 0 || units == 0 => bad("dimensions must be positive".into()),
            LayerSpec::Deconv1d { filters, kernel, stride } => {
                if filters == 0 || kernel == 0 {
                    return bad("filters and kernel size must be positive".into());
                }
                if !(1..=2).contains(&stride) {
                    return bad("stride must be 1 or 2".into());
                }
                if kernel < stride + crop_offset(kernel) {
                    return bad(format!("kernel {kernel} too small to crop at stride {stride}"));
                }
                Ok(())
            }
            LayerSpec::ResidualBlock { kernel: 0, .. } => bad("kernel size must be positive".into()),
            LayerSpec::SoftmaxHead { classes: 0 } => bad("need at least one class".into()),
            LayerSpec::LeakyRelu { slope } | LayerSpec::ResidualBlock { slope, .. } if !slope.is_finite() => {
                bad("slope must be finite".into())
            }
            _ => Ok(()),
        }
    }
}

fn crop_offset(kernel: usize) -> usize {
    (kernel - 1) / 2
}

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    in_len: usize,
    in_ch: usize,
    out_len: usize,
    out_ch: usize,
    /// Parameter indices: weight, bias (or gamma, beta, running mean, running var).
    idx: Vec<usize>,
}

enum Cache<T> {
    Input(Array3<T>),
    Residual { x: Array3<T>, pre: Array3<T> },
    Norm(BatchNormCache<T>),
}

/// Forward-pass cache consumed by [`Stack::backward`].
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

#[derive(Clone, Debug)]
pub struct Stack {
    layers: Vec<Layer>,
    in_shape: (usize, usize),
}

impl Stack {
    /// Registers the parameters of every layer under `prefix` and returns the
    /// network. `input` is `(len, channels)` of one example.
    pub fn build<T: Real>(
        prefix: &str,
        input: (usize, usize),
        specs: &[LayerSpec],
        params: &mut ModelParameters<T>,
        rng: &mut impl Rng,
    ) -> Result<Stack> {
        let (mut len, mut ch) = input;
        if len == 0 || ch == 0 {
            return Err(Error::Shape(format!("input shape {input:?} must be positive")));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            spec.validate()?;
            let name = |what: &str| format!("{prefix}.{i}.{what}");
            let (out_len, out_ch, idx) = match *spec {
                LayerSpec::Dense { len: l, units } => {
                    let (fi, fo) = (len * ch, l * units);
                    let w = params.add_glorot(name("weight"), &[fo, fi], fi, fo, rng);
                    let b = params.add_param(name("bias"), Tensor::zeros(&[fo]));
                    (l, units, vec![w, b])
                }
                LayerSpec::Deconv1d { filters, kernel, stride } => {
                    let w = params.add_glorot(name("kernel"), &[kernel, ch, filters], kernel * ch, kernel * filters, rng);
                    let b = params.add_param(name("bias"), Tensor::zeros(&[filters]));
                    (len * stride, filters, vec![w, b])
                }
                LayerSpec::ResidualBlock { kernel, .. } => {
                    let w = params.add_glorot(name("kernel"), &[kernel, ch, ch], kernel * ch, kernel * ch, rng);
                    let b = params.add_param(name("bias"), Tensor::zeros(&[ch]));
                    (len, ch, vec![w, b])
                }
                LayerSpec::SoftmaxHead { classes } => {
                    let w = params.add_glorot(name("weight"), &[classes, ch], ch, classes, rng);
                    let b = params.add_param(name("bias"), Tensor::zeros(&[classes]));
                    (len, classes, vec![w, b])
                }
                LayerSpec::BatchNorm => {
                    let g = params.add_param(name("gamma"), Tensor::new(vec![ch], vec![T::one(); ch])?);
                    let b = params.add_param(name("beta"), Tensor::zeros(&[ch]));
                    let m = params.add_buffer(name("running_mean"), Tensor::zeros(&[ch]));
                    let v = params.add_buffer(name("running_var"), Tensor::new(vec![ch], vec![T::one(); ch])?);
                    (len, ch, vec![g, b, m, v])
                }
                LayerSpec::LeakyRelu { .. } => (len, ch, vec![]),
            };
            layers.push(Layer {
                spec: *spec,
                in_len: len,
                in_ch: ch,
                out_len,
                out_ch,
                idx,
            });
            (len, ch) = (out_len, out_ch);
        }
        Ok(Stack {
            layers,
            in_shape: input,
        })
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.in_shape
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.layers.last().map_or(self.in_shape, |l| (l.out_len, l.out_ch))
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    fn check_input<T: Real>(&self, x: &Array3<T>) -> Result<()> {
        let (_, l, c) = x.dim();
        if (l, c) != self.in_shape || !x.is_standard_layout() {
            return Err(Error::Shape(format!(
                "expected inputs of shape (_, {}, {}), got {:?}",
                self.in_shape.0,
                self.in_shape.1,
                x.dim()
            )));
        }
        Ok(())
    }

    /// Inference pass; batch normalisation uses running statistics.
    pub fn forward<T: Real>(&self, p: &ModelParameters<T>, x: Array3<T>) -> Result<Array3<T>> {
        self.check_input(&x)?;
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(p, &h, None);
        }
        Ok(h)
    }

    /// Training pass; batch normalisation uses batch statistics.
    pub fn forward_train<T: Real>(&self, p: &ModelParameters<T>, x: Array3<T>) -> Result<(Array3<T>, Tape<T>)> {
        self.check_input(&x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(p, &h, Some(&mut caches));
        }
        Ok((h, Tape { caches }))
    }

    /// Propagates `dy` back through the network, accumulating parameter
    /// gradients into `grads`; returns the gradient with respect to the input.
    pub fn backward<T: Real>(
        &self,
        p: &ModelParameters<T>,
        tape: Tape<T>,
        dy: Array3<T>,
        grads: &mut Gradients<T>,
    ) -> Array3<T> {
        let mut d = dy;
        for (layer, cache) in self.layers.iter().zip(tape.caches).rev() {
            d = layer.backward(p, cache, d, grads);
        }
        d
    }

    /// Moves running statistics of batch-norm layers towards the batch
    /// statistics recorded in `tape`.
    pub fn update_running_stats<T: Real>(&self, p: &mut ModelParameters<T>, tape: &Tape<T>, momentum: f64) {
        let m = T::lit(momentum);
        for (layer, cache) in self.layers.iter().zip(&tape.caches) {
            if let Cache::Norm(c) = cache {
                for (i, batch) in [(layer.idx[2], &c.mean), (layer.idx[3], &c.var)] {
                    for (r, &b) in p.value_mut(i).data_mut().iter_mut().zip(batch) {
                        *r = (T::one() - m) * *r + m * b;
                    }
                }
            }
        }
    }
}

fn vec1<T: Real>(t: &Tensor<T>) -> ArrayView1<'_, T> {
    t.view1()
}

fn mat<T: Real>(t: &Tensor<T>) -> ArrayView2<'_, T> {
    t.view2()
}

fn kern<T: Real>(t: &Tensor<T>) -> ArrayView3<'_, T> {
    t.view3().expect("kernels are rank 3")
}

fn grad1<T: Real>(g: &mut Tensor<T>) -> ArrayViewMut1<'_, T> {
    ArrayViewMut1::from(g.data_mut())
}

fn grad2<T: Real>(g: &mut Tensor<T>) -> ArrayViewMut2<'_, T> {
    let shape = (g.shape()[0], g.shape()[1]);
    ArrayViewMut2::from_shape(shape, g.data_mut()).unwrap()
}

fn grad3<T: Real>(g: &mut Tensor<T>) -> ArrayViewMut3<'_, T> {
    let shape = (g.shape()[0], g.shape()[1], g.shape()[2]);
    ArrayViewMut3::from_shape(shape, g.data_mut()).unwrap()
}

fn flat<T: Real>(x: &Array3<T>) -> ArrayView2<'_, T> {
    let (b, l, c) = x.dim();
    x.view().into_shape_with_order((b, l * c)).unwrap()
}

fn rows<T: Real>(x: &Array3<T>) -> ArrayView2<'_, T> {
    let (b, l, c) = x.dim();
    x.view().into_shape_with_order((b * l, c)).unwrap()
}

fn add_bias<T: Real>(x: &mut Array3<T>, b: ArrayView1<T>) {
    for mut lane in x.lanes_mut(Axis(2)) {
        lane += &b;
    }
}

/// Deconvolution cropped to `len_in · stride` positions.
fn deconv_cropped<T: Real>(x: &Array3<T>, k: ArrayView3<T>, stride: usize) -> Array3<T> {
    let full = ops::deconv1d_batch(x.view(), k, stride);
    let off = crop_offset(k.dim().0);
    let n = x.dim().1 * stride;
    full.slice(s![.., off..off + n, ..]).as_standard_layout().into_owned()
}

fn deconv_cropped_backward<T: Real>(
    x: &Array3<T>,
    k: ArrayView3<T>,
    stride: usize,
    dy: &Array3<T>,
    dk: ArrayViewMut3<T>,
) -> Array3<T> {
    let (b, len_in, _) = x.dim();
    let taps = k.dim().0;
    let mut full = Array3::zeros((b, ops::deconv1d_len(len_in, taps, stride), k.dim().2));
    let off = crop_offset(taps);
    full.slice_mut(s![.., off..off + len_in * stride, ..]).assign(dy);
    ops::deconv1d_batch_backward(x.view(), k, stride, full.view(), dk)
}

impl Layer {
    fn forward<T: Real>(&self, p: &ModelParameters<T>, x: &Array3<T>, caches: Option<&mut Vec<Cache<T>>>) -> Array3<T> {
        let b = x.dim().0;
        let (y, cache) = match self.spec {
            LayerSpec::Dense { .. } | LayerSpec::SoftmaxHead { .. } => {
                let (w, bias) = (mat(p.value(self.idx[0])), vec1(p.value(self.idx[1])));
                let input = if matches!(self.spec, LayerSpec::Dense { .. }) { flat(x) } else { rows(x) };
                let y = ops::dense_rows(input, w, bias);
                let y = y.into_shape_with_order((b, self.out_len, self.out_ch)).unwrap();
                (y, caches.is_some().then(|| Cache::Input(x.clone())))
            }
            LayerSpec::Deconv1d { stride, .. } => {
                let mut y = deconv_cropped(x, kern(p.value(self.idx[0])), stride);
                add_bias(&mut y, vec1(p.value(self.idx[1])));
                (y, caches.is_some().then(|| Cache::Input(x.clone())))
            }
            LayerSpec::LeakyRelu { slope } => {
                let s = T::lit(slope);
                (x.mapv(|v| ops::leaky(v, s)), caches.is_some().then(|| Cache::Input(x.clone())))
            }
            LayerSpec::ResidualBlock { slope, .. } => {
                let s = T::lit(slope);
                let mut pre = deconv_cropped(x, kern(p.value(self.idx[0])), 1);
                add_bias(&mut pre, vec1(p.value(self.idx[1])));
                let mut y = pre.mapv(|v| ops::leaky(v, s));
                y += x;
                let cache = caches.is_some().then(|| Cache::Residual { x: x.clone(), pre });
                (y, cache)
            }
            LayerSpec::BatchNorm => {
                let (g, beta) = (vec1(p.value(self.idx[0])), vec1(p.value(self.idx[1])));
                if caches.is_some() {
                    let (y, c) = ops::batch_norm_train(rows(x), g, beta);
                    (y.into_shape_with_order(x.raw_dim()).unwrap(), Some(Cache::Norm(c)))
                } else {
                    let (m, v) = (vec1(p.value(self.idx[2])), vec1(p.value(self.idx[3])));
                    let y = ops::batch_norm_apply(rows(x), g, beta, m, v);
                    (y.into_shape_with_order(x.raw_dim()).unwrap(), None)
                }
            }
        };
        if let (Some(caches), Some(c)) = (caches, cache) {
            caches.push(c);
        }
        y
    }

    fn backward<T: Real>(&self, p: &ModelParameters<T>, cache: Cache<T>, dy: Array3<T>, grads: &mut Gradients<T>) -> Array3<T> {
        let b = dy.dim().0;
        let in_dim = (b, self.in_len, self.in_ch);
        match (self.spec, cache) {
            (LayerSpec::Dense { .. }, Cache::Input(x)) => {
                let w = mat(p.value(self.idx[0]));
                let dy2 = flat(&dy);
                let (dw, db) = grads.pair_mut(self.idx[0], self.idx[1]);
                let dx = ops::dense_rows_backward(flat(&x), w, dy2, grad2(dw), grad1(db));
                dx.into_shape_with_order(in_dim).unwrap()
            }
            (LayerSpec::SoftmaxHead { .. }, Cache::Input(x)) => {
                let w = mat(p.value(self.idx[0]));
                let (dw, db) = grads.pair_mut(self.idx[0], self.idx[1]);
                let dx = ops::dense_rows_backward(rows(&x), w, rows(&dy), grad2(dw), grad1(db));
                dx.into_shape_with_order(in_dim).unwrap()
            }
            (LayerSpec::Deconv1d { stride, .. }, Cache::Input(x)) => {
                accumulate_bias(grads.get_mut(self.idx[1]), &dy);
                deconv_cropped_backward(&x, kern(p.value(self.idx[0])), stride, &dy, grad3(grads.get_mut(self.idx[0])))
            }
            (LayerSpec::LeakyRelu { slope }, Cache::Input(x)) => {
                let s = T::lit(slope);
                let mut dx = dy;
                dx.zip_mut_with(&x, |d, &v| *d *= ops::leaky_grad(v, s));
                dx
            }
            (LayerSpec::ResidualBlock { slope, .. }, Cache::Residual { x, pre }) => {
                let s = T::lit(slope);
                let mut dpre = dy.clone();
                dpre.zip_mut_with(&pre, |d, &v| *d *= ops::leaky_grad(v, s));
                accumulate_bias(grads.get_mut(self.idx[1]), &dpre);
                let mut dx = deconv_cropped_backward(&x, kern(p.value(self.idx[0])), 1, &dpre, grad3(grads.get_mut(self.idx[0])));
                dx += &dy;
                dx
            }
            (LayerSpec::BatchNorm, Cache::Norm(c)) => {
                let g = vec1(p.value(self.idx[0]));
                let (dgamma, dbeta) = grads.pair_mut(self.idx[0], self.idx[1]);
                let dx = ops::batch_norm_train_backward(&c, g, rows(&dy), grad1(dgamma), grad1(dbeta));
                dx.into_shape_with_order(in_dim).unwrap()
            }
            _ => unreachable!("cache kind always matches its layer"),
        }
    }
}

fn accumulate_bias<T: Real>(g: &mut Tensor<T>, dy: &Array3<T>) {
    let sum: Array1<T> = rows(dy).sum_axis(Axis(0));
    let mut gv = grad1(g);
    gv += &sum;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shapes_flow_through_the_stack() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = ModelParameters::<f32>::new(1);
        let specs = [
            LayerSpec::Dense { len: 4, units: 3 },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::ResidualBlock { kernel: 3, slope: 0.2 },
            LayerSpec::Deconv1d { filters: 5, kernel: 3, stride: 2 },
            LayerSpec::BatchNorm,
            LayerSpec::SoftmaxHead { classes: 7 },
        ];
        let net = Stack::build("t", (1, 6), &specs, &mut p, &mut rng).unwrap();
        assert_eq!(net.output_shape(), (8, 7));
        let y = net.forward(&p, Array3::zeros((2, 1, 6))).unwrap();
        assert_eq!(y.dim(), (2, 8, 7));
        assert!(net.forward(&p, Array3::zeros((2, 1, 5))).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for spec in [
            LayerSpec::Deconv1d { filters: 1, kernel: 0, stride: 1 },
            LayerSpec::Deconv1d { filters: 1, kernel: 3, stride: 3 },
            LayerSpec::Deconv1d { filters: 1, kernel: 1, stride: 2 },
            LayerSpec::Dense { len: 0, units: 1 },
            LayerSpec::SoftmaxHead { classes: 0 },
        ] {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }

    #[test]
    fn train_and_eval_agree_without_norm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut p = ModelParameters::<f64>::new(2);
        let specs = [
            LayerSpec::Dense { len: 2, units: 4 },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Deconv1d { filters: 3, kernel: 3, stride: 2 },
        ];
        let net = Stack::build("t", (1, 3), &specs, &mut p, &mut rng).unwrap();
        let x = Array3::from_shape_fn((3, 1, 3), |(a, _, c)| (a as f64) - (c as f64) * 0.5);
        let (y, _) = net.forward_train(&p, x.clone()).unwrap();
        assert_eq!(net.forward(&p, x).unwrap(), y);
    }

    fn check_layer(spec: LayerSpec, input: (usize, usize), seed: u64) -> f64 {
        use crate::nn::grad_check;
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParameters::<f64>::new(seed);
        let net = Stack::build("l", input, &[spec], &mut p, &mut rng).unwrap();
        // nonzero biases and norm shifts so every parameter matters
        for i in 0..p.len() {
            p.value_mut(i).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let batch = 3;
        let x: Vec<f64> = (0..batch * input.0 * input.1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ol, oc) = net.output_shape();
        let r = Array3::from_shape_fn((batch, ol, oc), |_| rng.random_range(-1.0..1.0));
        let loss = |p: &ModelParameters<f64>, x: &[f64]| {
            let xa = Array3::from_shape_vec((batch, input.0, input.1), x.to_vec()).unwrap();
            let (y, _) = net.forward_train(p, xa).unwrap();
            (&y * &r).sum()
        };
        let xa = Array3::from_shape_vec((batch, input.0, input.1), x.clone()).unwrap();
        let (_, tape) = net.forward_train(&p, xa).unwrap();
        let mut g = Gradients::zeros_like(&p);
        let dx = net.backward(&p, tape, r.clone(), &mut g);
        let report = grad_check(&p, &x, &g, dx.as_slice().unwrap(), loss);
        report.max_rel_error
    }

    #[test]
    fn every_layer_kind_passes_finite_differences() {
        let cases = [
            (LayerSpec::Dense { len: 2, units: 3 }, (2, 3)),
            (LayerSpec::Deconv1d { filters: 3, kernel: 3, stride: 2 }, (4, 2)),
            (LayerSpec::Deconv1d { filters: 2, kernel: 3, stride: 1 }, (5, 3)),
            (LayerSpec::LeakyRelu { slope: 0.2 }, (4, 3)),
            (LayerSpec::BatchNorm, (3, 4)),
            (LayerSpec::ResidualBlock { kernel: 3, slope: 0.2 }, (5, 3)),
            (LayerSpec::SoftmaxHead { classes: 5 }, (4, 3)),
        ];
        for (spec, input) in cases {
            for seed in 0..3 {
                let err = check_layer(spec, input, seed);
                assert!(err < 1e-4, "{spec:?} seed {seed}: {err}");
            }
        }
    }
}
