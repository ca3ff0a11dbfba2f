//! Input generator: latent vector to a distribution over byte strings.
//!
//! A dense layer lifts `z` to `len0 × filters`, a stack of kernel-3
//! transposed convolutions doubles the length until it reaches 512, and a
//! per-position head emits 129 logits: class 0 is padding and class `c > 0`
//! stands for the ASCII byte `c − 1`.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{softmax_ce_rows, LEAKY_SLOPE};
use crate::nn::{tensor_from_array, Gradients, LayerSpec, ModelParameters, Real, RmsProp, Stack, Tensor};
use crate::vae::LatentVector;

/// Output length in positions.
pub const STR_LEN_MAX: usize = 512;

/// Padding plus the 128 ASCII codes.
pub const DICT_SIZE: usize = 129;

/// Default standard deviation of the exploration noise added to generator inputs.
pub const INPUT_NOISE_SIGMA: f64 = 0.1;

/// Generated program input: at most [`STR_LEN_MAX`] bytes, all ASCII.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct GeneratedString(Vec<u8>);

impl GeneratedString {
    pub fn new(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() > STR_LEN_MAX {
            return Err(Error::InputTooLong {
                len: bytes.len(),
                max: STR_LEN_MAX,
            });
        }
        if let Some(b) = bytes.iter().find(|&&b| b >= 128) {
            return Err(Error::Shape(format!("byte {b:#04x} is outside the 7-bit alphabet")));
        }
        Ok(GeneratedString(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Class targets for `positions` outputs, padded with class 0.
    pub fn classes(&self, positions: usize) -> Vec<usize> {
        let mut c: Vec<usize> = self.0.iter().map(|&b| b as usize + 1).collect();
        c.resize(positions, 0);
        c
    }
}

/// Raw per-position logits of one forward pass, shape `(positions, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOutput {
    pub logits: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    /// Length after the initial dense layer.
    pub len0: usize,
    pub filters: usize,
    /// Transposed-convolution blocks: the stride-2 upsamplers plus stride-1 residual blocks.
    pub deconv_blocks: usize,
    pub out_len: usize,
    pub dict_size: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub batch_norm: bool,
}

impl GeneratorSpec {
    pub fn desk(latent_dim: usize) -> Self {
        GeneratorSpec {
            latent_dim,
            len0: 16,
            filters: 32,
            deconv_blocks: 10,
            out_len: STR_LEN_MAX,
            dict_size: DICT_SIZE,
            kernel: 3,
            leaky_slope: LEAKY_SLOPE,
            batch_norm: false,
        }
    }

    fn upsamples(&self) -> Result<usize> {
        let ratio = self.out_len / self.len0.max(1);
        if self.len0 == 0 || self.out_len % self.len0 != 0 || !ratio.is_power_of_two() {
            return Err(Error::config(
                "deconv_blocks",
                format!("output length {} is not len0 {} times a power of two", self.out_len, self.len0),
            ));
        }
        let ups = ratio.trailing_zeros() as usize;
        if self.deconv_blocks < ups {
            return Err(Error::config(
                "deconv_blocks",
                format!("{} blocks cannot upsample {} to {} (need {ups})", self.deconv_blocks, self.len0, self.out_len),
            ));
        }
        Ok(ups)
    }

    /// Layer plan. Residual blocks are spread evenly over the upsampling
    /// stages, earlier stages taking the remainder, and each stage runs its
    /// residual blocks before its upsampler.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        let ups = self.upsamples()?;
        let residual = self.deconv_blocks - ups;
        let slope = self.leaky_slope;
        let mut v = vec![
            LayerSpec::Dense {
                len: self.len0,
                units: self.filters,
            },
            LayerSpec::LeakyRelu { slope },
        ];
        let norm = |v: &mut Vec<LayerSpec>| {
            if self.batch_norm {
                v.push(LayerSpec::BatchNorm);
            }
        };
        norm(&mut v);
        let stages = ups.max(1);
        for stage in 0..stages {
            let n = residual / stages + usize::from(stage < residual % stages);
            for _ in 0..n {
                v.push(LayerSpec::ResidualBlock {
                    kernel: self.kernel,
                    slope,
                });
                norm(&mut v);
            }
            if stage < ups {
                v.push(LayerSpec::Deconv1d {
                    filters: self.filters,
                    kernel: self.kernel,
                    stride: 2,
                });
                v.push(LayerSpec::LeakyRelu { slope });
                norm(&mut v);
            }
        }
        v.push(LayerSpec::SoftmaxHead { classes: self.dict_size });
        Ok(v)
    }
}

/// Loss of one training batch, averaged over examples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GnnLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub mse: f64,
}

/// One training pair: the string to reproduce from `z_input`, and the
/// embedding `z_true` of the behaviour that string produced.
#[derive(Clone, Copy, Debug)]
pub struct GnnExample<'a> {
    pub z_input: &'a LatentVector,
    pub target: &'a GeneratedString,
    pub z_true: &'a LatentVector,
}

/// Weighting of the latent reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MseTerm {
    pub weight: f64,
    pub exponent: f64,
}

impl Default for MseTerm {
    fn default() -> Self {
        MseTerm { weight: 1.0, exponent: 2.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T = f32> {
    spec: GeneratorSpec,
    net: Stack,
    pub params: ModelParameters<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        let layers = spec.layers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParameters::new(seed);
        let net = Stack::build("gnn", (1, spec.latent_dim), &layers, &mut params, &mut rng)?;
        Ok(Generator { spec, net, params })
    }

    pub fn with_params(mut self, params: ModelParameters<T>) -> Result<Self> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(self)
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.net.specs()
    }

    fn inputs(&self, zs: &[&LatentVector]) -> Result<Array3<T>> {
        let l = self.spec.latent_dim;
        if let Some(z) = zs.iter().find(|z| z.dim() != l) {
            return Err(Error::Shape(format!("latent has {} values, generator expects {l}", z.dim())));
        }
        Ok(Array3::from_shape_fn((zs.len(), 1, l), |(b, _, i)| T::lit(zs[b].0[i] as f64)))
    }

    /// Logits for a batch, shape `(batch, out_len, dict_size)`.
    pub fn forward_batch(&self, zs: &[&LatentVector]) -> Result<Array3<T>> {
        let y = self.net.forward(&self.params, self.inputs(zs)?)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability("generator produced non-finite logits".into()));
        }
        Ok(y)
    }

    /// Mean loss over `batch` and, if requested, the parameter gradients and
    /// the gradient with respect to each `z_input`.
    pub fn loss_and_grads(
        &self,
        batch: &[GnnExample<'_>],
        mse: MseTerm,
        with_grads: bool,
    ) -> Result<(GnnLoss, Option<(Gradients<T>, Array2<T>)>)> {
        let zs: Vec<&LatentVector> = batch.iter().map(|e| e.z_input).collect();
        let z_true: Vec<&LatentVector> = batch.iter().map(|e| e.z_true).collect();
        let targets: Vec<&GeneratedString> = batch.iter().map(|e| e.target).collect();
        let z_in = self.inputs(&zs)?;
        let z_in = z_in.into_shape_with_order((batch.len(), self.spec.latent_dim)).unwrap();
        let z_true = self.inputs(&z_true)?;
        let z_true = z_true.into_shape_with_order((batch.len(), self.spec.latent_dim)).unwrap();
        self.loss_and_grads_arrays(z_in, &targets, z_true.view(), mse, with_grads)
    }

    /// As [`Generator::loss_and_grads`] with latent rows given as matrices.
    pub fn loss_and_grads_arrays(
        &self,
        z_in: Array2<T>,
        targets: &[&GeneratedString],
        z_true: ArrayView2<T>,
        mse: MseTerm,
        with_grads: bool,
    ) -> Result<(GnnLoss, Option<(Gradients<T>, Array2<T>)>)> {
        let b = targets.len();
        let (n, c, l) = (self.spec.out_len, self.spec.dict_size, self.spec.latent_dim);
        if z_in.dim() != (b, l) || z_true.dim() != (b, l) {
            return Err(Error::Shape(format!(
                "latent batches {:?} and {:?} do not match {b}x{l}",
                z_in.dim(),
                z_true.dim()
            )));
        }
        if let Some(t) = targets.iter().find(|t| t.len() > n) {
            return Err(Error::InputTooLong { len: t.len(), max: n });
        }
        let p = mse.exponent;
        let mut mse_sum = 0.0;
        let mut dz_mse = Array2::<T>::zeros((b, l));
        for ((d_out, &t), &x) in dz_mse.iter_mut().zip(&z_true).zip(&z_in) {
            let d = (t - x).as_f64();
            mse_sum += d.abs().powf(p);
            if d != 0.0 {
                *d_out = T::lit(-mse.weight * p * d.abs().powf(p - 1.0) * d.signum() / (l * b) as f64);
            }
        }
        let x = z_in.into_shape_with_order((b, 1, l)).unwrap();
        let (logits, tape) = self.net.forward_train(&self.params, x)?;
        let classes: Vec<usize> = targets.iter().flat_map(|t| t.classes(n)).collect();
        let (ce, dlogits) = softmax_ce_rows(logits.view().into_shape_with_order((b * n, c)).unwrap(), &classes);
        let inv_b = 1.0 / b as f64;
        let loss = GnnLoss {
            total: (ce.as_f64() + mse.weight * mse_sum / l as f64) * inv_b,
            cross_entropy: ce.as_f64() * inv_b,
            mse: mse_sum / l as f64 * inv_b,
        };
        if !loss.total.is_finite() {
            return Err(Error::Instability(format!("generator loss is {}", loss.total)));
        }
        if !with_grads {
            return Ok((loss, None));
        }
        let mut grads = Gradients::zeros_like(&self.params);
        let dlogits = (dlogits * T::lit(inv_b)).into_shape_with_order((b, n, c)).unwrap();
        let dz = self.net.backward(&self.params, tape, dlogits, &mut grads);
        let dz = dz.into_shape_with_order((b, l)).unwrap() + dz_mse;
        Ok((loss, Some((grads, dz))))
    }

    pub fn train_step(&mut self, batch: &[GnnExample<'_>], mse: MseTerm, lr: f64, opt: &RmsProp) -> Result<GnnLoss> {
        let (loss, grads) = self.loss_and_grads(batch, mse, true)?;
        opt.step(&mut self.params, &grads.unwrap().0, lr)?;
        Ok(loss)
    }
}

impl Generator<f32> {
    pub fn forward(&self, z: &LatentVector) -> Result<GeneratorOutput> {
        let y = self.forward_batch(&[z])?;
        let (_, n, c) = y.dim();
        Ok(GeneratorOutput {
            logits: tensor_from_array(y.into_shape_with_order((n, c)).unwrap()),
        })
    }

    /// Sampled strings for a batch of latent inputs.
    pub fn generate(&self, zs: &[&LatentVector], rng: &mut impl Rng) -> Result<Vec<GeneratedString>> {
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(16) {
            let y = self.forward_batch(chunk)?;
            for row in y.outer_iter() {
                out.push(sample_rows(row, rng));
            }
        }
        Ok(out)
    }
}

/// Adds `N(0, sigma²)` noise to every coordinate.
pub fn perturb_input(z: &LatentVector, sigma: f64, rng: &mut impl Rng) -> LatentVector {
    if sigma == 0.0 {
        return z.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and nonnegative");
    LatentVector(z.0.iter().map(|&v| (v as f64 + noise.sample(rng)) as f32).collect())
}

/// Draws one class per position from its softmax, drops padding and maps
/// class `c` to byte `c − 1`.
pub fn sample_string(out: &GeneratorOutput, rng: &mut impl Rng) -> GeneratedString {
    sample_rows(out.logits.view2(), rng)
}

fn sample_rows<T: Real>(logits: ArrayView2<T>, rng: &mut impl Rng) -> GeneratedString {
    let mut bytes = Vec::new();
    let mut probs = Vec::with_capacity(logits.ncols());
    for row in logits.rows() {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
        probs.clear();
        probs.extend(row.iter().map(|v| (v.as_f64() - m).exp()));
        let total: f64 = probs.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut class = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                class = i;
                break;
            }
        }
        if class > 0 {
            bytes.push((class - 1) as u8);
        }
    }
    GeneratedString(bytes)
}

/// Most likely class per position; diagnostic only.
pub fn argmax_string(out: &GeneratorOutput) -> GeneratedString {
    let mut bytes = Vec::new();
    for row in out.logits.view2().rows() {
        let (class, _) = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        if class > 0 {
            bytes.push((class - 1) as u8);
        }
    }
    GeneratedString(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forced(pos0: Option<usize>) -> GeneratorOutput {
        let mut logits = Tensor::<f32>::zeros(&[STR_LEN_MAX, DICT_SIZE]);
        for (i, row) in logits.data_mut().chunks_mut(DICT_SIZE).enumerate() {
            let hot = if i == 0 { pos0.unwrap_or(0) } else { 0 };
            row[hot] = 1e4;
        }
        GeneratorOutput { logits }
    }

    #[test]
    fn desk_plan_reaches_full_length() {
        let spec = GeneratorSpec::desk(16);
        let layers = spec.layers().unwrap();
        let ups = layers.iter().filter(|l| matches!(l, LayerSpec::Deconv1d { .. })).count();
        let res = layers.iter().filter(|l| matches!(l, LayerSpec::ResidualBlock { .. })).count();
        assert_eq!((ups, res), (5, 5));
        let mut paper = spec.clone();
        paper.deconv_blocks = 42;
        let res = paper.layers().unwrap().iter().filter(|l| matches!(l, LayerSpec::ResidualBlock { .. })).count();
        assert_eq!(res, 37);
        let mut short = spec;
        short.deconv_blocks = 4;
        assert!(matches!(short.layers(), Err(Error::Config { .. })));
    }

    #[test]
    fn forward_shape_and_zero_model() {
        let mut g = Generator::<f32>::new(GeneratorSpec::desk(16), 3).unwrap();
        let out = g.forward(&LatentVector(vec![0.3; 16])).unwrap();
        assert_eq!(out.logits.shape(), &[512, 129]);
        g.params.zero_all();
        let out = g.forward(&LatentVector(vec![0.3; 16])).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        assert!(g.forward(&LatentVector(vec![0.3; 15])).is_err());
    }

    #[test]
    fn sampling_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_string(&forced(None), &mut rng).is_empty());
        assert_eq!(sample_string(&forced(Some(b'a' as usize + 1)), &mut rng).as_bytes(), b"a");
        assert_eq!(argmax_string(&forced(Some(b'a' as usize + 1))).as_bytes(), b"a");
    }

    #[test]
    fn sampling_is_reproducible_and_ascii() {
        let g = Generator::<f32>::new(GeneratorSpec::desk(16), 3).unwrap();
        let out = g.forward(&LatentVector(vec![1.0; 16])).unwrap();
        let a = sample_string(&out, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_string(&out, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.as_bytes().iter().all(|&b| b < 128));
        assert!(a.len() <= 512);
    }

    #[test]
    fn perturbation() {
        let z = LatentVector(vec![0.5; 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb_input(&z, 0.0, &mut rng), z);
        let a = perturb_input(&z, 0.1, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, perturb_input(&z, 0.1, &mut ChaCha8Rng::seed_from_u64(9)));
        assert_ne!(a, z);
    }

    #[test]
    fn loss_examples() {
        let mut g = Generator::<f64>::new(GeneratorSpec::desk(16), 3).unwrap();
        g.params.zero_all();
        // bias the head so that padding is certain everywhere
        let head_bias = g.params.len() - 1;
        g.params.value_mut(head_bias).data_mut()[0] = 1e4;
        let empty = GeneratedString::default();
        let z = LatentVector(vec![0.2; 16]);
        let ex = GnnExample { z_input: &z, target: &empty, z_true: &z };
        let (loss, _) = g.loss_and_grads(&[ex], MseTerm::default(), false).unwrap();
        assert!(loss.total.abs() < 1e-9);

        let mut shifted = z.clone();
        shifted.0[0] += 1.0;
        let ex = GnnExample { z_input: &z, target: &empty, z_true: &shifted };
        let (loss, _) = g.loss_and_grads(&[ex], MseTerm::default(), false).unwrap();
        assert!((loss.total - 0.0625).abs() < 1e-6, "{loss:?}");
        let (loss, _) = g.loss_and_grads(&[ex], MseTerm { weight: 0.0, exponent: 2.0 }, false).unwrap();
        assert_eq!(loss.total, loss.cross_entropy);
    }

    #[test]
    fn generated_string_validation() {
        assert!(GeneratedString::new(vec![b'x'; 513]).is_err());
        assert!(GeneratedString::new(vec![200]).is_err());
        let s = GeneratedString::new(b"ab".to_vec()).unwrap();
        assert_eq!(s.classes(4), vec![98, 99, 0, 0]);
    }

    pub(crate) fn reduced_spec() -> GeneratorSpec {
        GeneratorSpec {
            latent_dim: 4,
            len0: 4,
            filters: 8,
            deconv_blocks: 4,
            out_len: 16,
            ..GeneratorSpec::desk(4)
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let g = Generator::<f64>::new(reduced_spec(), 8).unwrap();
        let z_true = Array2::from_shape_vec((2, 4), vec![0.3, -0.2, 0.9, 0.0, -1.0, 0.4, 0.1, 0.5]).unwrap();
        let a = GeneratedString::new(b"{\"a\":1}".to_vec()).unwrap();
        let b = GeneratedString::new(b"<x/>".to_vec()).unwrap();
        let targets = [&a, &b];
        let z_in = vec![0.5, -0.7, 1.1, 0.2, -0.4, 0.8, -1.3, 0.6];
        let eval = |p: &ModelParameters<f64>, x: &[f64], grads: bool| {
            let g = g.clone().with_params(p.clone()).unwrap();
            let zi = Array2::from_shape_vec((2, 4), x.to_vec()).unwrap();
            g.loss_and_grads_arrays(zi, &targets, z_true.view(), MseTerm::default(), grads).unwrap()
        };
        let (_, grads) = eval(&g.params, &z_in, true);
        let (pg, dz) = grads.unwrap();
        let report = crate::nn::grad_check(&g.params, &z_in, &pg, dz.as_slice().unwrap(), |p, x| eval(p, x, false).0.total);
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
