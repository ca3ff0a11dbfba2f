//! Trace autoencoder: coverage traces in, latent behaviour vectors out.
//!
//! The encoder sees each slot as `class / 7`; the decoder emits one
//! eight-way softmax per slot. Training minimises summed per-slot
//! cross-entropy plus the Gaussian KL term.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{kl_gauss_rows, softmax_ce_rows, softmax_rows, LEAKY_SLOPE};
use crate::nn::{Gradients, LayerSpec, ModelParameters, Real, RmsProp, Stack, Tensor};
use crate::trace::{CoverageTrace, NUM_CLASSES};

/// Default latent dimension.
pub const LATENT_DIM: usize = 16;

/// A point in behaviour space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentVector(pub Vec<f32>);

impl LatentVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Instability("latent vector has non-finite entries".into()));
        }
        Ok(LatentVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        LatentVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    /// `u32` length prefix followed by little-endian `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let n = b
            .get(..4)
            .map(|h| u32::from_le_bytes(h.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::Shape("latent vector missing length prefix".into()))?;
        if b.len() != 4 + 4 * n {
            return Err(Error::Shape(format!("latent vector declares {n} values, got {} bytes", b.len() - 4)));
        }
        Self::new(b[4..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Diagonal Gaussian produced by the encoder; `logvar` is the log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Vec<f32>,
    pub logvar: Vec<f32>,
}

/// `z = mu + exp(logvar / 2) ⊙ eps`.
pub fn reparameterize(d: &LatentDistribution, eps: &[f32]) -> Result<LatentVector> {
    if eps.len() != d.mu.len() {
        return Err(Error::Shape(format!("eps has {} values, latent dim is {}", eps.len(), d.mu.len())));
    }
    LatentVector::new(
        d.mu.iter()
            .zip(&d.logvar)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub map_size: usize,
    pub latent_dim: usize,
    /// Encoder widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl VaeSpec {
    pub fn desk(map_size: usize) -> Self {
        VaeSpec {
            map_size,
            latent_dim: LATENT_DIM,
            hidden: vec![512, 128],
            leaky_slope: LEAKY_SLOPE,
        }
    }

    fn encoder_layers(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        for &h in &self.hidden {
            v.push(LayerSpec::Dense { len: 1, units: h });
            v.push(LayerSpec::LeakyRelu { slope: self.leaky_slope });
        }
        v.push(LayerSpec::Dense { len: 1, units: 2 * self.latent_dim });
        v
    }

    fn decoder_layers(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        for &h in self.hidden.iter().rev() {
            v.push(LayerSpec::Dense { len: 1, units: h });
            v.push(LayerSpec::LeakyRelu { slope: self.leaky_slope });
        }
        v.push(LayerSpec::Dense { len: self.map_size, units: NUM_CLASSES });
        v
    }
}

/// Loss of one training batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    /// Mean over the batch of reconstruction plus KL.
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Clone, Debug)]
pub struct Vae<T = f32> {
    spec: VaeSpec,
    encoder: Stack,
    decoder: Stack,
    pub params: ModelParameters<T>,
}

impl<T: Real> Vae<T> {
    pub fn new(spec: VaeSpec, seed: u64) -> Result<Self> {
        if spec.map_size == 0 || spec.latent_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::config("vae", "dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParameters::new(seed);
        let encoder = Stack::build("vae.enc", (1, spec.map_size), &spec.encoder_layers(), &mut params, &mut rng)?;
        let decoder = Stack::build("vae.dec", (1, spec.latent_dim), &spec.decoder_layers(), &mut params, &mut rng)?;
        Ok(Vae {
            spec,
            encoder,
            decoder,
            params,
        })
    }

    /// Replaces the parameters, which must have this model's layout.
    pub fn with_params(mut self, params: ModelParameters<T>) -> Result<Self> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(self)
    }

    pub fn spec(&self) -> &VaeSpec {
        &self.spec
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn cast<U: Real>(&self) -> Vae<U> {
        Vae {
            spec: self.spec.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            params: self.params.cast(),
        }
    }

    fn inputs(&self, traces: &[&CoverageTrace]) -> Result<Array3<T>> {
        let m = self.spec.map_size;
        let mut x = Array3::zeros((traces.len(), 1, m));
        let scale = T::lit(1.0 / (NUM_CLASSES - 1) as f64);
        for (mut row, t) in x.outer_iter_mut().zip(traces) {
            if t.map_size() != m {
                return Err(Error::Shape(format!("trace has {} slots, model expects {m}", t.map_size())));
            }
            row.iter_mut()
                .zip(t.classes())
                .for_each(|(v, &c)| *v = T::lit(c as f64) * scale);
        }
        Ok(x)
    }

    /// Means and log-variances, one row per trace.
    pub fn encode_batch(&self, traces: &[&CoverageTrace]) -> Result<(Array2<T>, Array2<T>)> {
        let h = self.encoder.forward(&self.params, self.inputs(traces)?)?;
        Ok(split_heads(&h, self.spec.latent_dim))
    }

    pub fn encode(&self, trace: &CoverageTrace) -> Result<LatentDistribution> {
        let (mu, lv) = self.encode_batch(&[trace])?;
        let d = LatentDistribution {
            mu: mu.row(0).iter().map(|v| v.as_f64() as f32).collect(),
            logvar: lv.row(0).iter().map(|v| v.as_f64() as f32).collect(),
        };
        if d.mu.iter().chain(&d.logvar).any(|v| !v.is_finite()) {
            return Err(Error::Instability("encoder produced non-finite output".into()));
        }
        Ok(d)
    }

    /// Latent mean of each trace; no sampling.
    pub fn embed_batch(&self, traces: &[&CoverageTrace]) -> Result<Vec<LatentVector>> {
        let mut out = Vec::with_capacity(traces.len());
        for chunk in traces.chunks(64) {
            let (mu, _) = self.encode_batch(chunk)?;
            for row in mu.rows() {
                out.push(LatentVector::new(row.iter().map(|v| v.as_f64() as f32).collect())?);
            }
        }
        Ok(out)
    }

    pub fn embed(&self, trace: &CoverageTrace) -> Result<LatentVector> {
        Ok(self.embed_batch(&[trace])?.pop().unwrap())
    }

    /// Per-slot class distributions, shape `(map_size, 8)`.
    pub fn decode(&self, z: &LatentVector) -> Result<Tensor<T>> {
        if z.dim() != self.spec.latent_dim {
            return Err(Error::Shape(format!("latent has {} values, expected {}", z.dim(), self.spec.latent_dim)));
        }
        let x = Array3::from_shape_fn((1, 1, z.dim()), |(_, _, i)| T::lit(z.0[i] as f64));
        let logits = self.decoder.forward(&self.params, x)?;
        let m = self.spec.map_size;
        let p = softmax_rows(logits.into_shape_with_order((m, NUM_CLASSES)).unwrap().view());
        let t = crate::nn::tensor_from_array(p);
        t.check_finite("decoder output")?;
        Ok(t)
    }

    /// Loss of a single trace with fixed reparameterisation noise.
    pub fn loss(&self, trace: &CoverageTrace, eps: &[T]) -> Result<f64> {
        let eps = Array2::from_shape_vec((1, eps.len()), eps.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.loss_and_grads(&[trace], &eps, false)?.0.total)
    }

    /// Mean batch loss and, if requested, its parameter gradients.
    pub fn loss_and_grads(
        &self,
        traces: &[&CoverageTrace],
        eps: &Array2<T>,
        with_grads: bool,
    ) -> Result<(VaeLoss, Option<Gradients<T>>)> {
        let b = traces.len();
        let l = self.spec.latent_dim;
        let m = self.spec.map_size;
        if eps.dim() != (b, l) {
            return Err(Error::Shape(format!("eps must be {b}x{l}, got {:?}", eps.dim())));
        }
        let (h, enc_tape) = self.encoder.forward_train(&self.params, self.inputs(traces)?)?;
        let (mu, lv) = split_heads(&h, l);
        let scale = lv.mapv(|v| (v * T::lit(0.5)).exp());
        let z = &mu + &(&scale * eps);
        let (logits, dec_tape) = self.decoder.forward_train(&self.params, z.clone().into_shape_with_order((b, 1, l)).unwrap())?;
        let targets: Vec<usize> = traces.iter().flat_map(|t| t.classes().iter().map(|&c| c as usize)).collect();
        let (rec, dlogits) = softmax_ce_rows(logits.view().into_shape_with_order((b * m, NUM_CLASSES)).unwrap(), &targets);
        let (kl, dmu_kl, dlv_kl) = kl_gauss_rows(mu.view(), lv.view());
        let inv_b = 1.0 / b as f64;
        let loss = VaeLoss {
            total: (rec + kl).as_f64() * inv_b,
            reconstruction: rec.as_f64() * inv_b,
            kl: kl.as_f64() * inv_b,
        };
        if !loss.total.is_finite() {
            return Err(Error::Instability(format!("VAE loss is {}", loss.total)));
        }
        if !with_grads {
            return Ok((loss, None));
        }
        let ib = T::lit(inv_b);
        let mut grads = Gradients::zeros_like(&self.params);
        let dlogits = (dlogits * ib).into_shape_with_order((b, m, NUM_CLASSES)).unwrap();
        let dz = self.decoder.backward(&self.params, dec_tape, dlogits, &mut grads);
        let dz = dz.into_shape_with_order((b, l)).unwrap();
        let dmu = &dz + &(dmu_kl * ib);
        let half = T::lit(0.5);
        let dlv = &dz * eps * &scale * half + &(dlv_kl * ib);
        let mut dh = Array3::zeros((b, 1, 2 * l));
        dh.slice_mut(s![.., 0, ..l]).assign(&dmu);
        dh.slice_mut(s![.., 0, l..]).assign(&dlv);
        self.encoder.backward(&self.params, enc_tape, dh, &mut grads);
        Ok((loss, Some(grads)))
    }

    /// One optimizer step on `traces` with fresh standard-normal noise.
    pub fn train_step(&mut self, traces: &[&CoverageTrace], rng: &mut impl Rng, lr: f64, opt: &RmsProp) -> Result<VaeLoss> {
        let eps = Array2::from_shape_simple_fn((traces.len(), self.spec.latent_dim), || {
            T::lit(rng.sample::<f64, _>(StandardNormal))
        });
        let (loss, grads) = self.loss_and_grads(traces, &eps, true)?;
        opt.step(&mut self.params, &grads.unwrap(), lr)?;
        Ok(loss)
    }
}

fn split_heads<T: Real>(h: &Array3<T>, l: usize) -> (Array2<T>, Array2<T>) {
    let h2 = h.index_axis(Axis(1), 0);
    (h2.slice(s![.., ..l]).to_owned(), h2.slice(s![.., l..]).to_owned())
}

/// Length of the loss history inspected by [`non_convergence`].
pub const CONVERGENCE_WINDOW: usize = 500;

/// True when the loss has not dropped by at least 10% over the first
/// [`CONVERGENCE_WINDOW`] steps, comparing the means of the first and last
/// 50 steps of that window. `None` while the history is shorter.
pub fn non_convergence(history: &[f64]) -> Option<bool> {
    let w = history.get(..CONVERGENCE_WINDOW)?;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some(mean(&w[w.len() - 50..]) > 0.9 * mean(&w[..50]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VaeSpec {
        VaeSpec {
            map_size: 8,
            latent_dim: 2,
            hidden: vec![4],
            leaky_slope: 0.2,
        }
    }

    fn trace(classes: &[u8]) -> CoverageTrace {
        CoverageTrace::from_classes(classes.to_vec()).unwrap()
    }

    #[test]
    fn zero_model_is_neutral() {
        let mut vae = Vae::<f64>::new(VaeSpec::desk(64), 0).unwrap();
        vae.params.zero_all();
        let t = trace(&[3; 64]);
        let d = vae.encode(&t).unwrap();
        assert!(d.mu.iter().chain(&d.logvar).all(|&v| v == 0.0));
        let p = vae.decode(&LatentVector::zeros(16)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.125).abs() < 1e-12));
        let loss = vae.loss(&t, &[0.3; 16]).unwrap();
        assert!((loss - 64.0 * 8f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn reparameterize_examples() {
        let d = LatentDistribution { mu: vec![0.0, 0.0], logvar: vec![0.0, 0.0] };
        assert_eq!(reparameterize(&d, &[0.7, -1.2]).unwrap().0, vec![0.7, -1.2]);
        let d = LatentDistribution { mu: vec![2.0], logvar: vec![5.0] };
        assert_eq!(reparameterize(&d, &[0.0]).unwrap().0, vec![2.0]);
        let d = LatentDistribution { mu: vec![1.0], logvar: vec![2.0 * 2f32.ln()] };
        assert!((reparameterize(&d, &[0.5]).unwrap().0[0] - 2.0).abs() < 1e-6);
        assert!(reparameterize(&d, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn embed_is_mu_and_deterministic() {
        let vae = Vae::<f32>::new(small(), 4).unwrap();
        let t = trace(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let d = vae.encode(&t).unwrap();
        let z = vae.embed(&t).unwrap();
        assert_eq!(reparameterize(&d, &[0.0, 0.0]).unwrap(), z);
        assert_eq!(vae.embed(&t).unwrap(), z);
        assert_eq!(z.dim(), 2);
        assert!(vae.embed(&trace(&[0; 4])).is_err());
    }

    #[test]
    fn decode_rows_are_distributions() {
        let vae = Vae::<f32>::new(VaeSpec::desk(32), 5).unwrap();
        let p = vae.decode(&LatentVector(vec![1.5; 16])).unwrap();
        assert_eq!(p.shape(), &[32, 8]);
        for row in p.view2().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_golden() {
        let vae = Vae::<f32>::new(small(), 11).unwrap();
        let p = vae.decode(&LatentVector(vec![0.5, -1.0])).unwrap();
        let golden = [0.163_705_f32, 0.106_126, 0.100_338, 0.133_168, 0.100_871, 0.140_339, 0.120_979, 0.134_474];
        for (got, want) in p.data()[..8].iter().zip(golden) {
            assert!((got - want).abs() < 1e-5, "{:?}", &p.data()[..8]);
        }
    }

    #[test]
    fn latent_bytes_roundtrip() {
        let z = LatentVector(vec![1.0, -0.5, 3.25]);
        let b = z.to_bytes();
        assert_eq!(&b[..4], &[3, 0, 0, 0]);
        assert_eq!(LatentVector::from_bytes(&b).unwrap(), z);
        assert!(LatentVector::from_bytes(&b[..7]).is_err());
    }

    #[test]
    fn non_convergence_flag() {
        assert_eq!(non_convergence(&[1.0; 100]), None);
        assert_eq!(non_convergence(&[1.0; 500]), Some(true));
        let falling: Vec<f64> = (0..500).map(|i| 1.0 - i as f64 / 1000.0).collect();
        assert_eq!(non_convergence(&falling), Some(false));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let spec = VaeSpec {
            map_size: 8,
            latent_dim: 3,
            hidden: vec![6, 4],
            leaky_slope: 0.2,
        };
        let vae = Vae::<f64>::new(spec, 21).unwrap();
        let a = trace(&[0, 1, 7, 3, 0, 0, 2, 5]);
        let b = trace(&[4, 4, 0, 1, 6, 0, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = Array2::from_shape_simple_fn((2, 3), || rng.sample::<f64, _>(StandardNormal));
        let (_, g) = vae.loss_and_grads(&[&a, &b], &eps, true).unwrap();
        let report = crate::nn::grad_check(&vae.params, &[], &g.unwrap(), &[], |p, _| {
            let v = vae.clone().with_params(p.clone()).unwrap();
            v.loss_and_grads(&[&a, &b], &eps, false).unwrap().0.total
        });
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }
}
