//! Encoder/decoder pair trained on real data. Supplies the latent space of
//! the latent-error detector and the reconstruction + perceptual distance of
//! the autoencoder-distance detector.
//!
//! The perceptual distance is a stand-in for a learned perceptual metric: the
//! sum over encoder layers of the mean squared difference between
//! unit-L2-normalized activations.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dot, Activation, Dense, Gradients, Mlp, Sgd, Tape};
use crate::rng::stream;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoEncoder {
    encoder: Mlp,
    decoder: Mlp,
}

impl AutoEncoder {
    /// `d → hidden (tanh) → latent` and back.
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, latent: usize, rng: &mut R) -> Result<Self> {
        if latent >= dim {
            return Err(Error::config(format!("latent dim {latent} must be below data dim {dim}")));
        }
        Ok(Self {
            encoder: Mlp::random(&[dim, hidden, latent], Activation::Tanh, Activation::Identity, rng),
            decoder: Mlp::random(&[latent, hidden, dim], Activation::Tanh, Activation::Identity, rng),
        })
    }

    /// Linear identity pair with `latent == dim`; a degenerate fixture for
    /// tests.
    pub fn identity(dim: usize) -> Self {
        let eye = |n: usize| {
            let mut l = Dense::zeros(n, n, Activation::Identity);
            for i in 0..n {
                l.weight[i * n + i] = 1.0;
            }
            l
        };
        Self {
            encoder: Mlp::from_layers(vec![eye(dim)]).expect("square layer"),
            decoder: Mlp::from_layers(vec![eye(dim)]).expect("square layer"),
        }
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        Error::check_dim(encoder.output_dim(), decoder.input_dim())?;
        Error::check_dim(encoder.input_dim(), decoder.output_dim())?;
        Ok(Self { encoder, decoder })
    }

    pub fn dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.forward(x)
    }

    /// Decoder output without clamping.
    pub fn decode_raw(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(z)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_raw(z)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// `D(E(x))`, clamped.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(x)?)
    }

    /// `vᵀ ∂D(E(x))/∂x` through the clamp.
    pub fn ae_vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(), v.len())?;
        let et = self.encoder.forward_tape(x)?;
        let dt = self.decoder.forward_tape(et.output())?;
        let masked = clamp_mask(dt.output(), v);
        let (gz, _) = self.decoder.backward(&dt, &masked, false);
        Ok(self.encoder.backward(&et, &gz, false).0)
    }

    pub fn encoder_vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.encoder.input_vjp(x, v)
    }

    pub fn decoder_vjp(&self, z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.decoder.input_vjp(z, v)
    }

    /// Perceptual distance between `x` and `y`.
    pub fn perceptual_distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Error::check_dim(x.len(), y.len())?;
        let tx = self.encoder.forward_tape(x)?;
        let ty = self.encoder.forward_tape(y)?;
        Ok(self.layer_terms(&tx, &ty).0)
    }

    /// Distance and its gradients with respect to both arguments.
    pub fn perceptual_distance_grad(&self, x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        Error::check_dim(x.len(), y.len())?;
        let tx = self.encoder.forward_tape(x)?;
        let ty = self.encoder.forward_tape(y)?;
        let (dist, cx, cy) = self.layer_terms(&tx, &ty);
        let ref_x: Vec<Option<&[f64]>> = cx.iter().map(|c| Some(c.as_slice())).collect();
        let ref_y: Vec<Option<&[f64]>> = cy.iter().map(|c| Some(c.as_slice())).collect();
        let gx = self.encoder.backward_layers(&tx, &ref_x, false).0;
        let gy = self.encoder.backward_layers(&ty, &ref_y, false).0;
        Ok((dist, gx, gy))
    }

    /// Distance plus per-layer cotangents on the activations of each side.
    fn layer_terms(&self, tx: &Tape, ty: &Tape) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut total = 0.0;
        let mut cx = Vec::new();
        let mut cy = Vec::new();
        for l in 0..self.encoder.layers().len() {
            let (hx, hy) = (tx.layer(l), ty.layer(l));
            let (nx, ny) = (norm_floor(hx), norm_floor(hy));
            let n = hx.len() as f64;
            let diff: Vec<f64> = hx.iter().zip(hy).map(|(a, b)| a / nx - b / ny).collect();
            total += dot(&diff, &diff) / n;
            // ∂/∂u = 2 diff / n; pull back through u = h / ‖h‖.
            let g: Vec<f64> = diff.iter().map(|d| 2.0 * d / n).collect();
            cx.push(normalize_pullback(hx, nx, &g));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            cy.push(normalize_pullback(hy, ny, &neg));
        }
        (total, cx, cy)
    }
}

fn norm_floor(h: &[f64]) -> f64 {
    dot(h, h).sqrt().max(NORM_FLOOR)
}

/// Cotangent on `h` given cotangent `g` on `h / ‖h‖`.
fn normalize_pullback(h: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
    let ug = dot(h, g) / norm;
    h.iter().zip(g).map(|(hi, gi)| (gi - hi / norm * ug) / norm).collect()
}

fn clamp_mask(out: &[f64], v: &[f64]) -> Vec<f64> {
    out.iter()
        .zip(v)
        .map(|(o, g)| if *o > 0.0 && *o < 1.0 { *g } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeTrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            epochs: 30,
            seed: 0,
        }
    }
}

/// Minibatch SGD on the mean squared (unclamped) reconstruction error.
/// Returns the trained pair and the per-batch loss.
pub fn train_autoencoder(mut ae: AutoEncoder, data: &[Vec<f64>], config: &AeTrainConfig) -> Result<(AutoEncoder, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch == 0 || config.epochs == 0 || !(config.lr >= 0.0) {
        return Err(Error::config("autoencoder training needs positive batch and epochs, lr >= 0"));
    }
    for x in data {
        Error::check_dim(ae.dim(), x.len())?;
    }
    let mut rng = stream(config.seed, 0xAE);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut enc_opt = Sgd::new(config.lr, config.momentum);
    let mut dec_opt = Sgd::new(config.lr, config.momentum);
    let d = ae.dim() as f64;
    let mut trace = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let mut ge = Gradients::zeros_like(&ae.encoder);
            let mut gd = Gradients::zeros_like(&ae.decoder);
            let mut loss = 0.0;
            for &i in chunk {
                let x = &data[i];
                let et = ae.encoder.forward_tape(x)?;
                let dt = ae.decoder.forward_tape(et.output())?;
                let resid: Vec<f64> = dt.output().iter().zip(x).map(|(a, b)| a - b).collect();
                loss += dot(&resid, &resid) / d;
                let cot: Vec<f64> = resid.iter().map(|r| 2.0 * r / d).collect();
                let (gz, gdec) = ae.decoder.backward(&dt, &cot, true);
                let (_, genc) = ae.encoder.backward(&et, &gz, true);
                gd.add_assign(&gdec.expect("params"));
                ge.add_assign(&genc.expect("params"));
            }
            let b = chunk.len() as f64;
            loss /= b;
            if !loss.is_finite() || loss > 1e3 {
                return Err(Error::Divergence { iter: trace.len(), loss });
            }
            trace.push(loss);
            ge.scale(1.0 / b);
            gd.scale(1.0 / b);
            enc_opt.step(&mut ae.encoder, &ge);
            dec_opt.step(&mut ae.decoder, &gd);
        }
    }
    Ok((ae, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, uniform_vec};
    use crate::score::GaussianMixture;
    use crate::sde::to_data;

    fn toy_ae(seed: u64) -> AutoEncoder {
        AutoEncoder::new(8, 12, 3, &mut stream(seed, 0)).unwrap()
    }

    #[test]
    fn identity_pair_reconstructs_exactly() {
        let ae = AutoEncoder::identity(5);
        let x = vec![0.1, 0.2, 0.3, 0.4, 0.5];
        assert_eq!(ae.reconstruct(&x).unwrap(), x);
        assert_eq!(ae.perceptual_distance(&x, &ae.reconstruct(&x).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn zero_decoder_gives_clamped_bias() {
        let mut ae = toy_ae(0);
        for l in ae.decoder.layers_mut() {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let n = ae.decoder.layers().len();
        ae.decoder.layers_mut()[n - 1].bias = vec![-0.5, 0.3, 1.7, 0.0, 0.9, 2.0, -1.0, 0.5];
        let out = ae.decode(&[0.2, -0.1, 0.4]).unwrap();
        assert_eq!(out, vec![0.0, 0.3, 1.0, 0.0, 0.9, 1.0, 0.0, 0.5]);
    }

    #[test]
    fn latent_must_compress() {
        assert!(AutoEncoder::new(4, 8, 4, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn ae_vjp_matches_finite_differences_and_is_linear() {
        let ae = toy_ae(1);
        let mut rng = stream(1, 1);
        for _ in 0..10 {
            let x = uniform_vec(&mut rng, 8, 0.2, 0.8);
            let v = normal_vec(&mut rng, 8);
            let g = ae.ae_vjp(&x, &v).unwrap();
            let h = 1e-6;
            for i in 0..8 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (dot(&ae.reconstruct(&xp).unwrap(), &v) - dot(&ae.reconstruct(&xm).unwrap(), &v)) / (2.0 * h);
                assert!((g[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-2));
            }
            let w = normal_vec(&mut rng, 8);
            let combo: Vec<f64> = v.iter().zip(&w).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
            let lhs = ae.ae_vjp(&x, &combo).unwrap();
            let gw = ae.ae_vjp(&x, &w).unwrap();
            for i in 0..8 {
                assert!((lhs[i] - (2.0 * g[i] - 0.5 * gw[i])).abs() < 1e-12);
            }
        }
        assert!(ae.ae_vjp(&[0.5; 8], &[0.0; 8]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn perceptual_distance_is_a_symmetric_premetric() {
        let ae = toy_ae(2);
        let mut rng = stream(2, 1);
        for _ in 0..20 {
            let x = uniform_vec(&mut rng, 8, 0.0, 1.0);
            let y = uniform_vec(&mut rng, 8, 0.0, 1.0);
            let dxy = ae.perceptual_distance(&x, &y).unwrap();
            assert!(dxy >= 0.0);
            assert_eq!(dxy, ae.perceptual_distance(&y, &x).unwrap());
            assert_eq!(ae.perceptual_distance(&x, &x).unwrap(), 0.0);
        }
    }

    #[test]
    fn perceptual_distance_gradient_matches_fd() {
        let ae = toy_ae(3);
        let mut rng = stream(3, 1);
        let x = uniform_vec(&mut rng, 8, 0.2, 0.8);
        let y = uniform_vec(&mut rng, 8, 0.2, 0.8);
        let (_, gx, gy) = ae.perceptual_distance_grad(&x, &y).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (ae.perceptual_distance(&xp, &y).unwrap() - ae.perceptual_distance(&xm, &y).unwrap()) / (2.0 * h);
            assert!((gx[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-4), "{} vs {fd}", gx[i]);
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[i] += h;
            ym[i] -= h;
            let fd = (ae.perceptual_distance(&x, &yp).unwrap() - ae.perceptual_distance(&x, &ym).unwrap()) / (2.0 * h);
            assert!((gy[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-4));
        }
    }

    #[test]
    fn distance_shrinks_along_interpolation() {
        let ae = toy_ae(4);
        let mut rng = stream(4, 1);
        let probes = 100;
        let mut monotone = 0;
        for _ in 0..probes {
            let x = uniform_vec(&mut rng, 8, 0.0, 1.0);
            let y = uniform_vec(&mut rng, 8, 0.0, 1.0);
            let ds: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
                .iter()
                .map(|s| {
                    let p: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + s * (b - a)).collect();
                    ae.perceptual_distance(&p, &y).unwrap()
                })
                .collect();
            if ds.windows(2).all(|w| w[1] <= w[0]) {
                monotone += 1;
            }
        }
        assert!(monotone as f64 >= 0.9 * probes as f64, "{monotone}/{probes}");
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let ae = toy_ae(5);
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 10.0; 8]).collect();
        let cfg = AeTrainConfig {
            lr: 0.0,
            epochs: 2,
            ..Default::default()
        };
        let (trained, _) = train_autoencoder(ae.clone(), &data, &cfg).unwrap();
        assert_eq!(trained, ae);
    }

    #[test]
    fn training_closes_reconstruction_gap() {
        let mut rng = stream(6, 0);
        let d = 16;
        let mix = GaussianMixture::random(d, 3, 0.5, 0.01, &mut rng);
        let data: Vec<Vec<f64>> = (0..600).map(|_| to_data(&mix.sample(&mut rng))).collect();
        let ae = AutoEncoder::new(d, 32, 4, &mut rng).unwrap();
        let cfg = AeTrainConfig {
            epochs: 40,
            ..Default::default()
        };
        let (ae, trace) = train_autoencoder(ae, &data, &cfg).unwrap();
        assert!(trace.last().unwrap() < &trace[0]);
        let err = |x: &[f64]| {
            let r = ae.reconstruct(x).unwrap();
            r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let real: f64 = (0..200).map(|_| err(&to_data(&mix.sample(&mut rng)))).sum::<f64>() / 200.0;
        let noise: f64 = (0..200).map(|_| err(&uniform_vec(&mut rng, d, 0.0, 1.0))).sum::<f64>() / 200.0;
        assert!(real < 0.5 * noise, "{real} vs {noise}");
    }

    #[test]
    fn linear_full_rank_pair_fits_exactly() {
        let d = 4;
        let mut rng = stream(7, 0);
        let lin = |rng: &mut rand_chacha::ChaCha8Rng| Mlp::random(&[d, d], Activation::Identity, Activation::Identity, rng);
        let ae = AutoEncoder::from_parts(lin(&mut rng), lin(&mut rng)).unwrap();
        let data: Vec<Vec<f64>> = (0..64).map(|_| uniform_vec(&mut rng, d, 0.2, 0.8)).collect();
        let cfg = AeTrainConfig {
            epochs: 400,
            lr: 0.05,
            ..Default::default()
        };
        let (_, trace) = train_autoencoder(ae, &data, &cfg).unwrap();
        assert!(*trace.last().unwrap() < 1e-4, "{}", trace.last().unwrap());
    }
}
