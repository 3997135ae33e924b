//! Two-latent variational autoencoder with a spatial-transformer output
//! stage and a geodesic-distance regularizer.
//!
//! The generative story: draw appearance code `z_A` and transformation code
//! `z_B` from standard normal priors, decode `z_A` to a base image, decode
//! `z_B` to six warp parameters, then warp the base image through the
//! spatial-transformer layer. The training loss is the negative evidence
//! lower bound plus a pairwise penalty pulling latent embedding distances
//! toward graph geodesic distances measured on the data, plus the entropy
//! penalty of the attention block when one is configured.
//!
//! The KL term treats the two posteriors as independent factors, matching
//! the independent priors of the generative model.

use crate::diffcore::{concat, DiffError, DiffResult, Tape, Tensor, Var};
use crate::manifold::NeighborGraph;
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::stlayer::{warp_matrix, NonLocalBlock, WarpKind};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const LN_2PI: f64 = 1.8378770664093453;
/// Probabilities are clamped into [PROB_FLOOR, 1 - PROB_FLOOR] inside the
/// Bernoulli likelihood so warped-in zero padding stays finite under log.
const PROB_FLOOR: f64 = 1e-6;

/// Observation model for the reconstruction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// Per-pixel Bernoulli over data in [0,1].
    Bernoulli,
    /// Unit-variance Gaussian per coordinate.
    Gaussian,
}

/// Architecture of a model: shapes, widths, latent split, output stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// `[H, W]` for single-channel images, `[D]` for plain vectors.
    pub input_shape: Vec<usize>,
    pub latent_a: usize,
    pub latent_b: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    /// Hidden width of the transform decoder.
    pub warp_hidden: usize,
    /// Output-stage warp parametrization; `None` disables the transformer
    /// stage (then `latent_b` must be 0 and the decoder output is final).
    pub warp: Option<WarpKind>,
    /// Attention embedding width of the non-local block, `None` for no
    /// block. Only valid together with a warp stage.
    pub nonlocal_inner: Option<usize>,
    pub likelihood: Likelihood,
    /// Multiplier on the posterior variance used by the reparametrization
    /// noise; part of the model because every posterior-based quantity
    /// (sampling, KL, likelihood estimates) shares it.
    pub noise_scale: f64,
}

impl VaeConfig {
    /// Image preset: velocity-parametrized transformer stage, Bernoulli
    /// pixels, 44+6 latent split.
    pub fn images(h: usize, w: usize) -> Self {
        Self {
            input_shape: vec![h, w],
            latent_a: 44,
            latent_b: 6,
            enc_hidden: vec![512, 256],
            dec_hidden: vec![256, 512],
            warp_hidden: 32,
            warp: Some(WarpKind::Velocity),
            nonlocal_inner: None,
            likelihood: Likelihood::Bernoulli,
            noise_scale: 0.1,
        }
    }

    /// Vector preset: plain decoder without a transformer stage, Gaussian
    /// likelihood, all latent capacity in `z_A`.
    pub fn vectors(dim: usize, latent: usize) -> Self {
        Self {
            input_shape: vec![dim],
            latent_a: latent,
            latent_b: 0,
            enc_hidden: vec![64, 32],
            dec_hidden: vec![32, 64],
            warp_hidden: 0,
            warp: None,
            nonlocal_inner: None,
            likelihood: Likelihood::Gaussian,
            noise_scale: 0.1,
        }
    }

    pub fn data_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_a + self.latent_b
    }

    pub fn validate(&self) -> DiffResult<()> {
        let fail = |detail: String| {
            Err(DiffError::Domain {
                op: "vae_config",
                detail,
            })
        };
        if self.latent_a == 0 {
            return fail("latent_a must be positive".into());
        }
        if self.warp.is_some() != (self.latent_b > 0) {
            return fail(format!(
                "warp stage and latent_b must agree: warp={:?}, latent_b={}",
                self.warp, self.latent_b
            ));
        }
        if self.warp.is_some() && self.input_shape.len() != 2 {
            return fail("warp stage needs [H,W] image input".into());
        }
        if self.warp.is_some() && self.warp_hidden == 0 {
            return fail("warp stage needs a positive warp_hidden".into());
        }
        if self.nonlocal_inner.is_some() && self.warp.is_none() {
            return fail("non-local block requires the warp stage".into());
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise_scale must be positive, got {}", self.noise_scale));
        }
        if self.data_dim() == 0 {
            return fail("empty input shape".into());
        }
        Ok(())
    }
}

/// Optimizer, loop, and loss-weight settings for [`train`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the geodesic pair term; 0 trains a plain VAE and skips
    /// graph construction entirely.
    pub gd_weight: f64,
    /// Weight of the attention entropy penalty.
    pub entropy_weight: f64,
    pub seed: u64,
    /// Neighbors per node for the geodesic graph.
    pub knn_k: usize,
    /// Euclidean multiplier replacing the geodesic for disconnected pairs.
    pub disconnect_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-3,
            batch_size: 64,
            epochs: 20,
            gd_weight: 1.0,
            entropy_weight: 0.01,
            seed: 0,
            knn_k: 8,
            disconnect_penalty: 1.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> DiffResult<()> {
        let ok = self.learning_rate >= 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.weight_decay >= 0.0
            && self.batch_size >= 1
            && self.epochs >= 1
            && self.gd_weight >= 0.0
            && self.entropy_weight >= 0.0
            && self.knn_k >= 1
            && self.disconnect_penalty >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(DiffError::Domain {
                op: "train_config",
                detail: "rates and weights must be non-negative, betas in (0,1), epochs and batch size at least 1".into(),
            })
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Diagonal Gaussian posterior over one latent block.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    mean: Tensor,
    log_variance: Tensor,
}

impl GaussianPosterior {
    pub fn new(mean: Tensor, log_variance: Tensor) -> DiffResult<Self> {
        if mean.shape() != log_variance.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "posterior",
                lhs: mean.shape().to_vec(),
                rhs: log_variance.shape().to_vec(),
            });
        }
        if !mean.all_finite() || !log_variance.all_finite() {
            return Err(DiffError::NonFinite { op: "posterior" });
        }
        Ok(Self { mean, log_variance })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn log_variance(&self) -> &Tensor {
        &self.log_variance
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Reparametrized sample `mean + sqrt(variance) * eps`, returning the
    /// sample together with the noise that produced it.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
        let eps = rng::gaussian_vec(rng, self.dim());
        (self.sample_with(&eps), Tensor::vector(eps))
    }

    /// The sample this posterior produces from the given noise vector.
    pub fn sample_with(&self, eps: &[f64]) -> Tensor {
        let data: Vec<f64> = self
            .mean
            .data()
            .iter()
            .zip(self.log_variance.data())
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Tensor::vector(data)
    }

    /// Log density of `z` under this posterior.
    pub fn log_density(&self, z: &Tensor) -> f64 {
        self.mean
            .data()
            .iter()
            .zip(self.log_variance.data())
            .zip(z.data())
            .map(|((m, lv), zi)| {
                let d = zi - m;
                -0.5 * (LN_2PI + lv + d * d / lv.exp())
            })
            .sum()
    }
}

/// KL divergence from a diagonal Gaussian to the standard normal prior:
/// half the sum of `mean^2 + variance - log variance - 1` per coordinate.
pub fn kl_gaussian(q: &GaussianPosterior) -> f64 {
    q.mean()
        .data()
        .iter()
        .zip(q.log_variance().data())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .sum()
}

/// Log density of `z` under the standard normal prior.
pub fn standard_normal_log_density(z: &Tensor) -> f64 {
    z.data().iter().map(|zi| -0.5 * (LN_2PI + zi * zi)).sum()
}

/// Both latent samples with their posteriors and the noise that produced
/// them, so the reparametrization is replayable.
#[derive(Debug, Clone)]
pub struct LatentPair {
    pub z_a: Tensor,
    pub z_b: Tensor,
    pub posterior_a: GaussianPosterior,
    pub posterior_b: GaussianPosterior,
    pub eps_a: Tensor,
    pub eps_b: Tensor,
}

/// One dense layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Dense {
    w: Tensor,
    b: Tensor,
}

impl Dense {
    fn gaussian(inputs: usize, outputs: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let data: Vec<f64> = rng::gaussian_vec(rng, inputs * outputs)
            .into_iter()
            .map(|v| v * std)
            .collect();
        Self {
            w: Tensor::new(vec![inputs, outputs], data).unwrap(),
            b: Tensor::zeros(&[outputs]),
        }
    }

    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Tensor::zeros(&[inputs, outputs]),
            b: Tensor::zeros(&[outputs]),
        }
    }
}

/// The model: encoder, appearance decoder, transform decoder, and the
/// optional attention block of the output stage.
#[derive(Debug, Clone)]
pub struct VaeModel {
    config: VaeConfig,
    encoder: Vec<Dense>,
    appearance: Vec<Dense>,
    transform: Vec<Dense>,
    attention: Option<NonLocalBlock>,
}

/// A layer's parameters lifted onto a tape.
struct TapeDense {
    w: Var,
    b: Var,
}

/// All parameters lifted onto one tape, in [`VaeModel::params`] order.
struct TapeParams {
    encoder: Vec<TapeDense>,
    appearance: Vec<TapeDense>,
    transform: Vec<TapeDense>,
    attention: Option<Vec<Var>>,
}

/// Activation taps recorded during a batch forward pass, for gradient-norm
/// ratio tracking: layer name, pooling flag, input var, output var.
struct LayerTaps {
    taps: Vec<(String, bool, Var, Var)>,
}

/// Value breakdown of one loss evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Full training objective with weights applied.
    pub total: f64,
    /// Mean per-sample reconstruction log-likelihood.
    pub recon_loglik: f64,
    /// Mean per-sample KL divergence.
    pub kl: f64,
    /// Unweighted geodesic pair term, normalized by the squared batch size.
    pub pair: f64,
    /// Unweighted attention entropy penalty (zero without a block).
    pub entropy: f64,
    /// Mean per-pixel squared reconstruction error, for reporting.
    pub recon_mse: f64,
}

impl VaeModel {
    pub fn new(config: VaeConfig, seed: u64) -> DiffResult<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let d = config.data_dim();
        let j = config.latent_dim();

        let mut encoder = Vec::new();
        let mut widths = vec![d];
        widths.extend(&config.enc_hidden);
        for pair in widths.windows(2) {
            let std = 1.0 / (pair[0] as f64).sqrt();
            encoder.push(Dense::gaussian(pair[0], pair[1], std, &mut rng));
        }
        // Zero head: the initial posterior is exactly the prior.
        encoder.push(Dense::zeros(*widths.last().unwrap(), 2 * j));

        let mut appearance = Vec::new();
        let mut widths = vec![config.latent_a];
        widths.extend(&config.dec_hidden);
        for pair in widths.windows(2) {
            let std = 1.0 / (pair[0] as f64).sqrt();
            appearance.push(Dense::gaussian(pair[0], pair[1], std, &mut rng));
        }
        appearance.push(Dense::gaussian(*widths.last().unwrap(), d, 0.01, &mut rng));

        let transform = if let Some(kind) = config.warp {
            let mut layers = vec![Dense::gaussian(
                config.latent_b,
                config.warp_hidden,
                1.0 / (config.latent_b as f64).sqrt(),
                &mut rng,
            )];
            // Zero weights plus an identity bias: training starts from the
            // identity warp for every parametrization.
            let mut head = Dense::zeros(config.warp_hidden, 6);
            let ident = match kind {
                WarpKind::Direct => [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
                WarpKind::Decomposed | WarpKind::Velocity => [0.0; 6],
            };
            head.b = Tensor::new(vec![6], ident.to_vec()).unwrap();
            layers.push(head);
            layers
        } else {
            Vec::new()
        };

        let attention = config
            .nonlocal_inner
            .map(|inner| NonLocalBlock::new(1, inner, &mut rng));

        Ok(Self {
            config,
            encoder,
            appearance,
            transform,
            attention,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    /// Parameter names in the fixed ordering shared by [`Self::params`],
    /// [`Self::params_mut`], and checkpoints.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.encoder.len() {
            names.push(format!("enc{i}.w"));
            names.push(format!("enc{i}.b"));
        }
        for i in 0..self.appearance.len() {
            names.push(format!("app{i}.w"));
            names.push(format!("app{i}.b"));
        }
        for i in 0..self.transform.len() {
            names.push(format!("trf{i}.w"));
            names.push(format!("trf{i}.b"));
        }
        if self.attention.is_some() {
            for n in ["att.theta", "att.phi", "att.g", "att.o"] {
                names.push(n.to_string());
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(&self.appearance).chain(&self.transform) {
            out.push(&l.w);
            out.push(&l.b);
        }
        if let Some(att) = &self.attention {
            out.extend(att.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self
            .encoder
            .iter_mut()
            .chain(self.appearance.iter_mut())
            .chain(self.transform.iter_mut())
        {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        if let Some(att) = &mut self.attention {
            out.extend(att.params_mut());
        }
        out
    }

    fn lift(&self, tape: &Tape, tracked: bool) -> DiffResult<TapeParams> {
        let mk = |t: &Tensor| -> DiffResult<Var> {
            if tracked {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let lift_layers = |layers: &[Dense]| -> DiffResult<Vec<TapeDense>> {
            layers
                .iter()
                .map(|l| {
                    Ok(TapeDense {
                        w: mk(&l.w)?,
                        b: mk(&l.b)?,
                    })
                })
                .collect()
        };
        Ok(TapeParams {
            encoder: lift_layers(&self.encoder)?,
            appearance: lift_layers(&self.appearance)?,
            transform: lift_layers(&self.transform)?,
            attention: match &self.attention {
                Some(att) => Some(
                    att.params()
                        .into_iter()
                        .map(mk)
                        .collect::<DiffResult<Vec<Var>>>()?,
                ),
                None => None,
            },
        })
    }

    /// Encoder forward over a `[B,D]` batch: posterior means and effective
    /// log-variances (noise scale folded in), shapes `[B,J]` each.
    fn encode_stats(
        &self,
        params: &TapeParams,
        x: &Var,
        taps: Option<&mut LayerTaps>,
    ) -> DiffResult<(Var, Var)> {
        let j = self.config.latent_dim();
        let mut h = x.clone();
        let mut tap_list = Vec::new();
        let last = params.encoder.len() - 1;
        for (i, layer) in params.encoder.iter().enumerate() {
            let lin = h.matmul(&layer.w)?.add(&layer.b)?;
            let out = if i < last { lin.tanh()? } else { lin };
            tap_list.push((format!("enc{i}"), false, h.clone(), out.clone()));
            h = out;
        }
        if let Some(t) = taps {
            t.taps.extend(tap_list);
        }
        let mean = h.slice(1, 0, j)?;
        let logvar = h
            .slice(1, j, j)?
            .add_scalar(self.config.noise_scale.ln())?;
        Ok((mean, logvar))
    }

    /// Decoder forward from latent samples `[B,J_A]`, `[B,J_B]` to the
    /// model's output distribution parameter per pixel (`[B,D]`), plus the
    /// attention rows when a block is configured.
    fn decode_stats(
        &self,
        tape: &Tape,
        params: &TapeParams,
        z_a: &Var,
        z_b: Option<&Var>,
        taps: Option<&mut LayerTaps>,
    ) -> DiffResult<(Var, Option<Var>)> {
        let b = z_a.shape()[0];
        let d = self.config.data_dim();
        let mut h = z_a.clone();
        let mut tap_list = Vec::new();
        let last = params.appearance.len() - 1;
        for (i, layer) in params.appearance.iter().enumerate() {
            let lin = h.matmul(&layer.w)?.add(&layer.b)?;
            let out = if i < last { lin.tanh()? } else { lin };
            tap_list.push((format!("app{i}"), false, h.clone(), out.clone()));
            h = out;
        }
        if let Some(t) = taps {
            t.taps.extend(tap_list);
        }

        let (out, attention) = match self.config.warp {
            None => {
                let mapped = match self.config.likelihood {
                    Likelihood::Bernoulli => h.sigmoid()?,
                    Likelihood::Gaussian => h,
                };
                (mapped, None)
            }
            Some(kind) => {
                let (height, width) = (self.config.input_shape[0], self.config.input_shape[1]);
                let mut img = h.reshape(&[b, 1, height, width])?;
                let mut attention = None;
                if let Some(att_vars) = &params.attention {
                    let (y, rows) = nonlocal_forward(tape, att_vars, &img, b, height, width)?;
                    img = y;
                    attention = Some(rows);
                }
                if self.config.likelihood == Likelihood::Bernoulli {
                    img = img.sigmoid()?;
                }
                let zb = z_b.ok_or(DiffError::Domain {
                    op: "decode",
                    detail: "warp stage needs z_B".into(),
                })?;
                let mut raw = zb.clone();
                let last_t = params.transform.len() - 1;
                for (i, layer) in params.transform.iter().enumerate() {
                    raw = raw.matmul(&layer.w)?.add(&layer.b)?;
                    if i < last_t {
                        raw = raw.tanh()?;
                    }
                }
                let matrix = warp_matrix(kind, &raw)?;
                let grid = matrix.affine_grid(height, width)?;
                let warped = img.grid_sample(&grid)?;
                (warped.reshape(&[b, d])?, attention)
            }
        };
        Ok((out, attention))
    }

    /// Differentiable single-sample decode from a full latent vector `[J]`
    /// to the flat output `[D]`. This is the decoder that geodesic and
    /// curvature machinery differentiates.
    pub fn decode_var(&self, tape: &Tape, z: &Var) -> DiffResult<Var> {
        if z.shape() != vec![self.config.latent_dim()] {
            return Err(DiffError::InvalidShape {
                op: "decode",
                shape: z.shape(),
                detail: format!("expected [{}]", self.config.latent_dim()),
            });
        }
        let params = self.lift(tape, false)?;
        let row = z.reshape(&[1, self.config.latent_dim()])?;
        let z_a = row.slice(1, 0, self.config.latent_a)?;
        let z_b = if self.config.latent_b > 0 {
            Some(row.slice(1, self.config.latent_a, self.config.latent_b)?)
        } else {
            None
        };
        let (out, _) = self.decode_stats(tape, &params, &z_a, z_b.as_ref(), None)?;
        out.reshape(&[self.config.data_dim()])
    }

    /// Posterior pair for one input, sampled with recorded noise.
    pub fn encode(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> DiffResult<LatentPair> {
        let x = self.check_input(x)?;
        let tape = Tape::new();
        let params = self.lift(&tape, false)?;
        let xv = tape.constant(x.reshaped(&[1, self.config.data_dim()])?)?;
        let (mean, logvar) = self.encode_stats(&params, &xv, None)?;
        let (ja, jb) = (self.config.latent_a, self.config.latent_b);
        let split = |t: &Tensor, start: usize, len: usize| {
            Tensor::vector(t.data()[start..start + len].to_vec())
        };
        let mean = mean.value();
        let logvar = logvar.value();
        let posterior_a = GaussianPosterior::new(split(&mean, 0, ja), split(&logvar, 0, ja))?;
        let posterior_b = GaussianPosterior::new(split(&mean, ja, jb), split(&logvar, ja, jb))?;
        let (z_a, eps_a) = posterior_a.sample(rng);
        let (z_b, eps_b) = posterior_b.sample(rng);
        Ok(LatentPair {
            z_a,
            z_b,
            posterior_a,
            posterior_b,
            eps_a,
            eps_b,
        })
    }

    /// Decode latent samples to an output tensor shaped like the input.
    pub fn decode(&self, z_a: &Tensor, z_b: &Tensor) -> DiffResult<Tensor> {
        if z_a.len() != self.config.latent_a || z_b.len() != self.config.latent_b {
            return Err(DiffError::Domain {
                op: "decode",
                detail: format!(
                    "latent sizes ({}, {}) do not match configured split ({}, {})",
                    z_a.len(),
                    z_b.len(),
                    self.config.latent_a,
                    self.config.latent_b
                ),
            });
        }
        let tape = Tape::new();
        let mut full = z_a.data().to_vec();
        full.extend(z_b.data());
        let zv = tape.constant(Tensor::vector(full))?;
        let out = self.decode_var(&tape, &zv)?;
        out.value().reshaped(&self.config.input_shape)
    }

    /// Prior draw through the full generative path.
    pub fn generate(&self, rng: &mut ChaCha8Rng) -> DiffResult<Tensor> {
        let z_a = Tensor::vector(rng::gaussian_vec(rng, self.config.latent_a));
        let z_b = Tensor::vector(rng::gaussian_vec(rng, self.config.latent_b));
        self.decode(&z_a, &z_b)
    }

    /// Deterministic reconstruction through the posterior means.
    pub fn reconstruct(&self, x: &Tensor) -> DiffResult<Tensor> {
        let x = self.check_input(x)?;
        let tape = Tape::new();
        let params = self.lift(&tape, false)?;
        let xv = tape.constant(x.reshaped(&[1, self.config.data_dim()])?)?;
        let (mean, _) = self.encode_stats(&params, &xv, None)?;
        let (ja, jb) = (self.config.latent_a, self.config.latent_b);
        let z_a = mean.slice(1, 0, ja)?;
        let z_b = if jb > 0 {
            Some(mean.slice(1, ja, jb)?)
        } else {
            None
        };
        let (out, _) = self.decode_stats(&tape, &params, &z_a, z_b.as_ref(), None)?;
        out.value().reshaped(&self.config.input_shape)
    }

    /// Log-likelihood of `x` under the decoder output for the given latent
    /// samples.
    pub fn conditional_log_likelihood(
        &self,
        x: &Tensor,
        z_a: &Tensor,
        z_b: &Tensor,
    ) -> DiffResult<f64> {
        let x = self.check_input(x)?;
        let xhat = self.decode(z_a, z_b)?;
        Ok(match self.config.likelihood {
            Likelihood::Bernoulli => x
                .data()
                .iter()
                .zip(xhat.data())
                .map(|(xi, p)| {
                    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    xi * p.ln() + (1.0 - xi) * (1.0 - p).ln()
                })
                .sum(),
            Likelihood::Gaussian => {
                let sq: f64 = x
                    .data()
                    .iter()
                    .zip(xhat.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                -0.5 * sq - 0.5 * self.config.data_dim() as f64 * LN_2PI
            }
        })
    }

    /// Single-sample evidence lower bound for one input.
    pub fn elbo(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> DiffResult<f64> {
        let pair = self.encode(x, rng)?;
        let loglik = self.conditional_log_likelihood(x, &pair.z_a, &pair.z_b)?;
        Ok(loglik - kl_gaussian(&pair.posterior_a) - kl_gaussian(&pair.posterior_b))
    }

    /// Full training objective on one batch with its geodesic matrix.
    /// `gd` must be `[B,B]` with finite entries for every pair.
    pub fn vtae_loss(
        &self,
        batch: &Tensor,
        gd: &Tensor,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> DiffResult<LossBreakdown> {
        let tape = Tape::new();
        let params = self.lift(&tape, false)?;
        let pass = self.batch_objective(&tape, &params, batch, gd, cfg, rng, None)?;
        Ok(pass.breakdown)
    }

    fn check_input(&self, x: &Tensor) -> DiffResult<Tensor> {
        if x.len() != self.config.data_dim() {
            return Err(DiffError::InvalidShape {
                op: "vae_input",
                shape: x.shape().to_vec(),
                detail: format!("expected {} values", self.config.data_dim()),
            });
        }
        if self.config.likelihood == Likelihood::Bernoulli
            && x.data().iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(DiffError::Domain {
                op: "vae_input",
                detail: "Bernoulli likelihood needs data in [0,1]".into(),
            });
        }
        Ok(x.clone())
    }

    fn check_batch(&self, batch: &Tensor) -> DiffResult<usize> {
        let (b, d) = match *batch.shape() {
            [b, d] => (b, d),
            _ => {
                return Err(DiffError::InvalidShape {
                    op: "vae_batch",
                    shape: batch.shape().to_vec(),
                    detail: "expected [B,D]".into(),
                })
            }
        };
        if d != self.config.data_dim() || b == 0 {
            return Err(DiffError::InvalidShape {
                op: "vae_batch",
                shape: batch.shape().to_vec(),
                detail: format!("expected non-empty [B,{}]", self.config.data_dim()),
            });
        }
        if self.config.likelihood == Likelihood::Bernoulli
            && batch.data().iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(DiffError::Domain {
                op: "vae_batch",
                detail: "Bernoulli likelihood needs data in [0,1]".into(),
            });
        }
        Ok(b)
    }

    /// Builds the complete objective for one batch on the given tape.
    fn batch_objective(
        &self,
        tape: &Tape,
        params: &TapeParams,
        batch: &Tensor,
        gd: &Tensor,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
        mut taps: Option<&mut LayerTaps>,
    ) -> DiffResult<BatchPass> {
        let b = self.check_batch(batch)?;
        if gd.shape() != [b, b] {
            return Err(DiffError::ShapeMismatch {
                op: "vtae_loss",
                lhs: batch.shape().to_vec(),
                rhs: gd.shape().to_vec(),
            });
        }
        for i in 0..b {
            for jj in 0..b {
                if !gd.data()[i * b + jj].is_finite() {
                    return Err(DiffError::Domain {
                        op: "vtae_loss",
                        detail: format!("geodesic distance missing for pair ({i}, {jj})"),
                    });
                }
            }
        }
        let d = self.config.data_dim();
        let j = self.config.latent_dim();
        let (ja, jb) = (self.config.latent_a, self.config.latent_b);

        let x = if taps.is_some() {
            // A tracked input makes the first layer's input gradient
            // observable for the ratio report.
            tape.leaf(batch.clone())?
        } else {
            tape.constant(batch.clone())?
        };
        let (mean, logvar) = self.encode_stats(params, &x, taps.as_deref_mut())?;

        let eps = Tensor::new(vec![b, j], rng::gaussian_vec(rng, b * j))?;
        let epsv = tape.constant(eps)?;
        let std = logvar.mul_scalar(0.5)?.exp()?;
        let z = mean.add(&std.mul(&epsv)?)?;
        let z_a = z.slice(1, 0, ja)?;
        let z_b = if jb > 0 { Some(z.slice(1, ja, jb)?) } else { None };

        let (out, attention) =
            self.decode_stats(tape, params, &z_a, z_b.as_ref(), taps.as_deref_mut())?;

        // Reconstruction log-likelihood, summed then averaged per sample.
        let loglik_total = match self.config.likelihood {
            Likelihood::Bernoulli => {
                let p = out.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)?;
                let one_minus_p = p.mul_scalar(-1.0)?.add_scalar(1.0)?;
                let one_minus_x = x.mul_scalar(-1.0)?.add_scalar(1.0)?;
                x.mul(&p.log()?)?
                    .add(&one_minus_x.mul(&one_minus_p.log()?)?)?
                    .reduce_sum(None)?
            }
            Likelihood::Gaussian => out
                .sub(&x)?
                .sum_squares()?
                .mul_scalar(-0.5)?
                .add_scalar(-0.5 * (b * d) as f64 * LN_2PI)?,
        };
        let recon_mean = loglik_total.mul_scalar(1.0 / b as f64)?;

        // KL of both factors in closed form, mean per sample.
        let kl_mean = mean
            .mul(&mean)?
            .add(&logvar.exp()?)?
            .sub(&logvar)?
            .add_scalar(-1.0)?
            .reduce_sum(None)?
            .mul_scalar(0.5 / b as f64)?;

        // Pair term: || E(x_i) - E(x_j) || toward GD_ij over all ordered
        // pairs, normalized by B^2. E(x) is the posterior mean, so the term
        // is deterministic. Distances come from the Gram-matrix identity
        // d2[i,j] = n_i + n_j - 2 G[i,j]; the relu guards roundoff
        // negatives, and sqrt's zero-at-zero derivative convention keeps
        // identical pairs quiet.
        let pair = if cfg.gd_weight > 0.0 {
            let gram = mean.matmul(&mean.transpose()?)?;
            let norms = mean.mul(&mean)?.reduce_sum(Some(1))?;
            let t1 = gram.mul_scalar(-2.0)?.add(&norms)?;
            let dists = t1.transpose()?.add(&norms)?.relu()?.sqrt()?;
            let gdv = tape.constant(gd.clone())?;
            dists
                .sub(&gdv)?
                .sum_squares()?
                .mul_scalar(1.0 / (b * b) as f64)?
        } else {
            tape.constant(Tensor::scalar(0.0))?
        };

        let entropy = match (&attention, cfg.entropy_weight) {
            (Some(rows), w) if w > 0.0 => crate::stlayer::entropy_penalty_var(rows, 1.0)?,
            _ => tape.constant(Tensor::scalar(0.0))?,
        };

        let loss = recon_mean
            .mul_scalar(-1.0)?
            .add(&kl_mean)?
            .add(&pair.mul_scalar(cfg.gd_weight)?)?
            .add(&entropy.mul_scalar(cfg.entropy_weight)?)?;

        // Per-pixel squared error of the decoded mean output.
        let mse = out
            .value()
            .data()
            .iter()
            .zip(batch.data())
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            / (b * d) as f64;

        let breakdown = LossBreakdown {
            total: loss.item()?,
            recon_loglik: recon_mean.item()?,
            kl: kl_mean.item()?,
            pair: pair.item()?,
            entropy: entropy.item()?,
            recon_mse: mse,
        };
        Ok(BatchPass { loss, breakdown })
    }
}

struct BatchPass {
    loss: Var,
    breakdown: LossBreakdown,
}

/// Attention pass with already-lifted weights, batched over samples.
fn nonlocal_forward(
    _tape: &Tape,
    att: &[Var],
    img: &Var,
    b: usize,
    h: usize,
    w: usize,
) -> DiffResult<(Var, Var)> {
    let p = h * w;
    let mut outs = Vec::with_capacity(b);
    let mut rows = Vec::with_capacity(b);
    for bi in 0..b {
        let xb = img.slice(0, bi, 1)?.reshape(&[1, p])?;
        let feats = xb.transpose()?;
        let theta = feats.matmul(&att[0])?;
        let phi = feats.matmul(&att[1])?;
        let g = feats.matmul(&att[2])?;
        let attn = theta.matmul(&phi.transpose()?)?.softmax()?;
        let mixed = attn.matmul(&g)?.matmul(&att[3])?;
        let y = mixed.transpose()?.add(&xb)?;
        outs.push(y.reshape(&[1, 1, h, w])?);
        rows.push(attn);
    }
    let out_refs: Vec<&Var> = outs.iter().collect();
    let row_refs: Vec<&Var> = rows.iter().collect();
    Ok((concat(&out_refs, 0)?, concat(&row_refs, 0)?))
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub elbo: f64,
    pub kl: f64,
    /// Mean per-pixel squared reconstruction error.
    pub recon: f64,
    /// Mean unweighted geodesic pair term, zero when the term is off.
    pub pair: f64,
    /// Median over tracked layers of the backward gradient-norm ratio.
    pub grad_ratio: f64,
}

/// Epoch-mean gradient norms at one tracked layer boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerGradRecord {
    pub epoch: usize,
    pub layer: String,
    pub pooling: bool,
    /// Mean norm of the loss gradient at the layer input.
    pub input_norm: f64,
    /// Mean norm of the loss gradient at the layer output.
    pub output_norm: f64,
}

/// Where and why a run stopped early.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub epoch: usize,
    pub detail: String,
}

/// Everything a training run produced besides the updated model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub grad_records: Vec<LayerGradRecord>,
    /// Set when training aborted on non-finite numbers; metrics hold the
    /// last finite epochs.
    pub diverged: Option<DivergenceInfo>,
    /// Batch pairs that needed the Euclidean fallback for their geodesic.
    pub geodesic_fallbacks: usize,
}

/// Adam training loop over `[N,D]` data, deterministic per seed. The
/// geodesic graph is built once on the data when the pair term is active.
pub fn train(model: &mut VaeModel, data: &Tensor, cfg: &TrainConfig) -> DiffResult<TrainReport> {
    cfg.validate()?;
    let (n, d) = match *data.shape() {
        [n, d] if n > 0 => (n, d),
        _ => {
            return Err(DiffError::Domain {
                op: "train",
                detail: "dataset must be non-empty [N,D]".into(),
            })
        }
    };
    if d != model.config.data_dim() {
        return Err(DiffError::InvalidShape {
            op: "train",
            shape: data.shape().to_vec(),
            detail: format!("model expects D = {}", model.config.data_dim()),
        });
    }

    let graph = if cfg.gd_weight > 0.0 {
        Some(NeighborGraph::build(data, cfg.knn_k.min(n.saturating_sub(1).max(1)))?)
    } else {
        None
    };

    let mut rng = rng::seeded(cfg.seed);
    let init_params = model.params();
    let mut adam = Adam::new(cfg.adam(), &init_params);
    drop(init_params);

    let batch = cfg.batch_size.min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        metrics: Vec::new(),
        grad_records: Vec::new(),
        diverged: None,
        geodesic_fallbacks: 0,
    };

    'epochs: for epoch in 0..cfg.epochs {
        rng::shuffle(&mut rng, &mut indices);
        let mut sums = (0.0, 0.0, 0.0, 0.0); // elbo, kl, mse, pair
        let mut batches = 0usize;
        let mut norm_acc: Vec<(String, bool, f64, f64, usize)> = Vec::new();

        for chunk in indices.chunks(batch) {
            if chunk.len() < batch && batches > 0 {
                // Uniform batch shapes; the leftover tail folds into the
                // next epoch's shuffle.
                continue;
            }
            let bsz = chunk.len();
            let mut rows = Vec::with_capacity(bsz * d);
            for &i in chunk {
                rows.extend_from_slice(&data.data()[i * d..(i + 1) * d]);
            }
            let bx = Tensor::new(vec![bsz, d], rows)?;
            let gd = match &graph {
                Some(g) => {
                    let (m, fb) = g.geodesic_matrix(chunk, cfg.disconnect_penalty);
                    report.geodesic_fallbacks += fb;
                    m
                }
                None => Tensor::zeros(&[bsz, bsz]),
            };

            let tape = Tape::new();
            let step = (|| -> DiffResult<(LossBreakdown, Vec<(String, bool, f64, f64)>, Vec<Tensor>)> {
                let params = model.lift(&tape, true)?;
                let mut taps = LayerTaps { taps: Vec::new() };
                let pass = model.batch_objective(
                    &tape, &params, &bx, &gd, cfg, &mut rng, Some(&mut taps),
                )?;
                tape.backward(&pass.loss)?;

                let mut grads = Vec::new();
                for layer in params
                    .encoder
                    .iter()
                    .chain(&params.appearance)
                    .chain(&params.transform)
                {
                    grads.push(grad_or_zeros(&layer.w));
                    grads.push(grad_or_zeros(&layer.b));
                }
                if let Some(att) = &params.attention {
                    for v in att {
                        grads.push(grad_or_zeros(v));
                    }
                }
                let mut norms = Vec::new();
                for (name, pooling, input, output) in &taps.taps {
                    let innorm = input.grad().map(|g| g.l2_norm()).unwrap_or(0.0);
                    let outnorm = output.grad().map(|g| g.l2_norm()).unwrap_or(0.0);
                    norms.push((name.clone(), *pooling, innorm, outnorm));
                }
                Ok((pass.breakdown, norms, grads))
            })();

            let (breakdown, norms, grads) = match step {
                Ok(v) => v,
                Err(DiffError::NonFinite { op }) => {
                    report.diverged = Some(DivergenceInfo {
                        epoch,
                        detail: format!("non-finite value in {op}"),
                    });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };

            sums.0 += breakdown.recon_loglik - breakdown.kl;
            sums.1 += breakdown.kl;
            sums.2 += breakdown.recon_mse;
            sums.3 += breakdown.pair;
            batches += 1;
            for (name, pooling, innorm, outnorm) in norms {
                match norm_acc.iter_mut().find(|r| r.0 == name) {
                    Some(r) => {
                        r.2 += innorm;
                        r.3 += outnorm;
                        r.4 += 1;
                    }
                    None => norm_acc.push((name, pooling, innorm, outnorm, 1)),
                }
            }

            let mut params_mut = model.params_mut();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut params_mut, &grad_refs);
        }

        if batches == 0 {
            break;
        }
        let inv = 1.0 / batches as f64;
        let mut ratios = Vec::new();
        for (name, pooling, in_sum, out_sum, count) in &norm_acc {
            let record = LayerGradRecord {
                epoch,
                layer: name.clone(),
                pooling: *pooling,
                input_norm: in_sum / *count as f64,
                output_norm: out_sum / *count as f64,
            };
            if record.output_norm > 0.0 {
                ratios.push(record.input_norm / record.output_norm);
            }
            report.grad_records.push(record);
        }
        let grad_ratio = median(&mut ratios);
        report.metrics.push(EpochMetrics {
            epoch,
            elbo: sums.0 * inv,
            kl: sums.1 * inv,
            recon: sums.2 * inv,
            pair: sums.3 * inv,
            grad_ratio,
        });
    }
    Ok(report)
}

fn grad_or_zeros(v: &Var) -> Tensor {
    v.grad()
        .unwrap_or_else(|| Tensor::zeros(&v.shape()))
}

fn median(values: &mut Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

/// Checkpoint manifest: architecture, training settings, progress, and the
/// parameter file list in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    architecture: VaeConfig,
    train: TrainConfig,
    seed: u64,
    epoch: usize,
    parameters: Vec<String>,
}

/// Write a checkpoint directory: one tensor container per parameter plus a
/// JSON manifest.
pub fn save_checkpoint(
    dir: &Path,
    model: &VaeModel,
    cfg: &TrainConfig,
    epoch: usize,
) -> DiffResult<()> {
    std::fs::create_dir_all(dir)?;
    let names = model.param_names();
    let params = model.params();
    let mut files = Vec::new();
    for (name, tensor) in names.iter().zip(&params) {
        let file = format!("{}.glt", name.replace('.', "_"));
        tensor.save(&dir.join(&file))?;
        files.push(file);
    }
    let manifest = CheckpointManifest {
        architecture: model.config.clone(),
        train: cfg.clone(),
        seed: cfg.seed,
        epoch,
        parameters: files,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DiffError::BadContainer(format!("manifest encoding: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> DiffResult<(VaeModel, TrainConfig, usize)> {
    let raw = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_str(&raw)
        .map_err(|e| DiffError::BadContainer(format!("manifest decoding: {e}")))?;
    let mut model = VaeModel::new(manifest.architecture.clone(), manifest.seed)?;
    let expect = model.param_names();
    if manifest.parameters.len() != expect.len() {
        return Err(DiffError::BadContainer(format!(
            "manifest lists {} parameters, architecture has {}",
            manifest.parameters.len(),
            expect.len()
        )));
    }
    {
        let mut slots = model.params_mut();
        for (slot, file) in slots.iter_mut().zip(&manifest.parameters) {
            let loaded = Tensor::load(&dir.join(file))?;
            if loaded.shape() != slot.shape() {
                return Err(DiffError::BadContainer(format!(
                    "parameter {file} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    slot.shape()
                )));
            }
            **slot = loaded;
        }
    }
    Ok((model, manifest.train, manifest.epoch))
}
