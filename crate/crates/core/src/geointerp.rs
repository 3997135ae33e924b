//! Geodesic interpolation between two latent points.
//!
//! A candidate path is a cubic `g(s) = a s^3 + b s^2 + c s + d` whose `c`
//! and `d` are derived from the endpoints, so the curve always starts at
//! `z1` and ends at `z2` no matter what the free coefficients do. The path
//! is pushed through the decoder, its data-space velocity and acceleration
//! are estimated with finite differences, and three penalties steer the
//! free coefficients: equal decoded speed along the path, acceleration
//! orthogonal to the decoded tangent space, and short decoded length.

use crate::diffcore::{jacobian, DiffError, DiffFn, DiffResult, Tape, Tensor, Var};
use crate::optim::{Adam, AdamConfig};
use serde::{Deserialize, Serialize};

/// Cubic latent-space curve pinned to its endpoints.
///
/// Only `a` and `b` are free; `c = z2 - z1 - a - b` and `d = z1` follow
/// from the endpoint constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicCurve {
    a: Tensor,
    b: Tensor,
    z1: Tensor,
    z2: Tensor,
}

impl CubicCurve {
    pub fn new(z1: Tensor, z2: Tensor, a: Tensor, b: Tensor) -> DiffResult<Self> {
        let j = z1.len();
        for (name, t) in [("z1", &z1), ("z2", &z2), ("a", &a), ("b", &b)] {
            if t.shape().len() != 1 || t.len() != j || j == 0 {
                return Err(DiffError::InvalidShape {
                    op: "cubic_curve",
                    shape: t.shape().to_vec(),
                    detail: format!("{name} must be a non-empty vector of length {j}"),
                });
            }
            if !t.all_finite() {
                return Err(DiffError::NonFinite { op: "cubic_curve" });
            }
        }
        Ok(Self { a, b, z1, z2 })
    }

    /// The straight segment between the endpoints.
    pub fn linear(z1: Tensor, z2: Tensor) -> DiffResult<Self> {
        let j = z1.len();
        Self::new(z1, z2, Tensor::zeros(&[j]), Tensor::zeros(&[j]))
    }

    pub fn dim(&self) -> usize {
        self.z1.len()
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn endpoints(&self) -> (&Tensor, &Tensor) {
        (&self.z1, &self.z2)
    }

    /// Derived linear coefficient `z2 - z1 - a - b`.
    pub fn c(&self) -> Tensor {
        let data: Vec<f64> = (0..self.dim())
            .map(|i| self.z2.data()[i] - self.z1.data()[i] - self.a.data()[i] - self.b.data()[i])
            .collect();
        Tensor::vector(data)
    }

    /// Curve position at `s` in [0,1]. The endpoints return the stored
    /// vectors directly: the cubic's derivative in `a` and `b` vanishes at
    /// s = 0 and s = 1, so pinning is exact for values and gradients alike.
    pub fn eval(&self, s: f64) -> DiffResult<Tensor> {
        if !(0.0..=1.0).contains(&s) {
            return Err(DiffError::Domain {
                op: "curve_eval",
                detail: format!("s = {s} outside [0,1]"),
            });
        }
        if s == 0.0 {
            return Ok(self.z1.clone());
        }
        if s == 1.0 {
            return Ok(self.z2.clone());
        }
        let c = self.c();
        let (s2, s3) = (s * s, s * s * s);
        let data: Vec<f64> = (0..self.dim())
            .map(|i| {
                self.a.data()[i] * s3 + self.b.data()[i] * s2 + c.data()[i] * s + self.z1.data()[i]
            })
            .collect();
        Ok(Tensor::vector(data))
    }

    /// Analytic curve derivative `3 a s^2 + 2 b s + c`, for oracles.
    pub fn derivative(&self, s: f64) -> Tensor {
        let c = self.c();
        let data: Vec<f64> = (0..self.dim())
            .map(|i| 3.0 * self.a.data()[i] * s * s + 2.0 * self.b.data()[i] * s + c.data()[i])
            .collect();
        Tensor::vector(data)
    }
}

/// Where the path is sampled and how wide the difference stencils step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSampling {
    n: usize,
    delta: f64,
}

impl CurveSampling {
    /// `n` evenly spaced samples `i/(n-1)` including both endpoints, with
    /// finite-difference step `delta`. Requires `0 < delta < 1/(2n)` so
    /// every stencil point stays inside [0,1].
    pub fn new(n: usize, delta: f64) -> DiffResult<Self> {
        if n < 2 {
            return Err(DiffError::Domain {
                op: "curve_sampling",
                detail: format!("need at least 2 samples, got {n}"),
            });
        }
        if !(delta > 0.0 && delta < 1.0 / (2.0 * n as f64)) {
            return Err(DiffError::Domain {
                op: "curve_sampling",
                detail: format!("step {delta} outside (0, 1/{})", 2 * n),
            });
        }
        Ok(Self { n, delta })
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn step(&self) -> f64 {
        self.delta
    }

    /// Sample locations, 0 through 1 inclusive.
    pub fn locations(&self) -> Vec<f64> {
        (0..self.n).map(|i| i as f64 / (self.n - 1) as f64).collect()
    }
}

impl Default for CurveSampling {
    /// 32 samples with step 1/128: the squared step stays far above f64
    /// noise so second differences remain meaningful.
    fn default() -> Self {
        Self { n: 32, delta: 1.0 / 128.0 }
    }
}

/// One sample's finite-difference recipe: indices into the shared decoded
/// point list with stencil weights.
struct SampleStencil {
    center: usize,
    d1: Vec<(usize, f64)>,
    d2: Vec<(usize, f64)>,
}

struct StencilPlan {
    s_values: Vec<f64>,
    samples: Vec<SampleStencil>,
}

/// Decoding locations and derivative stencils for a sampling scheme.
/// Interior samples use central differences; the first and last use
/// one-sided stencils of the same second-order accuracy, shifted inward so
/// every decoded point lies in [0,1].
fn stencil_plan(sampling: &CurveSampling) -> StencilPlan {
    let d = sampling.delta;
    let mut s_values: Vec<f64> = Vec::new();
    let idx = |s: f64, vals: &mut Vec<f64>| -> usize {
        match vals.iter().position(|&v| v == s) {
            Some(i) => i,
            None => {
                vals.push(s);
                vals.len() - 1
            }
        }
    };
    let mut samples = Vec::with_capacity(sampling.n);
    for (i, s) in sampling.locations().into_iter().enumerate() {
        let stencil = if i == 0 {
            let p: Vec<usize> = (0..4).map(|k| idx(k as f64 * d, &mut s_values)).collect();
            SampleStencil {
                center: p[0],
                d1: vec![
                    (p[0], -3.0 / (2.0 * d)),
                    (p[1], 4.0 / (2.0 * d)),
                    (p[2], -1.0 / (2.0 * d)),
                ],
                d2: vec![
                    (p[0], 2.0 / (d * d)),
                    (p[1], -5.0 / (d * d)),
                    (p[2], 4.0 / (d * d)),
                    (p[3], -1.0 / (d * d)),
                ],
            }
        } else if i == sampling.n - 1 {
            let p: Vec<usize> = (0..4).map(|k| idx(1.0 - k as f64 * d, &mut s_values)).collect();
            SampleStencil {
                center: p[0],
                d1: vec![
                    (p[0], 3.0 / (2.0 * d)),
                    (p[1], -4.0 / (2.0 * d)),
                    (p[2], 1.0 / (2.0 * d)),
                ],
                d2: vec![
                    (p[0], 2.0 / (d * d)),
                    (p[1], -5.0 / (d * d)),
                    (p[2], 4.0 / (d * d)),
                    (p[3], -1.0 / (d * d)),
                ],
            }
        } else {
            let m = idx(s - d, &mut s_values);
            let c = idx(s, &mut s_values);
            let p = idx(s + d, &mut s_values);
            SampleStencil {
                center: c,
                d1: vec![(m, -1.0 / (2.0 * d)), (p, 1.0 / (2.0 * d))],
                d2: vec![(m, 1.0 / (d * d)), (c, -2.0 / (d * d)), (p, 1.0 / (d * d))],
            }
        };
        samples.push(stencil);
    }
    StencilPlan { s_values, samples }
}

/// A curve pushed through a decoder: positions, velocities, and
/// accelerations at every sample location.
#[derive(Debug, Clone)]
pub struct DecodedPath {
    s: Vec<f64>,
    latents: Tensor,
    points: Tensor,
    velocity: Tensor,
    acceleration: Tensor,
}

impl DecodedPath {
    pub fn sample_count(&self) -> usize {
        self.s.len()
    }

    pub fn locations(&self) -> &[f64] {
        &self.s
    }

    /// Latent curve positions, `[n, J]`.
    pub fn latents(&self) -> &Tensor {
        &self.latents
    }

    /// Decoded positions, `[n, N]`.
    pub fn points(&self) -> &Tensor {
        &self.points
    }

    /// Estimated decoded velocities, `[n, N]`.
    pub fn velocity(&self) -> &Tensor {
        &self.velocity
    }

    /// Estimated decoded accelerations, `[n, N]`.
    pub fn acceleration(&self) -> &Tensor {
        &self.acceleration
    }

    /// Decoded speed at each sample.
    pub fn speeds(&self) -> Vec<f64> {
        let n = self.s.len();
        let dim = self.velocity.len() / n;
        (0..n)
            .map(|i| {
                self.velocity.data()[i * dim..(i + 1) * dim]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    /// Trapezoidal decoded path length.
    pub fn length(&self) -> f64 {
        let speeds = self.speeds();
        let n = speeds.len();
        let h = 1.0 / (n - 1) as f64;
        let interior: f64 = speeds[1..n - 1].iter().sum();
        h * (0.5 * speeds[0] + interior + 0.5 * speeds[n - 1])
    }
}

/// Decode a curve and estimate its data-space derivatives.
pub fn decode_curve(
    decoder: &dyn DiffFn,
    curve: &CubicCurve,
    sampling: &CurveSampling,
) -> DiffResult<DecodedPath> {
    let plan = stencil_plan(sampling);
    let tape = Tape::new();
    let mut decoded: Vec<Tensor> = Vec::with_capacity(plan.s_values.len());
    for &s in &plan.s_values {
        let z = curve.eval(s)?;
        let out = decoder.apply(&tape, &tape.constant(z)?)?;
        decoded.push(out.value());
    }
    let n = sampling.n;
    let dim = decoded[0].len();
    let mut latents = Vec::with_capacity(n * curve.dim());
    let mut points = Vec::with_capacity(n * dim);
    let mut velocity = vec![0.0; n * dim];
    let mut acceleration = vec![0.0; n * dim];
    for (i, st) in plan.samples.iter().enumerate() {
        latents.extend(curve.eval(plan.s_values[st.center])?.into_data());
        points.extend_from_slice(decoded[st.center].data());
        for &(p, w) in &st.d1 {
            for (dst, src) in velocity[i * dim..(i + 1) * dim].iter_mut().zip(decoded[p].data()) {
                *dst += w * src;
            }
        }
        for &(p, w) in &st.d2 {
            for (dst, src) in
                acceleration[i * dim..(i + 1) * dim].iter_mut().zip(decoded[p].data())
            {
                *dst += w * src;
            }
        }
    }
    Ok(DecodedPath {
        s: sampling.locations(),
        latents: Tensor::new(vec![n, curve.dim()], latents)?,
        points: Tensor::new(vec![n, dim], points)?,
        velocity: Tensor::new(vec![n, dim], velocity)?,
        acceleration: Tensor::new(vec![n, dim], acceleration)?,
    })
}

/// The linear-interpolation comparison path between two endpoints.
pub fn linear_baseline(
    decoder: &dyn DiffFn,
    z1: &Tensor,
    z2: &Tensor,
    sampling: &CurveSampling,
) -> DiffResult<DecodedPath> {
    decode_curve(decoder, &CubicCurve::linear(z1.clone(), z2.clone())?, sampling)
}

fn insertion_from_speeds(speeds: &[f64]) -> DiffResult<f64> {
    let n = speeds.len() as f64;
    let mean = speeds.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(DiffError::Domain {
            op: "loss_insertion",
            detail: "degenerate curve: zero mean speed".into(),
        });
    }
    Ok(speeds.iter().map(|v| (v / mean - 1.0).powi(2)).sum::<f64>() / n)
}

/// Even-speed penalty: mean squared deviation of each decoded speed from
/// the path's mean speed, in ratio form so decoder output scale cancels.
pub fn loss_insertion(path: &DecodedPath) -> DiffResult<f64> {
    insertion_from_speeds(&path.speeds())
}

/// Tangential-acceleration penalty: the decoded acceleration at each
/// sample is projected onto the decoder's tangent space through the
/// Jacobian, and the mean projection norm is returned. Zero means every
/// acceleration is orthogonal to the manifold, the geodesic condition.
pub fn loss_geodesic(decoder: &dyn DiffFn, path: &DecodedPath) -> DiffResult<f64> {
    let n = path.sample_count();
    let latdim = path.latents.len() / n;
    let dim = path.acceleration.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let z = Tensor::vector(path.latents.data()[i * latdim..(i + 1) * latdim].to_vec());
        let jac = jacobian(decoder, &z)?;
        let acc = &path.acceleration.data()[i * dim..(i + 1) * dim];
        let mut sq = 0.0;
        for col in 0..latdim {
            let mut proj = 0.0;
            for row in 0..dim {
                proj += acc[row] * jac.data()[row * latdim + col];
            }
            sq += proj * proj;
        }
        total += sq.sqrt();
    }
    Ok(total / n as f64)
}

/// Length surrogate: the plain sum of decoded speeds over the samples.
pub fn loss_min_geodesic(path: &DecodedPath) -> f64 {
    path.speeds().iter().sum()
}

/// Relative weights of the three path penalties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub insertion: f64,
    pub geodesic: f64,
    pub min_geodesic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { insertion: 1.0, geodesic: 0.01, min_geodesic: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> DiffResult<()> {
        if self.insertion >= 0.0 && self.geodesic >= 0.0 && self.min_geodesic >= 0.0 {
            Ok(())
        } else {
            Err(DiffError::Domain {
                op: "loss_weights",
                detail: "weights must be non-negative".into(),
            })
        }
    }
}

/// Weighted path loss with its unweighted parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub insertion: f64,
    pub geodesic: f64,
    pub min_geodesic: f64,
}

/// Full path objective for a curve under the given weights.
pub fn total_loss(
    decoder: &dyn DiffFn,
    curve: &CubicCurve,
    sampling: &CurveSampling,
    weights: &LossWeights,
) -> DiffResult<LossReport> {
    weights.validate()?;
    let path = decode_curve(decoder, curve, sampling)?;
    let insertion = loss_insertion(&path)?;
    let geodesic = loss_geodesic(decoder, &path)?;
    let min_geodesic = loss_min_geodesic(&path);
    Ok(LossReport {
        total: weights.insertion * insertion
            + weights.geodesic * geodesic
            + weights.min_geodesic * min_geodesic,
        insertion,
        geodesic,
        min_geodesic,
    })
}

/// Optimizer settings for curve fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub weights: LossWeights,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, steps: 500, weights: LossWeights::default() }
    }
}

/// Result of a curve fit: the best curve seen, the per-step total-loss
/// trace, and whether the fit fell back to the straight segment after
/// hitting non-finite numbers.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub curve: CubicCurve,
    pub trace: Vec<f64>,
    pub best_loss: f64,
    pub diverged: bool,
}

/// Differentiable total loss for free coefficients `a`, `b` on a tape.
/// The decoder Jacobians in the tangential-acceleration term are held
/// constant for the step: differentiating through them would need second
/// decoder derivatives, and their drift per step is second-order.
pub fn build_fit_loss(
    tape: &Tape,
    decoder: &dyn DiffFn,
    z1: &Tensor,
    z2: &Tensor,
    av: &Var,
    bv: &Var,
    sampling: &CurveSampling,
    weights: &LossWeights,
) -> DiffResult<Var> {
    let plan = stencil_plan(sampling);
    let chord: Vec<f64> = z1.data().iter().zip(z2.data()).map(|(p, q)| q - p).collect();
    let cv = tape.constant(Tensor::vector(chord))?.sub(av)?.sub(bv)?;
    let z1v = tape.constant(z1.clone())?;
    let z2v = tape.constant(z2.clone())?;

    let mut decoded: Vec<Var> = Vec::with_capacity(plan.s_values.len());
    let mut latent_values: Vec<Tensor> = Vec::with_capacity(plan.s_values.len());
    for &s in &plan.s_values {
        let g = if s == 0.0 {
            z1v.clone()
        } else if s == 1.0 {
            z2v.clone()
        } else {
            let (s2, s3) = (s * s, s * s * s);
            av.mul_scalar(s3)?
                .add(&bv.mul_scalar(s2)?)?
                .add(&cv.mul_scalar(s)?)?
                .add(&z1v)?
        };
        latent_values.push(g.value());
        decoded.push(decoder.apply(tape, &g)?);
    }

    let combine = |terms: &[(usize, f64)]| -> DiffResult<Var> {
        let mut acc = decoded[terms[0].0].mul_scalar(terms[0].1)?;
        for &(p, w) in &terms[1..] {
            acc = acc.add(&decoded[p].mul_scalar(w)?)?;
        }
        Ok(acc)
    };

    let n = sampling.n as f64;
    let mut speeds: Vec<Var> = Vec::with_capacity(sampling.n);
    let mut geo_terms: Vec<Var> = Vec::with_capacity(sampling.n);
    for st in &plan.samples {
        let d1 = combine(&st.d1)?;
        speeds.push(d1.sum_squares()?.sqrt()?);
        if weights.geodesic > 0.0 {
            let d2 = combine(&st.d2)?;
            let jac = jacobian(decoder, &latent_values[st.center])?;
            let jc = tape.constant(jac)?;
            let row = d2.reshape(&[1, d2.value().len()])?;
            geo_terms.push(row.matmul(&jc)?.sum_squares()?.sqrt()?);
        }
    }

    let mut speed_sum = speeds[0].clone();
    for s in &speeds[1..] {
        speed_sum = speed_sum.add(s)?;
    }

    let mut total = speed_sum.mul_scalar(weights.min_geodesic)?;
    if weights.insertion > 0.0 {
        let mean = speed_sum.mul_scalar(1.0 / n)?;
        if mean.item()? <= 0.0 {
            return Err(DiffError::Domain {
                op: "loss_insertion",
                detail: "degenerate curve: zero mean speed".into(),
            });
        }
        let mut ins = tape.constant(Tensor::scalar(0.0))?;
        for v in &speeds {
            let dev = v.div(&mean)?.add_scalar(-1.0)?;
            ins = ins.add(&dev.mul(&dev)?)?;
        }
        total = total.add(&ins.mul_scalar(weights.insertion / n)?)?;
    }
    if weights.geodesic > 0.0 {
        let mut geo = geo_terms[0].clone();
        for t in &geo_terms[1..] {
            geo = geo.add(t)?;
        }
        total = total.add(&geo.mul_scalar(weights.geodesic / n)?)?;
    }
    Ok(total)
}

/// Fit the free cubic coefficients between two latent endpoints with Adam,
/// starting from the straight segment. Returns the best curve seen across
/// all steps; if any step produces non-finite numbers the straight segment
/// comes back with `diverged` set.
pub fn fit_geodesic(
    decoder: &dyn DiffFn,
    z1: &Tensor,
    z2: &Tensor,
    sampling: &CurveSampling,
    cfg: &FitConfig,
) -> DiffResult<FitResult> {
    cfg.weights.validate()?;
    if cfg.learning_rate < 0.0 {
        return Err(DiffError::Domain {
            op: "fit_geodesic",
            detail: format!("negative learning rate {}", cfg.learning_rate),
        });
    }
    let linear = CubicCurve::linear(z1.clone(), z2.clone())?;
    if z1 == z2 {
        // Constant curve: every loss is zero and the insertion ratio is
        // undefined, so there is nothing to optimize.
        return Ok(FitResult { curve: linear, trace: Vec::new(), best_loss: 0.0, diverged: false });
    }

    let j = z1.len();
    let mut a = Tensor::zeros(&[j]);
    let mut b = Tensor::zeros(&[j]);
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
        weight_decay: 0.0,
    };
    let mut adam = Adam::new(adam_cfg, &[&a, &b]);

    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut best_loss = f64::INFINITY;
    let mut best = (a.clone(), b.clone());
    let fallback = |trace: Vec<f64>| FitResult {
        curve: linear.clone(),
        trace,
        best_loss: f64::INFINITY,
        diverged: true,
    };

    for step in 0..=cfg.steps {
        let tape = Tape::new();
        let evaluated = (|| -> DiffResult<(f64, Tensor, Tensor)> {
            let av = tape.leaf(a.clone())?;
            let bv = tape.leaf(b.clone())?;
            let loss = build_fit_loss(&tape, decoder, z1, z2, &av, &bv, sampling, &cfg.weights)?;
            let value = loss.item()?;
            if step < cfg.steps {
                tape.backward(&loss)?;
            }
            let ga = av.grad().unwrap_or_else(|| Tensor::zeros(&[j]));
            let gb = bv.grad().unwrap_or_else(|| Tensor::zeros(&[j]));
            Ok((value, ga, gb))
        })();
        let (value, ga, gb) = match evaluated {
            Ok(v) => v,
            Err(DiffError::NonFinite { .. }) | Err(DiffError::Domain { op: "loss_insertion", .. }) => {
                return Ok(fallback(trace));
            }
            Err(e) => return Err(e),
        };
        trace.push(value);
        if value < best_loss {
            best_loss = value;
            best = (a.clone(), b.clone());
        }
        // The last pass only evaluates the final parameters.
        if step < cfg.steps {
            adam.step(&mut [&mut a, &mut b], &[&ga, &gb]);
        }
    }

    Ok(FitResult {
        curve: CubicCurve::new(z1.clone(), z2.clone(), best.0, best.1)?,
        trace,
        best_loss,
        diverged: false,
    })
}

/// CSV rendering of a decoded path: `s`, the decoded speed, and the
/// latent coordinates per row.
pub fn curve_csv(path: &DecodedPath) -> String {
    let n = path.sample_count();
    let j = path.latents.len() / n;
    let mut out = String::from("s,speed");
    for k in 1..=j {
        out.push_str(&format!(",g_{k}"));
    }
    out.push('\n');
    let speeds = path.speeds();
    for i in 0..n {
        out.push_str(&format!("{},{}", path.s[i], speeds[i]));
        for k in 0..j {
            out.push_str(&format!(",{}", path.latents.data()[i * j + k]));
        }
        out.push('\n');
    }
    out
}
