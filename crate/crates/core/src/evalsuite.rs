//! Quantitative evaluation: importance-weighted likelihood estimates,
//! bits per dimension, noise-corruption sweeps, PSNR, reconstruction-error
//! ROC analysis, and gradient-norm ratio tracking.

use crate::diffcore::{DiffError, DiffResult, Tensor};
use crate::vae::{standard_normal_log_density, LayerGradRecord, VaeModel};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// `log(mean(exp(v)))` with the max-shift trick, safe for entries spanning
/// the whole finite exponent range.
pub fn log_mean_exp(log_values: &[f64]) -> f64 {
    let m = log_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = log_values.iter().map(|v| (v - m).exp()).sum();
    m + (sum / log_values.len() as f64).ln()
}

/// Importance-weighted log-likelihood estimate of `target` with proposals
/// drawn from the posterior of `input`. With `input == target` this is the
/// usual estimate; a denoising evaluation encodes the corrupted image and
/// scores the clean one.
pub fn iw_loglik_pair(
    model: &VaeModel,
    input: &Tensor,
    target: &Tensor,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> DiffResult<f64> {
    if k == 0 {
        return Err(DiffError::Domain {
            op: "iw_loglik",
            detail: "need at least one importance sample".into(),
        });
    }
    let mut log_w = Vec::with_capacity(k);
    for _ in 0..k {
        let pair = model.encode(input, rng)?;
        let loglik = model.conditional_log_likelihood(target, &pair.z_a, &pair.z_b)?;
        let prior = standard_normal_log_density(&pair.z_a) + standard_normal_log_density(&pair.z_b);
        let proposal = pair.posterior_a.log_density(&pair.z_a)
            + pair.posterior_b.log_density(&pair.z_b);
        log_w.push(loglik + prior - proposal);
    }
    Ok(log_mean_exp(&log_w))
}

/// Importance-weighted log-likelihood estimate of `x` with `k` posterior
/// samples.
pub fn iw_loglik(model: &VaeModel, x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> DiffResult<f64> {
    iw_loglik_pair(model, x, x, k, rng)
}

/// Unit conversion from nats of log-likelihood to bits per dimension.
pub fn bits_per_dim(loglik: f64, dimensions: usize) -> DiffResult<f64> {
    if dimensions == 0 {
        return Err(DiffError::Domain {
            op: "bits_per_dim",
            detail: "dimensions must be positive".into(),
        });
    }
    Ok(-loglik / (dimensions as f64 * std::f64::consts::LN_2))
}

/// Pixel corruption model for denoising sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Each pixel is independently replaced, with probability `level`, by
    /// a fair coin flip between 0 and 1.
    SaltPepper,
    /// Additive zero-mean Gaussian noise with standard deviation `level`,
    /// clamped back to [0,1].
    Gaussian,
}

/// Corrupt one image (any shape, values in [0,1]).
pub fn corrupt(
    image: &Tensor,
    kind: NoiseKind,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> DiffResult<Tensor> {
    if !(0.0..=1.0).contains(&level) {
        return Err(DiffError::Domain {
            op: "corrupt",
            detail: format!("noise level {level} outside [0,1]"),
        });
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(DiffError::Domain {
            op: "corrupt",
            detail: "image values must lie in [0,1]".into(),
        });
    }
    let mut out = image.clone();
    match kind {
        NoiseKind::SaltPepper => {
            for v in out.data_mut() {
                if rng.gen::<f64>() < level {
                    *v = if rng.gen::<f64>() < 0.5 { 0.0 } else { 1.0 };
                }
            }
        }
        NoiseKind::Gaussian => {
            for v in out.data_mut() {
                *v = (*v + level * crate::rng::next_gaussian(rng)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Corrupt every row of an `[N,D]` batch.
pub fn corrupt_batch(
    batch: &Tensor,
    kind: NoiseKind,
    level: f64,
    rng: &mut ChaCha8Rng,
) -> DiffResult<Tensor> {
    corrupt(batch, kind, level, rng)
}

/// One scored item of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub split: String,
    pub value: f64,
}

/// Per-item values with their aggregates. Aggregates are always derived
/// from the rows in index order, so they can be recomputed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl EvalReport {
    pub fn new(split: &str, values: Vec<f64>) -> Self {
        let rows: Vec<EvalRow> = values
            .into_iter()
            .enumerate()
            .map(|(index, value)| EvalRow { index, split: split.to_string(), value })
            .collect();
        let (mean, median, std) = aggregate(&rows);
        Self { rows, mean, median, std }
    }

    /// `index,split,value` rows under a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,split,value\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.index, r.split, r.value));
        }
        out
    }
}

fn aggregate(rows: &[EvalRow]) -> (f64, f64, f64) {
    if rows.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.value).sum::<f64>() / n;
    let mut sorted: Vec<f64> = rows.iter().map(|r| r.value).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    let std = (rows.iter().map(|r| (r.value - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, median, std)
}

/// Denoising evaluation at one noise level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiseLevel {
    pub level: f64,
    /// Negative importance-weighted log-likelihood of the clean images
    /// under posteriors from their corrupted versions.
    pub nll: EvalReport,
    /// Mean PSNR of deterministic reconstructions against the clean
    /// images; infinite when any reconstruction is exact.
    pub mean_psnr: f64,
}

/// Full denoising sweep over noise levels, rows sorted by level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub kind: NoiseKind,
    pub samples: usize,
    pub seed: u64,
    pub levels: Vec<DenoiseLevel>,
}

/// Corrupt the dataset at each level, then score the clean images through
/// the corrupted posteriors.
pub fn denoise_sweep(
    model: &VaeModel,
    data: &Tensor,
    kind: NoiseKind,
    levels: &[f64],
    k: usize,
    seed: u64,
) -> DiffResult<DenoiseReport> {
    let (n, d) = match *data.shape() {
        [n, d] if n > 0 => (n, d),
        _ => {
            return Err(DiffError::InvalidShape {
                op: "denoise_sweep",
                shape: data.shape().to_vec(),
                detail: "expected non-empty [N,D]".into(),
            })
        }
    };
    let mut sorted_levels = levels.to_vec();
    sorted_levels.sort_by(|a, b| a.total_cmp(b));
    let mut out = Vec::with_capacity(sorted_levels.len());
    for (li, &level) in sorted_levels.iter().enumerate() {
        let mut rng = crate::rng::seeded(seed.wrapping_add(li as u64));
        let mut nll = Vec::with_capacity(n);
        let mut psnr_sum = 0.0;
        for i in 0..n {
            let clean = Tensor::vector(data.data()[i * d..(i + 1) * d].to_vec());
            let noisy = corrupt(&clean, kind, level, &mut rng)?;
            nll.push(-iw_loglik_pair(model, &noisy, &clean, k, &mut rng)?);
            let recon = model.reconstruct(&noisy)?.reshaped(&[d])?;
            psnr_sum += psnr(&recon, &clean)?.db();
        }
        out.push(DenoiseLevel {
            level,
            nll: EvalReport::new("denoise", nll),
            mean_psnr: psnr_sum / n as f64,
        });
    }
    Ok(DenoiseReport { kind, samples: k, seed, levels: out })
}

/// Peak signal-to-noise ratio; exact reconstructions are flagged instead
/// of silently returning a number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Psnr {
    Finite(f64),
    /// Zero reconstruction error.
    Infinite,
}

impl Psnr {
    pub fn db(&self) -> f64 {
        match self {
            Psnr::Finite(v) => *v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

/// PSNR in dB between two same-shape images with values in [0,1]:
/// `10 log10(1/MSE)`.
pub fn psnr(reconstruction: &Tensor, target: &Tensor) -> DiffResult<Psnr> {
    if reconstruction.shape() != target.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "psnr",
            lhs: reconstruction.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    for t in [reconstruction, target] {
        if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DiffError::Domain {
                op: "psnr",
                detail: "values must lie in [0,1]".into(),
            });
        }
    }
    let mse = reconstruction
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reconstruction.len() as f64;
    if mse == 0.0 {
        Ok(Psnr::Infinite)
    } else {
        Ok(Psnr::Finite(10.0 * (1.0 / mse).log10()))
    }
}

/// One point of a ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve with its trapezoidal area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// `fpr,tpr` rows under a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.fpr, p.tpr));
        }
        out
    }
}

/// ROC over raw scores where outliers are expected to score higher.
/// Tied scores advance both rates together, so the area equals the
/// normalized pair-ordering statistic with half credit for ties.
pub fn roc_from_scores(inlier_scores: &[f64], outlier_scores: &[f64]) -> DiffResult<RocCurve> {
    if inlier_scores.is_empty() || outlier_scores.is_empty() {
        return Err(DiffError::Domain {
            op: "roc",
            detail: "both score sets must be non-empty".into(),
        });
    }
    let mut scored: Vec<(f64, bool)> = inlier_scores
        .iter()
        .map(|&s| (s, false))
        .chain(outlier_scores.iter().map(|&s| (s, true)))
        .collect();
    if scored.iter().any(|(s, _)| !s.is_finite()) {
        return Err(DiffError::NonFinite { op: "roc" });
    }
    // Descending scores: lowering the threshold admits items in order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (outlier_scores.len() as f64, inlier_scores.len() as f64);
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let mut auc = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        // Consume the whole tie group at once.
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            if scored[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        i = j;
        let prev = *points.last().unwrap();
        let next = RocPoint { fpr: fp as f64 / nn, tpr: tp as f64 / np };
        auc += (next.fpr - prev.fpr) * 0.5 * (next.tpr + prev.tpr);
        points.push(next);
    }
    Ok(RocCurve { points, auc })
}

/// Mean squared reconstruction error of one image under the model.
pub fn reconstruction_mse(model: &VaeModel, x: &Tensor) -> DiffResult<f64> {
    let recon = model.reconstruct(x)?;
    Ok(recon
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// Outlier detection by reconstruction error: score both `[N,D]` sets,
/// then sweep every threshold.
pub fn roc_outlier(model: &VaeModel, inliers: &Tensor, outliers: &Tensor) -> DiffResult<RocCurve> {
    let score_set = |set: &Tensor| -> DiffResult<Vec<f64>> {
        let (n, d) = match *set.shape() {
            [n, d] if n > 0 => (n, d),
            _ => {
                return Err(DiffError::InvalidShape {
                    op: "roc_outlier",
                    shape: set.shape().to_vec(),
                    detail: "expected non-empty [N,D]".into(),
                })
            }
        };
        (0..n)
            .map(|i| {
                reconstruction_mse(model, &Tensor::vector(set.data()[i * d..(i + 1) * d].to_vec()))
            })
            .collect()
    };
    roc_from_scores(&score_set(inliers)?, &score_set(outliers)?)
}

/// One layer's gradient-norm ratio in one epoch. `ratio` is the norm of
/// the loss gradient at the layer input over the norm at the layer output;
/// a zero output norm is flagged as `None` rather than emitted as a number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub epoch: usize,
    pub layer: String,
    pub pooling: bool,
    pub ratio: Option<f64>,
}

/// Convert raw per-layer gradient norms into ratio points.
pub fn grad_ratio_track(records: &[LayerGradRecord]) -> Vec<RatioPoint> {
    records
        .iter()
        .map(|r| RatioPoint {
            epoch: r.epoch,
            layer: r.layer.clone(),
            pooling: r.pooling,
            ratio: (r.output_norm > 0.0).then(|| r.input_norm / r.output_norm),
        })
        .collect()
}

/// Per-epoch median ratio over layers with the given pooling flag,
/// skipping flagged entries; epochs with no usable layer are omitted.
pub fn ratio_median_series(points: &[RatioPoint], pooling: bool) -> Vec<(usize, f64)> {
    let mut epochs: Vec<usize> = points.iter().map(|p| p.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let mut out = Vec::new();
    for e in epochs {
        let mut vals: Vec<f64> = points
            .iter()
            .filter(|p| p.epoch == e && p.pooling == pooling)
            .filter_map(|p| p.ratio)
            .collect();
        if vals.is_empty() {
            continue;
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        let mid = vals.len() / 2;
        let med = if vals.len() % 2 == 1 {
            vals[mid]
        } else {
            0.5 * (vals[mid - 1] + vals[mid])
        };
        out.push((e, med));
    }
    out
}
