//! `evaluate` command: importance-weighted log-likelihood, denoising sweep,
//! and an optional held-out-class outlier ROC, all on a test split.

use serde::Serialize;

use geovae::datahub::Dataset;
use geovae::evalsuite::{bits_per_dim, denoise_sweep, iw_loglik, roc_outlier, EvalReport};
use geovae::rng;
use geovae::Tensor;
use geovae::vae::{load_checkpoint, VaeModel};

use crate::config::{write_text, Failure, Resolved};
use crate::data::build_dataset;

const DEFAULT_LEVELS: [f64; 3] = [0.10, 0.25, 0.40];
const DEFAULT_IW_K: usize = 50;

#[derive(Debug, Serialize)]
struct EvalSummary {
    samples: usize,
    iw_k: usize,
    loglik_mean: f64,
    loglik_median: f64,
    loglik_std: f64,
    bits_per_dim: f64,
    noise_kind: geovae::evalsuite::NoiseKind,
    /// Absent when the sweep was skipped for non-pixel data.
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_levels: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    holdout: Option<HoldoutSummary>,
}

#[derive(Debug, Serialize)]
struct HoldoutSummary {
    label: i64,
    inliers: usize,
    outliers: usize,
    auc: f64,
    /// Scores are negative importance-weighted log-likelihoods, so the
    /// held-out class is expected to score higher.
    protocol: String,
}

pub fn run(resolved: &Resolved, notes: &mut Vec<String>) -> Result<(), Failure> {
    let checkpoint = resolved.require_checkpoint()?;
    let (model, _, _) = load_checkpoint(checkpoint).map_err(Failure::from_data)?;
    let spec = resolved.require_dataset()?;

    let overlay = &resolved.evaluate;
    let cap = match (resolved.limit, overlay.samples) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let mut dataset = build_dataset(spec, cap, resolved.seed)?;
    dataset.split = "test".into();
    if dataset.is_empty() {
        return Err(Failure::Data("empty test split, nothing to evaluate".into()));
    }
    if model.config().data_dim() != dataset.item_dims() {
        return Err(Failure::Config(format!(
            "checkpoint expects {}-dimensional items but the dataset has {}-dimensional items",
            model.config().data_dim(),
            dataset.item_dims()
        )));
    }

    let k = overlay.iw_k.unwrap_or(DEFAULT_IW_K);
    if k == 0 {
        return Err(Failure::Config("iw_k must be at least 1".into()));
    }
    let kind = overlay.noise_kind()?;
    let levels = overlay.levels.clone().unwrap_or_else(|| DEFAULT_LEVELS.to_vec());
    if levels.is_empty() {
        return Err(Failure::Config("noise levels must not be empty".into()));
    }

    // Per-image importance-weighted log-likelihood.
    let mut r = rng::seeded(resolved.seed);
    let mut values = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let row = dataset.row(i).map_err(Failure::from_data)?;
        values.push(iw_loglik(&model, &row, k, &mut r).map_err(Failure::from_numeric)?);
    }
    let report = EvalReport::new(&dataset.split, values);
    let bits = bits_per_dim(report.mean, dataset.item_dims()).map_err(Failure::from_numeric)?;

    // Denoising sweep on the flattened split. Corruption models are
    // defined on pixel values, so non-pixel data skips the sweep instead
    // of aborting the whole evaluation.
    let flat = dataset.flat().map_err(Failure::from_data)?;
    let pixel_valued = flat.data().iter().all(|v| (0.0..=1.0).contains(v));
    let sweep = if pixel_valued {
        Some(
            denoise_sweep(&model, &flat, kind, &levels, k, resolved.seed)
                .map_err(Failure::from_numeric)?,
        )
    } else {
        notes.push("denoising sweep skipped: data values fall outside [0, 1]".into());
        None
    };
    let denoise_csv = sweep.as_ref().map(|sweep| {
        let mut csv = String::from("level,mean_nll,median_nll,std_nll,mean_psnr\n");
        for level in &sweep.levels {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                level.level, level.nll.mean, level.nll.median, level.nll.std, level.mean_psnr
            ));
        }
        csv
    });

    // Optional held-out-class ROC.
    let holdout = match overlay.holdout {
        Some(label) => Some(holdout_roc(&model, &dataset, label, resolved, notes)?),
        None => None,
    };

    write_text(&resolved.out.join("eval_loglik.csv"), &report.to_csv())?;
    if let Some(csv) = &denoise_csv {
        write_text(&resolved.out.join("denoise.csv"), csv)?;
    }

    let summary = EvalSummary {
        samples: dataset.len(),
        iw_k: k,
        loglik_mean: report.mean,
        loglik_median: report.median,
        loglik_std: report.std,
        bits_per_dim: bits,
        noise_kind: kind,
        noise_levels: sweep
            .as_ref()
            .map(|s| s.levels.iter().map(|l| l.level).collect()),
        holdout,
    };
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Failure::Data(format!("evaluation summary: {e}")))?;
    write_text(&resolved.out.join("eval_summary.json"), &text)?;

    notes.push(format!(
        "evaluated {} items at K={k}: mean log-likelihood {:.6} ({:.6} bits/dim)",
        dataset.len(),
        report.mean,
        bits
    ));
    Ok(())
}

fn holdout_roc(
    model: &VaeModel,
    dataset: &Dataset,
    label: i64,
    resolved: &Resolved,
    notes: &mut Vec<String>,
) -> Result<HoldoutSummary, Failure> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Failure::Config("holdout ROC needs a labeled dataset".into()))?;
    let d = dataset.item_dims();
    let mut inlier_rows = Vec::new();
    let mut outlier_rows = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let row = &dataset.images.data()[i * d..(i + 1) * d];
        if *l == label {
            outlier_rows.extend_from_slice(row);
        } else {
            inlier_rows.extend_from_slice(row);
        }
    }
    let n_out = outlier_rows.len() / d;
    let n_in = inlier_rows.len() / d;
    if n_out == 0 {
        return Err(Failure::Data(format!("no items carry the held-out label {label}")));
    }
    if n_in == 0 {
        return Err(Failure::Data(format!(
            "every item carries the held-out label {label}, no inliers remain"
        )));
    }
    let inliers = Tensor::new(vec![n_in, d], inlier_rows).map_err(Failure::from_data)?;
    let outliers = Tensor::new(vec![n_out, d], outlier_rows).map_err(Failure::from_data)?;
    let roc = roc_outlier(model, &inliers, &outliers).map_err(Failure::from_numeric)?;
    write_text(&resolved.out.join("roc.csv"), &roc.to_csv())?;
    notes.push(format!(
        "holdout label {label}: {n_in} inliers vs {n_out} outliers, AUC {:.6}",
        roc.auc
    ));
    Ok(HoldoutSummary {
        label,
        inliers: n_in,
        outliers: n_out,
        auc: roc.auc,
        protocol: "score = negative reconstruction likelihood, outliers expected higher".into(),
    })
}
