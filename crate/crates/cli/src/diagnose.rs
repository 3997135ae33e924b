//! `diagnose` command: sample the latent prior and report the pullback
//! metric of the decoder at each sample.

use std::collections::BTreeMap;

use geovae::manifold::{normalized_mfs, pullback_metric};
use geovae::rng;
use geovae::Tensor;
use geovae::vae::load_checkpoint;

use crate::config::{write_text, Failure, Resolved};

const DEFAULT_SAMPLES: usize = 8000;

pub fn run(resolved: &Resolved, notes: &mut Vec<String>) -> Result<(), Failure> {
    let checkpoint = resolved.require_checkpoint()?;
    let (model, _, _) = load_checkpoint(checkpoint).map_err(Failure::from_data)?;
    let latent = model.config().latent_dim();

    let samples = resolved.diagnose.samples.unwrap_or(DEFAULT_SAMPLES);
    if samples == 0 {
        return Err(Failure::Config("diagnose needs at least one sample".into()));
    }

    let decoder = |tape: &geovae::Tape, z: &geovae::Var| model.decode_var(tape, z);

    let mut r = rng::seeded(resolved.seed);
    let mut conds = Vec::with_capacity(samples);
    let mut mfs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let z = Tensor::vector(rng::gaussian_vec(&mut r, latent));
        let metric = pullback_metric(&decoder, &z).map_err(Failure::from_numeric)?;
        conds.push(metric.condition_number());
        mfs.push(metric.magnification_factor().map_err(Failure::from_numeric)?);
    }
    let normalized = normalized_mfs(&mfs).map_err(Failure::from_numeric)?;

    let mut csv = String::from("z_index,condition_number,mf,normalized_mf\n");
    for i in 0..samples {
        csv.push_str(&format!("{i},{},{},{}\n", conds[i], mfs[i], normalized[i]));
    }
    write_text(&resolved.out.join("diagnostics.csv"), &csv)?;

    let mut summary = BTreeMap::new();
    summary.insert("samples", serde_json::json!(samples));
    summary.insert("latent_dim", serde_json::json!(latent));
    summary.insert("condition_number_mean", serde_json::json!(mean(&conds)));
    summary.insert("condition_number_median", serde_json::json!(median(&conds)));
    summary.insert("mf_mean", serde_json::json!(mean(&mfs)));
    summary.insert("mf_median", serde_json::json!(median(&mfs)));
    summary.insert(
        "normalized_mf_mean",
        serde_json::json!(mean(&normalized)),
    );
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Failure::Data(format!("diagnostics summary: {e}")))?;
    write_text(&resolved.out.join("diagnostics_summary.json"), &text)?;

    notes.push(format!(
        "diagnosed {samples} prior samples, median condition number {:.6}",
        median(&conds)
    ));
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
