//! `interpolate`: fit a geodesic between two latent points of a trained
//! model and dump both the fitted and the straight-line path.

use crate::config::{Failure, Resolved, write_text};
use crate::data::build_dataset;
use geovae::geointerp::{
    curve_csv, decode_curve, fit_geodesic, linear_baseline, total_loss, CurveSampling,
    DecodedPath, FitConfig, LossWeights,
};
use geovae::rng;
use geovae::vae::{load_checkpoint, VaeModel};
use geovae::{Tape, Tensor, Var};
use serde::Serialize;

#[derive(Serialize)]
struct InterpolationSummary {
    z1: Vec<f64>,
    z2: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    samples: usize,
    delta: f64,
    steps: usize,
    learning_rate: f64,
    weights: LossWeights,
    seed: u64,
    diverged: bool,
    best_loss: f64,
    geodesic: PathSummary,
    linear: PathSummary,
}

#[derive(Serialize)]
struct PathSummary {
    total: f64,
    insertion: f64,
    geodesic: f64,
    min_geodesic: f64,
    decoded_length: f64,
}

pub fn run(resolved: &Resolved, notes: &mut Vec<String>) -> Result<(), Failure> {
    let (model, _train_config, _epoch) =
        load_checkpoint(resolved.require_checkpoint()?).map_err(Failure::from_data)?;
    let latent = model.config().latent_dim();
    let (z1, z2) = endpoints(resolved, &model, latent)?;

    let ov = &resolved.interpolate;
    let sampling = CurveSampling::new(
        ov.samples.unwrap_or(CurveSampling::default().count()),
        ov.delta.unwrap_or(CurveSampling::default().step()),
    )
    .map_err(|e| Failure::Config(e.to_string()))?;
    let defaults = LossWeights::default();
    let weights = LossWeights {
        insertion: ov.insertion_weight.unwrap_or(defaults.insertion),
        geodesic: ov.geodesic_weight.unwrap_or(defaults.geodesic),
        min_geodesic: ov.min_geodesic_weight.unwrap_or(defaults.min_geodesic),
    };
    weights.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let fit_defaults = FitConfig::default();
    let fit_config = FitConfig {
        learning_rate: ov.learning_rate.unwrap_or(fit_defaults.learning_rate),
        steps: ov.steps.unwrap_or(fit_defaults.steps),
        weights,
    };

    let decoder = |tape: &Tape, z: &Var| model.decode_var(tape, z);
    let fit = fit_geodesic(&decoder, &z1, &z2, &sampling, &fit_config)
        .map_err(Failure::from_numeric)?;
    let geo_path = decode_curve(&decoder, &fit.curve, &sampling).map_err(Failure::from_numeric)?;
    let lin_path =
        linear_baseline(&decoder, &z1, &z2, &sampling).map_err(Failure::from_numeric)?;
    let geo_loss =
        total_loss(&decoder, &fit.curve, &sampling, &weights).map_err(Failure::from_numeric)?;
    let lin_curve = geovae::geointerp::CubicCurve::linear(z1.clone(), z2.clone())
        .map_err(Failure::from_numeric)?;
    let lin_loss =
        total_loss(&decoder, &lin_curve, &sampling, &weights).map_err(Failure::from_numeric)?;

    write_text(&resolved.out.join("curve.csv"), &curve_csv(&geo_path))?;
    write_text(&resolved.out.join("linear.csv"), &curve_csv(&lin_path))?;
    write_text(&resolved.out.join("decoded_curve.csv"), &decoded_csv(&geo_path))?;
    write_text(&resolved.out.join("decoded_linear.csv"), &decoded_csv(&lin_path))?;

    let summary = InterpolationSummary {
        z1: z1.data().to_vec(),
        z2: z2.data().to_vec(),
        a: fit.curve.a().data().to_vec(),
        b: fit.curve.b().data().to_vec(),
        samples: sampling.count(),
        delta: sampling.step(),
        steps: fit_config.steps,
        learning_rate: fit_config.learning_rate,
        weights,
        seed: resolved.seed,
        diverged: fit.diverged,
        best_loss: fit.best_loss,
        geodesic: PathSummary {
            total: geo_loss.total,
            insertion: geo_loss.insertion,
            geodesic: geo_loss.geodesic,
            min_geodesic: geo_loss.min_geodesic,
            decoded_length: geo_path.length(),
        },
        linear: PathSummary {
            total: lin_loss.total,
            insertion: lin_loss.insertion,
            geodesic: lin_loss.geodesic,
            min_geodesic: lin_loss.min_geodesic,
            decoded_length: lin_path.length(),
        },
    };
    let body = serde_json::to_string_pretty(&summary)
        .map_err(|e| Failure::Data(format!("summary serialization: {e}")))?;
    write_text(&resolved.out.join("interpolation.json"), &body)?;

    if fit.diverged {
        notes.push("geodesic fit aborted on a degenerate or non-finite loss; outputs hold the linear fallback".into());
        return Err(Failure::Numeric(
            "geodesic fit aborted; linear fallback written".into(),
        ));
    }
    Ok(())
}

/// Endpoints from raw latent vectors when given, else encoded from
/// dataset indices.
fn endpoints(
    resolved: &Resolved,
    model: &VaeModel,
    latent: usize,
) -> Result<(Tensor, Tensor), Failure> {
    let ov = &resolved.interpolate;
    match (&ov.z1, &ov.z2) {
        (Some(a), Some(b)) => {
            for (name, v) in [("z1", a), ("z2", b)] {
                if v.len() != latent {
                    return Err(Failure::Config(format!(
                        "{name} has {} coordinates, the model's latent space has {latent}",
                        v.len()
                    )));
                }
            }
            Ok((Tensor::vector(a.clone()), Tensor::vector(b.clone())))
        }
        (None, None) => {
            let (from, to) = match (ov.from, ov.to) {
                (Some(f), Some(t)) => (f, t),
                _ => {
                    return Err(Failure::Config(
                        "endpoints missing: give --from/--to dataset indices or --z1/--z2 latents"
                            .into(),
                    ))
                }
            };
            let dataset = build_dataset(resolved.require_dataset()?, resolved.limit, resolved.seed)?;
            for (name, i) in [("--from", from), ("--to", to)] {
                if i >= dataset.len() {
                    return Err(Failure::Data(format!(
                        "{name} index {i} out of range, dataset has {} items",
                        dataset.len()
                    )));
                }
            }
            let mut r = rng::seeded(resolved.seed);
            let embed = |i: usize, r: &mut rng::ChaCha8Rng| -> Result<Tensor, Failure> {
                let row = dataset.row(i).map_err(Failure::from_data)?;
                let pair = model.encode(&row, r).map_err(Failure::from_numeric)?;
                // Posterior means: deterministic endpoints.
                let mut z = pair.posterior_a.mean().data().to_vec();
                z.extend(pair.posterior_b.mean().data());
                Ok(Tensor::vector(z))
            };
            Ok((embed(from, &mut r)?, embed(to, &mut r)?))
        }
        _ => Err(Failure::Config(
            "give both --z1 and --z2, or neither".into(),
        )),
    }
}

/// Decoded frames, one row per curve sample: `s` then the decoder output.
fn decoded_csv(path: &DecodedPath) -> String {
    let n = path.sample_count();
    let d = path.points().len() / n;
    let mut out = String::from("s");
    for k in 1..=d {
        out.push_str(&format!(",x_{k}"));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!("{}", path.locations()[i]));
        for k in 0..d {
            out.push_str(&format!(",{}", path.points().data()[i * d + k]));
        }
        out.push('\n');
    }
    out
}
