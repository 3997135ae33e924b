//! `train`: fit a model on the resolved dataset, write a checkpoint, the
//! per-epoch metrics CSV, gradient-ratio tracks, and the neighbour graph
//! when the geodesic pair term is active.

use crate::config::{Failure, GridSpec, ModelOverlay, Resolved, write_text};
use crate::data::build_dataset;
use geovae::datahub::Dataset;
use geovae::evalsuite::grad_ratio_track;
use geovae::manifold::NeighborGraph;
use geovae::rng;
use geovae::vae::{save_checkpoint, train, TrainConfig, TrainReport, VaeConfig, VaeModel};
use geovae::Tensor;

pub fn run(resolved: &Resolved, notes: &mut Vec<String>) -> Result<(), Failure> {
    let dataset = build_dataset(resolved.require_dataset()?, resolved.limit, resolved.seed)?;
    if dataset.is_empty() {
        return Err(Failure::Data("training dataset is empty".into()));
    }
    let model_config = build_model_config(&dataset, &resolved.model)?;
    let mut train_config = TrainConfig {
        seed: resolved.seed,
        ..TrainConfig::default()
    };
    resolved.train.apply(&mut train_config);
    if train_config.learning_rate == 0.0 {
        eprintln!("warning: learning rate 0, parameters will not change");
        notes.push("learning rate 0: parameters unchanged".into());
    }
    let data = dataset.flat().map_err(Failure::from_data)?;

    let (model, report, used_config) = match &resolved.train.grid {
        Some(grid) if !grid.learning_rates.is_empty() || !grid.gd_weights.is_empty() => {
            grid_search(resolved, &model_config, &train_config, &data, grid, notes)?
        }
        _ => {
            let mut model =
                VaeModel::new(model_config.clone(), resolved.seed).map_err(config_failure)?;
            let report = train(&mut model, &data, &train_config).map_err(Failure::from_numeric)?;
            (model, report, train_config)
        }
    };

    write_text(&resolved.out.join("metrics.csv"), &metrics_csv(&report))?;
    write_text(
        &resolved.out.join("grad_ratios.csv"),
        &grad_ratio_csv(&report),
    )?;
    if used_config.gd_weight > 0.0 {
        write_text(
            &resolved.out.join("graph.csv"),
            &graph_csv(&data, used_config.knn_k)?,
        )?;
    }
    let epoch = report.metrics.last().map(|m| m.epoch + 1).unwrap_or(0);
    save_checkpoint(&resolved.out.join("checkpoint"), &model, &used_config, epoch)
        .map_err(Failure::from_data)?;
    if report.geodesic_fallbacks > 0 {
        notes.push(format!(
            "{} geodesic pairs used the penalized Euclidean fallback",
            report.geodesic_fallbacks
        ));
    }
    if let Some(div) = &report.diverged {
        notes.push(format!("training diverged in epoch {}: {}", div.epoch, div.detail));
        return Err(Failure::Numeric(format!(
            "training aborted on non-finite numbers in epoch {}: {}",
            div.epoch, div.detail
        )));
    }
    Ok(())
}

/// Shape-derived preset with the configured adjustments on top.
fn build_model_config(dataset: &Dataset, overlay: &ModelOverlay) -> Result<VaeConfig, Failure> {
    let shape = dataset.images.shape();
    let mut cfg = if shape.len() == 3 {
        VaeConfig::images(shape[1], shape[2])
    } else {
        VaeConfig::vectors(dataset.item_dims(), overlay.latent_a.unwrap_or(2))
    };
    if let Some(v) = overlay.latent_a {
        cfg.latent_a = v;
    }
    if let Some(v) = overlay.latent_b {
        cfg.latent_b = v;
    }
    if let Some(v) = &overlay.enc_hidden {
        cfg.enc_hidden = v.clone();
    }
    if let Some(v) = &overlay.dec_hidden {
        cfg.dec_hidden = v.clone();
    }
    if let Some(v) = overlay.warp_hidden {
        cfg.warp_hidden = v;
    }
    if let Some(kind) = overlay.warp_kind()? {
        cfg.warp = kind;
        if cfg.warp.is_none() {
            cfg.latent_b = overlay.latent_b.unwrap_or(0);
        }
    }
    if let Some(v) = overlay.nonlocal_inner {
        // 0 disables the attention block.
        cfg.nonlocal_inner = (v > 0).then_some(v);
    }
    if let Some(v) = overlay.likelihood_kind()? {
        cfg.likelihood = v;
    }
    if let Some(v) = overlay.noise_scale {
        cfg.noise_scale = v;
    }
    cfg.validate().map_err(config_failure)?;
    Ok(cfg)
}

fn config_failure(err: geovae::DiffError) -> Failure {
    Failure::Config(err.to_string())
}

/// Train each declared grid point on an 80/20 split and keep the model
/// with the best validation ELBO.
fn grid_search(
    resolved: &Resolved,
    model_config: &VaeConfig,
    base: &TrainConfig,
    data: &Tensor,
    grid: &GridSpec,
    notes: &mut Vec<String>,
) -> Result<(VaeModel, TrainReport, TrainConfig), Failure> {
    let n = data.shape()[0];
    let d = data.shape()[1];
    if n < 5 {
        return Err(Failure::Config(format!(
            "grid search needs at least 5 items for a validation split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::seeded(resolved.seed ^ 0x5eed_0517), &mut order);
    let val_count = (n / 5).max(1);
    let (val_idx, train_idx) = order.split_at(val_count);
    let gather = |idx: &[usize]| -> Result<Tensor, Failure> {
        let mut rows = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            rows.extend_from_slice(&data.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(vec![idx.len(), d], rows).map_err(Failure::from_data)
    };
    let train_data = gather(train_idx)?;
    let val_rows: Vec<Tensor> = val_idx
        .iter()
        .map(|&i| Tensor::vector(data.data()[i * d..(i + 1) * d].to_vec()))
        .collect();

    let lrs = if grid.learning_rates.is_empty() {
        vec![base.learning_rate]
    } else {
        grid.learning_rates.clone()
    };
    let gds = if grid.gd_weights.is_empty() {
        vec![base.gd_weight]
    } else {
        grid.gd_weights.clone()
    };

    let mut best: Option<(f64, VaeModel, TrainReport, TrainConfig)> = None;
    let mut results = String::from("learning_rate,gd_weight,val_elbo,selected\n");
    let mut rows = Vec::new();
    for &lr in &lrs {
        for &gd in &gds {
            let mut candidate = base.clone();
            candidate.learning_rate = lr;
            candidate.gd_weight = gd;
            let mut model =
                VaeModel::new(model_config.clone(), resolved.seed).map_err(config_failure)?;
            let report =
                train(&mut model, &train_data, &candidate).map_err(Failure::from_numeric)?;
            let score = if report.diverged.is_some() {
                f64::NEG_INFINITY
            } else {
                validation_elbo(&model, &val_rows, resolved.seed)?
            };
            rows.push((lr, gd, score));
            let better = best.as_ref().map(|(s, ..)| score > *s).unwrap_or(true);
            if better {
                best = Some((score, model, report, candidate));
            }
        }
    }
    let (best_score, model, report, config) = best.expect("grid has at least one point");
    for (lr, gd, score) in rows {
        let selected = lr == config.learning_rate && gd == config.gd_weight && score == best_score;
        results.push_str(&format!("{lr},{gd},{score},{}\n", selected as u8));
    }
    write_text(&resolved.out.join("grid_results.csv"), &results)?;
    notes.push(format!(
        "grid search selected learning rate {} and pair weight {} by validation ELBO {best_score}",
        config.learning_rate, config.gd_weight
    ));
    Ok((model, report, config))
}

/// Mean single-sample ELBO over held-out rows, with shared noise across
/// candidates so the comparison is paired.
fn validation_elbo(model: &VaeModel, rows: &[Tensor], seed: u64) -> Result<f64, Failure> {
    let mut r = rng::seeded(seed.wrapping_add(0x7a11));
    let mut total = 0.0;
    for row in rows {
        total += model.elbo(row, &mut r).map_err(Failure::from_numeric)?;
    }
    Ok(total / rows.len() as f64)
}

fn metrics_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,elbo,kl,recon,pair,grad_ratio\n");
    for m in &report.metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.elbo, m.kl, m.recon, m.pair, m.grad_ratio
        ));
    }
    out
}

/// Per-epoch per-layer backward gradient-norm ratios; layers whose output
/// gradient vanished are flagged upstream and skipped here.
fn grad_ratio_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,layer,pooling,ratio\n");
    for p in grad_ratio_track(&report.grad_records) {
        if let Some(ratio) = p.ratio {
            out.push_str(&format!("{},{},{},{}\n", p.epoch, p.layer, p.pooling as u8, ratio));
        }
    }
    out
}

/// Edge list of the k-nearest-neighbour graph the pair term trained on.
fn graph_csv(data: &Tensor, k: usize) -> Result<String, Failure> {
    let n = data.shape()[0];
    let graph = NeighborGraph::build(data, k.min(n.saturating_sub(1)).max(1))
        .map_err(Failure::from_numeric)?;
    let mut out = String::from("i,j,weight\n");
    for i in 0..graph.node_count() {
        for &(j, w) in graph.neighbors(i) {
            if i < j {
                out.push_str(&format!("{i},{j},{w}\n"));
            }
        }
    }
    Ok(out)
}
