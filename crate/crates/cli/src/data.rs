//! Dataset resolution from a spec: load or generate, optionally transpose
//! and truncate.

use crate::config::{DatasetSpec, Failure};
use geovae::datahub::{self, Dataset};
use geovae::Tensor;
use std::path::Path;

pub fn build_dataset(spec: &DatasetSpec, limit: Option<usize>, seed: u64) -> Result<Dataset, Failure> {
    let dataset = match spec {
        DatasetSpec::Mnist { images, labels, transpose }
        | DatasetSpec::Fashion { images, labels, transpose }
        | DatasetSpec::Emnist { images, labels, transpose } => {
            let ds = datahub::load_idx(Path::new(images), labels.as_deref().map(Path::new))
                .map_err(Failure::from_data)?;
            if *transpose {
                ds.transposed().map_err(Failure::from_data)?
            } else {
                ds
            }
        }
        DatasetSpec::Donut { n, inner, outer } => {
            datahub::make_donut(*n, *inner, *outer, seed).map_err(Failure::from_data)?
        }
        DatasetSpec::Glyphs { n, ranges } => {
            datahub::make_glyphs(*n, *ranges, seed)
                .map_err(Failure::from_data)?
                .0
        }
    };
    let dataset = match limit {
        Some(cap) if cap < dataset.len() => truncate(&dataset, cap)?,
        _ => dataset,
    };
    dataset.validate().map_err(Failure::from_data)?;
    Ok(dataset)
}

fn truncate(dataset: &Dataset, cap: usize) -> Result<Dataset, Failure> {
    let d = dataset.item_dims();
    let mut shape = dataset.images.shape().to_vec();
    shape[0] = cap;
    let images = Tensor::new(shape, dataset.images.data()[..cap * d].to_vec())
        .map_err(Failure::from_data)?;
    Ok(Dataset {
        images,
        labels: dataset.labels.as_ref().map(|ls| ls[..cap].to_vec()),
        split: dataset.split.clone(),
        provenance: dataset.provenance.clone(),
    })
}
