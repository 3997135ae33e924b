//! Dataset ingestion and synthesis: big-endian IDX grayscale files, a 2-D
//! ring distribution for interpolation studies, and warped binary glyphs
//! with retained ground-truth transforms.

use crate::diffcore::{DiffError, DiffResult, Tensor};
use crate::rng;
use crate::stlayer::{warp_image, AffineTransform, WarpKind};
use serde::{Deserialize, Serialize};
use std::path::Path;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Where a dataset came from: a file pair, or a generator with its full
/// configuration and seed, so any dataset can be rebuilt or audited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    File {
        images: String,
        labels: Option<String>,
        transposed: bool,
    },
    Donut {
        n: usize,
        inner: f64,
        outer: f64,
        seed: u64,
    },
    Glyphs {
        n: usize,
        ranges: TransformRanges,
        seed: u64,
    },
}

/// A batch of items with optional labels and a provenance record.
///
/// Image datasets hold `[N, rows, cols]` with every pixel in [0,1]; point
/// datasets hold `[N, D]` raw coordinates. Labels, when present, align
/// one-to-one with items.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<i64>>,
    pub split: String,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened size of one item.
    pub fn item_dims(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// `[N, D]` view of the items for batch training.
    pub fn flat(&self) -> DiffResult<Tensor> {
        self.images.reshaped(&[self.len(), self.item_dims()])
    }

    /// One item as a flat vector.
    pub fn row(&self, i: usize) -> DiffResult<Tensor> {
        if i >= self.len() {
            return Err(DiffError::Domain {
                op: "dataset_row",
                detail: format!("index {i} out of range for {} items", self.len()),
            });
        }
        let d = self.item_dims();
        Ok(Tensor::vector(self.images.data()[i * d..(i + 1) * d].to_vec()))
    }

    /// Swap the two image axes of every item. Some distributions store
    /// their glyphs transposed; no loader corrects this silently, the
    /// caller decides.
    pub fn transposed(&self) -> DiffResult<Dataset> {
        let (n, h, w) = match *self.images.shape() {
            [n, h, w] => (n, h, w),
            _ => {
                return Err(DiffError::InvalidShape {
                    op: "dataset_transpose",
                    shape: self.images.shape().to_vec(),
                    detail: "expected [N, rows, cols] images".into(),
                })
            }
        };
        let src = self.images.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            for r in 0..h {
                for c in 0..w {
                    out[i * h * w + c * h + r] = src[i * h * w + r * w + c];
                }
            }
        }
        let provenance = match &self.provenance {
            Provenance::File { images, labels, transposed } => Provenance::File {
                images: images.clone(),
                labels: labels.clone(),
                transposed: !transposed,
            },
            other => other.clone(),
        };
        Ok(Dataset {
            images: Tensor::new(vec![n, w, h], out)?,
            labels: self.labels.clone(),
            split: self.split.clone(),
            provenance,
        })
    }

    /// Structural invariants: label alignment, and pixel range for image
    /// datasets.
    pub fn validate(&self) -> DiffResult<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(DiffError::Domain {
                    op: "dataset",
                    detail: format!(
                        "{} labels do not align with {} items",
                        labels.len(),
                        self.len()
                    ),
                });
            }
        }
        if self.images.shape().len() == 3
            && self.images.data().iter().any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(DiffError::Domain {
                op: "dataset",
                detail: "image pixels must lie in [0,1]".into(),
            });
        }
        Ok(())
    }
}

fn be_u32(bytes: &[u8], at: usize, file: &str) -> DiffResult<u32> {
    let end = at + 4;
    if bytes.len() < end {
        return Err(DiffError::BadContainer(format!(
            "{file}: truncated header, need {end} bytes but file has {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

fn check_magic(bytes: &[u8], want: u32, file: &str) -> DiffResult<()> {
    let got = be_u32(bytes, 0, file)?;
    if got != want {
        return Err(DiffError::BadContainer(format!(
            "{file}: magic bytes {:02x} {:02x} {:02x} {:02x} do not match expected {want:#010x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    Ok(())
}

fn parse_idx_images(bytes: &[u8], file: &str) -> DiffResult<Tensor> {
    check_magic(bytes, IDX_IMAGE_MAGIC, file)?;
    let n = be_u32(bytes, 4, file)? as usize;
    let rows = be_u32(bytes, 8, file)? as usize;
    let cols = be_u32(bytes, 12, file)? as usize;
    let expect = 16 + n * rows * cols;
    if bytes.len() != expect {
        return Err(DiffError::BadContainer(format!(
            "{file}: payload for {n} images of {rows}x{cols} needs {expect} bytes, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, rows, cols], data)
}

fn parse_idx_labels(bytes: &[u8], file: &str) -> DiffResult<Vec<i64>> {
    check_magic(bytes, IDX_LABEL_MAGIC, file)?;
    let n = be_u32(bytes, 4, file)? as usize;
    let expect = 8 + n;
    if bytes.len() != expect {
        return Err(DiffError::BadContainer(format!(
            "{file}: payload for {n} labels needs {expect} bytes, file has {}",
            bytes.len()
        )));
    }
    Ok(bytes[8..].iter().map(|&b| b as i64).collect())
}

/// Load a big-endian IDX image file, with an optional aligned label file.
/// Pixels are scaled to [0,1] by 1/255.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> DiffResult<Dataset> {
    let image_bytes = std::fs::read(images_path)?;
    let images = parse_idx_images(&image_bytes, &images_path.display().to_string())?;
    let labels = match labels_path {
        Some(p) => {
            let label_bytes = std::fs::read(p)?;
            let labels = parse_idx_labels(&label_bytes, &p.display().to_string())?;
            if labels.len() != images.shape()[0] {
                return Err(DiffError::BadContainer(format!(
                    "label count {} does not match image count {}",
                    labels.len(),
                    images.shape()[0]
                )));
            }
            Some(labels)
        }
        None => None,
    };
    Ok(Dataset {
        images,
        labels,
        split: "train".to_string(),
        provenance: Provenance::File {
            images: images_path.display().to_string(),
            labels: labels_path.map(|p| p.display().to_string()),
            transposed: false,
        },
    })
}

/// Serialize an image dataset back to IDX bytes. Loading then serializing
/// reproduces the source files exactly.
pub fn to_idx_bytes(dataset: &Dataset) -> DiffResult<(Vec<u8>, Option<Vec<u8>>)> {
    let (n, rows, cols) = match *dataset.images.shape() {
        [n, r, c] => (n, r, c),
        _ => {
            return Err(DiffError::InvalidShape {
                op: "to_idx_bytes",
                shape: dataset.images.shape().to_vec(),
                detail: "expected [N, rows, cols] images".into(),
            })
        }
    };
    dataset.validate()?;
    let mut images = Vec::with_capacity(16 + n * rows * cols);
    images.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    images.extend(dataset.images.data().iter().map(|&v| (v * 255.0).round() as u8));
    let labels = dataset.labels.as_ref().map(|ls| {
        let mut out = Vec::with_capacity(8 + ls.len());
        out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        out.extend_from_slice(&(ls.len() as u32).to_be_bytes());
        out.extend(ls.iter().map(|&l| l as u8));
        out
    });
    Ok((images, labels))
}

/// Sample `n` points of an annulus: angle uniform in [0, 2pi), radius
/// uniform in [inner, outer].
pub fn make_donut(n: usize, inner: f64, outer: f64, seed: u64) -> DiffResult<Dataset> {
    if !(inner.is_finite() && outer.is_finite()) || inner <= 0.0 || inner >= outer {
        return Err(DiffError::Domain {
            op: "make_donut",
            detail: format!("need 0 < inner < outer, got inner {inner}, outer {outer}"),
        });
    }
    let mut r = rng::seeded(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let angle = rng::uniform(&mut r, 0.0, std::f64::consts::TAU);
        let radius = rng::uniform(&mut r, inner, outer);
        data.push(radius * angle.cos());
        data.push(radius * angle.sin());
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 2], data)?,
        labels: None,
        split: "train".to_string(),
        provenance: Provenance::Donut { n, inner, outer, seed },
    })
}

/// Half-widths of the uniform ranges the glyph generator draws decomposed
/// transform parameters from, centered on the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRanges {
    /// Rotation angle, radians.
    pub rotation: f64,
    /// Shear coefficient.
    pub shear: f64,
    /// Log-scale on each axis.
    pub log_scale: f64,
    /// Translation in normalized [-1,1] coordinates.
    pub translation: f64,
}

impl TransformRanges {
    /// Everything at the identity: the generator emits unwarped glyphs.
    pub fn zero() -> Self {
        Self { rotation: 0.0, shear: 0.0, log_scale: 0.0, translation: 0.0 }
    }

    /// Gentle warps that keep the glyph well inside the frame.
    pub fn mild() -> Self {
        Self { rotation: 0.35, shear: 0.1, log_scale: 0.15, translation: 0.15 }
    }

    /// Ranges must stay in the region where warped content remains
    /// comfortably invertible and mostly in frame.
    pub fn validate(&self) -> DiffResult<()> {
        let fields = [
            ("rotation", self.rotation, std::f64::consts::PI),
            ("shear", self.shear, 1.0),
            ("log_scale", self.log_scale, 0.7),
            ("translation", self.translation, 0.6),
        ];
        for (name, value, cap) in fields {
            if !value.is_finite() || value < 0.0 || value > cap {
                return Err(DiffError::Domain {
                    op: "make_glyphs",
                    detail: format!("{name} half-width {value} outside [0, {cap}]"),
                });
            }
        }
        Ok(())
    }
}

/// Ground truth retained for one generated glyph: which base shape was
/// used and the raw decomposed parameters of its warp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformTruth {
    pub appearance: usize,
    /// Raw slots: rotation, shear, log-scale x, log-scale y, translation
    /// x, translation y.
    pub raw: [f64; 6],
}

const GLYPH_FIXTURES: [&str; 4] = [
    include_str!("../fixtures/glyph_box.txt"),
    include_str!("../fixtures/glyph_cross.txt"),
    include_str!("../fixtures/glyph_stroke.txt"),
    include_str!("../fixtures/glyph_ring.txt"),
];

pub const GLYPH_SIDE: usize = 28;

fn parse_glyph(art: &str) -> Tensor {
    let mut data = Vec::with_capacity(GLYPH_SIDE * GLYPH_SIDE);
    for line in art.lines() {
        data.extend(line.chars().map(|c| if c == '#' { 1.0 } else { 0.0 }));
    }
    assert_eq!(data.len(), GLYPH_SIDE * GLYPH_SIDE, "malformed glyph fixture");
    Tensor::new(vec![GLYPH_SIDE, GLYPH_SIDE], data).unwrap()
}

/// The four binary base shapes.
pub fn glyph_set() -> [Tensor; 4] {
    [
        parse_glyph(GLYPH_FIXTURES[0]),
        parse_glyph(GLYPH_FIXTURES[1]),
        parse_glyph(GLYPH_FIXTURES[2]),
        parse_glyph(GLYPH_FIXTURES[3]),
    ]
}

/// Generate `n` warped glyphs: base shapes in rotation order, each warped
/// by a random decomposed affine transform drawn within `ranges`. Labels
/// carry the base-shape index; the returned truths also carry the raw
/// transform parameters for disentanglement probes.
pub fn make_glyphs(
    n: usize,
    ranges: TransformRanges,
    seed: u64,
) -> DiffResult<(Dataset, Vec<TransformTruth>)> {
    ranges.validate()?;
    let glyphs = glyph_set();
    let mut r = rng::seeded(seed);
    let draw = |r: &mut rng::ChaCha8Rng, hw: f64| -> f64 {
        if hw == 0.0 {
            0.0
        } else {
            rng::uniform(r, -hw, hw)
        }
    };
    let mut data = Vec::with_capacity(n * GLYPH_SIDE * GLYPH_SIDE);
    let mut labels = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        let appearance = i % glyphs.len();
        let raw = [
            draw(&mut r, ranges.rotation),
            draw(&mut r, ranges.shear),
            draw(&mut r, ranges.log_scale),
            draw(&mut r, ranges.log_scale),
            draw(&mut r, ranges.translation),
            draw(&mut r, ranges.translation),
        ];
        let transform = AffineTransform::from_raw(WarpKind::Decomposed, &raw)?;
        let base = glyphs[appearance].reshaped(&[1, GLYPH_SIDE, GLYPH_SIDE])?;
        let warped = warp_image(&base, &transform)?;
        data.extend_from_slice(warped.data());
        labels.push(appearance as i64);
        truths.push(TransformTruth { appearance, raw });
    }
    let dataset = Dataset {
        images: Tensor::new(vec![n, GLYPH_SIDE, GLYPH_SIDE], data)?,
        labels: Some(labels),
        split: "train".to_string(),
        provenance: Provenance::Glyphs { n, ranges, seed },
    };
    dataset.validate()?;
    Ok((dataset, truths))
}
