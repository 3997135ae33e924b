//! Spatial-transformer layer: three affine parametrizations, sampling-grid
//! generation, bilinear warping, a non-local attention block, and the
//! entropy penalty attached to its attention weights.
//!
//! The three parametrizations of a 2x3 affine map:
//! * `Direct`: the six matrix entries as-is.
//! * `Decomposed`: rotation, shear, two scales, two translations, multiplied
//!   as rotation * shear * scale with the translation appended. Scales must
//!   be positive.
//! * `Velocity`: the six entries describe a velocity field; the map is the
//!   top of the matrix exponential of its homogeneous 3x3 lift, which is
//!   invertible for every finite parameter choice.

use crate::diffcore::{concat, DiffError, DiffResult, Op, Tape, Tensor, Var};
use crate::linalg;
use crate::rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which affine parametrization a six-vector of parameters uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpKind {
    Direct,
    Decomposed,
    Velocity,
}

/// A parametrized 2D affine transformation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    kind: WarpKind,
    params: [f64; 6],
}

impl AffineTransform {
    /// Validates finiteness, and positive scales for the decomposed kind
    /// (parameter order there: rotation, shear, scale x, scale y,
    /// translation x, translation y).
    pub fn new(kind: WarpKind, params: [f64; 6]) -> DiffResult<Self> {
        if params.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "affine_transform" });
        }
        if kind == WarpKind::Decomposed && (params[2] <= 0.0 || params[3] <= 0.0) {
            return Err(DiffError::Domain {
                op: "affine_transform",
                detail: format!("scales must be positive, got ({}, {})", params[2], params[3]),
            });
        }
        Ok(Self { kind, params })
    }

    pub fn identity(kind: WarpKind) -> Self {
        let params = match kind {
            WarpKind::Direct => [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            WarpKind::Decomposed => [0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
            WarpKind::Velocity => [0.0; 6],
        };
        Self { kind, params }
    }

    /// Interpret a raw unconstrained six-vector, as produced by a network
    /// head, as parameters of the given kind. Direct and velocity raws are
    /// taken verbatim; decomposed raws carry log-scales in slots 2 and 3,
    /// which are exponentiated here so every finite raw vector is valid.
    pub fn from_raw(kind: WarpKind, raw: &[f64; 6]) -> DiffResult<Self> {
        let mut params = *raw;
        if kind == WarpKind::Decomposed {
            params[2] = raw[2].exp();
            params[3] = raw[3].exp();
        }
        Self::new(kind, params)
    }

    pub fn kind(&self) -> WarpKind {
        self.kind
    }

    pub fn params(&self) -> &[f64; 6] {
        &self.params
    }

    /// The 2x3 matrix (row-major six-vector) this transform applies.
    pub fn to_matrix(&self) -> [f64; 6] {
        let p = &self.params;
        match self.kind {
            WarpKind::Direct => *p,
            WarpKind::Decomposed => {
                let (ca, sa) = (p[0].cos(), p[0].sin());
                let (rho, sx, sy) = (p[1], p[2], p[3]);
                // rotation * shear * scale, then the translation column.
                [
                    ca * sx,
                    (ca * rho - sa) * sy,
                    p[4],
                    sa * sx,
                    (sa * rho + ca) * sy,
                    p[5],
                ]
            }
            WarpKind::Velocity => {
                let lifted = [p[0], p[1], p[2], p[3], p[4], p[5], 0.0, 0.0, 0.0];
                let e = expm3(&lifted);
                [e[0], e[1], e[2], e[3], e[4], e[5]]
            }
        }
    }

    /// The transform applying the inverse map, always expressible in the
    /// direct parametrization. `None` when the linear part is singular
    /// (impossible for the velocity kind).
    pub fn inverse(&self) -> Option<AffineTransform> {
        let m = invert_affine(&self.to_matrix())?;
        Some(AffineTransform {
            kind: WarpKind::Direct,
            params: m,
        })
    }
}

/// Matrix exponential of a 3x3 matrix given as a row-major nine-vector.
pub fn expm3(a: &[f64; 9]) -> [f64; 9] {
    let e = linalg::expm(a, 3);
    let mut out = [0.0; 9];
    out.copy_from_slice(&e);
    out
}

/// Inverse of a 2x3 affine map, or `None` if its 2x2 block is singular.
pub fn invert_affine(m: &[f64; 6]) -> Option<[f64; 6]> {
    let det = m[0] * m[4] - m[1] * m[3];
    if det.abs() < 1e-12 {
        return None;
    }
    let (ia, ib, ic, id) = (m[4] / det, -m[1] / det, -m[3] / det, m[0] / det);
    Some([
        ia,
        ib,
        -(ia * m[2] + ib * m[5]),
        ic,
        id,
        -(ic * m[2] + id * m[5]),
    ])
}

/// Matrix of `outer(inner(x))` for 2x3 affine maps.
pub fn compose_affine(outer: &[f64; 6], inner: &[f64; 6]) -> [f64; 6] {
    [
        outer[0] * inner[0] + outer[1] * inner[3],
        outer[0] * inner[1] + outer[1] * inner[4],
        outer[0] * inner[2] + outer[1] * inner[5] + outer[2],
        outer[3] * inner[0] + outer[4] * inner[3],
        outer[3] * inner[1] + outer[4] * inner[4],
        outer[3] * inner[2] + outer[4] * inner[5] + outer[5],
    ]
}

/// Sampling grid of source coordinates for an `h` by `w` output: the
/// normalized output mesh mapped through the transform. Shape `[2,h,w]`,
/// channel 0 holding x and channel 1 holding y.
pub fn make_grid(t: &AffineTransform, h: usize, w: usize) -> DiffResult<Tensor> {
    let theta = Tensor::new(vec![6], t.to_matrix().to_vec())?;
    Op::AffineGrid { h, w }.forward(&[&theta])
}

/// Bilinear sampling of `image` (`[C,H,W]` or `[B,C,H,W]`) at `grid`
/// coordinates (`[2,Ho,Wo]` or `[B,2,Ho,Wo]`), zero outside the image.
pub fn sample_bilinear(image: &Tensor, grid: &Tensor) -> DiffResult<Tensor> {
    Op::GridSample.forward(&[image, grid])
}

/// Warp an image through a transform, sampling at its own resolution.
/// Accepts `[C,H,W]` or `[B,C,H,W]`; a batched input shares the transform.
pub fn warp_image(image: &Tensor, t: &AffineTransform) -> DiffResult<Tensor> {
    let (b, h, w) = match *image.shape() {
        [_c, h, w] => (0, h, w),
        [b, _c, h, w] => (b, h, w),
        _ => {
            return Err(DiffError::InvalidShape {
                op: "warp_image",
                shape: image.shape().to_vec(),
                detail: "expected [C,H,W] or [B,C,H,W]".into(),
            })
        }
    };
    let m = t.to_matrix();
    let theta = if b == 0 {
        Tensor::new(vec![6], m.to_vec())?
    } else {
        Tensor::new(vec![b, 6], m.iter().cycle().take(6 * b).cloned().collect())?
    };
    let grid = Op::AffineGrid { h, w }.forward(&[&theta])?;
    sample_bilinear(image, &grid)
}

/// Differentiable 2x3 matrix entries from raw parameters on a tape.
///
/// `raw` is `[6]` or `[B,6]`. Direct raws pass through, velocity raws go
/// through the matrix exponential, and decomposed raws follow the
/// `AffineTransform::from_raw` convention: slots 2 and 3 are log-scales.
pub fn warp_matrix(kind: WarpKind, raw: &Var) -> DiffResult<Var> {
    match kind {
        WarpKind::Direct => Ok(raw.clone()),
        WarpKind::Velocity => raw.velocity_matrix(),
        WarpKind::Decomposed => {
            let axis = match raw.shape().len() {
                1 => 0,
                2 => 1,
                _ => {
                    return Err(DiffError::InvalidShape {
                        op: "warp_matrix",
                        shape: raw.shape(),
                        detail: "expected [6] or [B,6]".into(),
                    })
                }
            };
            let col = |i: usize| raw.slice(axis, i, 1);
            let alpha = col(0)?;
            let rho = col(1)?;
            let sx = col(2)?.exp()?;
            let sy = col(3)?.exp()?;
            let tx = col(4)?;
            let ty = col(5)?;
            let ca = alpha.cos()?;
            let sa = alpha.sin()?;
            let m11 = ca.mul(&sx)?;
            let m12 = ca.mul(&rho)?.sub(&sa)?.mul(&sy)?;
            let m21 = sa.mul(&sx)?;
            let m22 = sa.mul(&rho)?.add(&ca)?.mul(&sy)?;
            concat(&[&m11, &m12, &tx, &m21, &m22, &ty], axis)
        }
    }
}

/// Non-local attention over spatial positions with a residual connection.
///
/// Every position attends to every other through embedded-Gaussian
/// similarity: `y_i = x_i + (sum_j softmax_j(theta_i . phi_j) g_j) W_o`.
/// The output projection starts at zero so a fresh block is the identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonLocalBlock {
    channels: usize,
    inner: usize,
    pub w_theta: Tensor,
    pub w_phi: Tensor,
    pub w_g: Tensor,
    pub w_o: Tensor,
}

/// Result of a non-local pass: the filtered map plus the attention rows
/// (one probability row per output position) for the entropy penalty.
pub struct NonLocalOutput {
    pub output: Var,
    pub attention: Var,
}

impl NonLocalBlock {
    pub fn new(channels: usize, inner: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        let proj = |rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = rng::gaussian_vec(rng, channels * inner)
                .into_iter()
                .map(|v| v * std)
                .collect();
            Tensor::new(vec![channels, inner], data).unwrap()
        };
        Self {
            channels,
            inner,
            w_theta: proj(rng),
            w_phi: proj(rng),
            w_g: proj(rng),
            w_o: Tensor::zeros(&[inner, channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_theta, &self.w_phi, &self.w_g, &self.w_o]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_theta,
            &mut self.w_phi,
            &mut self.w_g,
            &mut self.w_o,
        ]
    }

    /// Attention pass over `[C,H,W]` or `[B,C,H,W]` input. Attention rows
    /// come back stacked as `[(B*)H*W, H*W]`.
    pub fn forward(&self, tape: &Tape, x: &Var) -> DiffResult<NonLocalOutput> {
        let (batches, c, h, w) = match *x.shape() {
            [c, h, w] => (0, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => {
                return Err(DiffError::InvalidShape {
                    op: "nonlocal",
                    shape: x.shape(),
                    detail: "expected [C,H,W] or [B,C,H,W]".into(),
                })
            }
        };
        if c != self.channels {
            return Err(DiffError::InvalidShape {
                op: "nonlocal",
                shape: x.shape(),
                detail: format!("block built for {} channels", self.channels),
            });
        }
        let wt = tape.constant(self.w_theta.clone())?;
        let wp = tape.constant(self.w_phi.clone())?;
        let wg = tape.constant(self.w_g.clone())?;
        let wo = tape.constant(self.w_o.clone())?;
        let p = h * w;

        let one_sample = |xb: &Var| -> DiffResult<(Var, Var)> {
            // Rows are positions: [P,C].
            let feats = xb.reshape(&[c, p])?.transpose()?;
            let theta = feats.matmul(&wt)?;
            let phi = feats.matmul(&wp)?;
            let g = feats.matmul(&wg)?;
            let logits = theta.matmul(&phi.transpose()?)?;
            let attn = logits.softmax()?;
            let mixed = attn.matmul(&g)?.matmul(&wo)?;
            let y = mixed.transpose()?.reshape(&[c, h, w])?.add(xb)?;
            Ok((y, attn))
        };

        if batches == 0 {
            let (y, attn) = one_sample(x)?;
            Ok(NonLocalOutput {
                output: y,
                attention: attn,
            })
        } else {
            let mut outs = Vec::with_capacity(batches);
            let mut attns = Vec::with_capacity(batches);
            for bi in 0..batches {
                let xb = x.slice(0, bi, 1)?.reshape(&[c, h, w])?;
                let (y, attn) = one_sample(&xb)?;
                outs.push(y.reshape(&[1, c, h, w])?);
                attns.push(attn);
            }
            let out_refs: Vec<&Var> = outs.iter().collect();
            let attn_refs: Vec<&Var> = attns.iter().collect();
            Ok(NonLocalOutput {
                output: concat(&out_refs, 0)?,
                attention: concat(&attn_refs, 0)?,
            })
        }
    }

    /// Plain inference pass without gradient tracking.
    pub fn apply(&self, x: &Tensor) -> DiffResult<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        Ok(self.forward(&tape, &xv)?.output.value())
    }
}

const ROW_SUM_TOL: f64 = 1e-6;

/// Weighted negative entropy of attention rows: `lambda * sum_i sum_j
/// p_ij ln p_ij`. Zero or negative; minimized when every row is uniform.
/// Rows must each sum to 1 within 1e-6.
pub fn entropy_penalty(weights: &Tensor, lambda: f64) -> DiffResult<f64> {
    let m = match *weights.shape() {
        [m] => m,
        [_r, m] => m,
        _ => {
            return Err(DiffError::InvalidShape {
                op: "entropy_penalty",
                shape: weights.shape().to_vec(),
                detail: "expected [m] or [rows,m]".into(),
            })
        }
    };
    if m == 0 {
        return Err(DiffError::InvalidShape {
            op: "entropy_penalty",
            shape: weights.shape().to_vec(),
            detail: "empty rows".into(),
        });
    }
    let mut total = 0.0;
    for row in weights.data().chunks(m) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(DiffError::Domain {
                op: "entropy_penalty",
                detail: format!("attention row sums to {sum}, not 1"),
            });
        }
        for &pv in row {
            if pv < 0.0 {
                return Err(DiffError::Domain {
                    op: "entropy_penalty",
                    detail: format!("negative attention weight {pv}"),
                });
            }
            if pv > 0.0 {
                total += pv * pv.ln();
            }
        }
    }
    Ok(lambda * total)
}

/// Tape version of [`entropy_penalty`] for use inside a training loss.
/// `p ln p` is evaluated as `p ln(p + 1e-300)` so exactly-zero weights
/// contribute exactly zero instead of a non-finite product.
pub fn entropy_penalty_var(weights: &Var, lambda: f64) -> DiffResult<Var> {
    for row in weights.value().data().chunks(*weights.shape().last().unwrap_or(&1)) {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(DiffError::Domain {
                op: "entropy_penalty",
                detail: format!("attention row sums to {sum}, not 1"),
            });
        }
    }
    weights
        .add_scalar(1e-300)?
        .log()?
        .mul(weights)?
        .reduce_sum(None)?
        .mul_scalar(lambda)
}
