//! Spatial-transformer kernels: affine sampling grids, bilinear sampling with
//! zero padding, and the velocity-field matrix exponential.
//!
//! Grids live in normalized coordinates: both image axes span [-1, 1] with
//! the corner convention that -1 and 1 land exactly on the first and last
//! pixel centres. Channel 0 of a grid holds x (width direction), channel 1
//! holds y (height direction).

use super::tensor::Tensor;
use super::{DiffError, DiffResult};
use crate::linalg;

/// Normalized coordinate of pixel `i` on an axis of `n` pixels.
fn norm_coord(i: usize, n: usize) -> f64 {
    if n > 1 {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    } else {
        0.0
    }
}

fn grid_batches(theta: &Tensor) -> DiffResult<usize> {
    match *theta.shape() {
        [6] => Ok(0), // unbatched marker
        [b, 6] => Ok(b.max(1)),
        _ => Err(DiffError::InvalidShape {
            op: "affine_grid",
            shape: theta.shape().to_vec(),
            detail: "expected [6] or [B,6]".into(),
        }),
    }
}

pub fn affine_grid_forward(theta: &Tensor, h: usize, w: usize) -> DiffResult<Tensor> {
    if h == 0 || w == 0 {
        return Err(DiffError::Domain {
            op: "affine_grid",
            detail: "grid extents must be positive".into(),
        });
    }
    let b = grid_batches(theta)?;
    let batches = b.max(1);
    let mut out = vec![0.0; batches * 2 * h * w];
    for bi in 0..batches {
        let t = &theta.data()[bi * 6..bi * 6 + 6];
        let base = bi * 2 * h * w;
        for i in 0..h {
            let y = norm_coord(i, h);
            for j in 0..w {
                let x = norm_coord(j, w);
                out[base + i * w + j] = t[0] * x + t[1] * y + t[2];
                out[base + h * w + i * w + j] = t[3] * x + t[4] * y + t[5];
            }
        }
    }
    let shape = if b == 0 {
        vec![2, h, w]
    } else {
        vec![b, 2, h, w]
    };
    Tensor::new(shape, out)
}

pub fn affine_grid_backward(theta: &Tensor, h: usize, w: usize, out_grad: &[f64]) -> Vec<f64> {
    let b = grid_batches(theta).expect("validated in forward");
    let batches = b.max(1);
    let mut gt = vec![0.0; theta.len()];
    for bi in 0..batches {
        let base = bi * 2 * h * w;
        let g = &mut gt[bi * 6..bi * 6 + 6];
        for i in 0..h {
            let y = norm_coord(i, h);
            for j in 0..w {
                let x = norm_coord(j, w);
                let gx = out_grad[base + i * w + j];
                let gy = out_grad[base + h * w + i * w + j];
                g[0] += gx * x;
                g[1] += gx * y;
                g[2] += gx;
                g[3] += gy * x;
                g[4] += gy * y;
                g[5] += gy;
            }
        }
    }
    gt
}

struct SampleDims {
    batches: usize,
    batched: bool,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn sample_dims(img: &Tensor, grid: &Tensor) -> DiffResult<SampleDims> {
    match (img.shape(), grid.shape()) {
        ([c, h, w], [2, ho, wo]) => Ok(SampleDims {
            batches: 1,
            batched: false,
            c: *c,
            h: *h,
            w: *w,
            ho: *ho,
            wo: *wo,
        }),
        ([b, c, h, w], [b2, 2, ho, wo]) if b == b2 => Ok(SampleDims {
            batches: *b,
            batched: true,
            c: *c,
            h: *h,
            w: *w,
            ho: *ho,
            wo: *wo,
        }),
        _ => Err(DiffError::ShapeMismatch {
            op: "grid_sample",
            lhs: img.shape().to_vec(),
            rhs: grid.shape().to_vec(),
        }),
    }
}

/// The four bilinear corners at a source position, with weights. Out-of-range
/// corners carry weight but read as zero (zero padding).
struct Corners {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
}

fn corners(px: f64, py: f64) -> Corners {
    let x0 = px.floor();
    let y0 = py.floor();
    Corners {
        x0: x0 as isize,
        y0: y0 as isize,
        fx: px - x0,
        fy: py - y0,
    }
}

fn read(img: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        img[y as usize * w + x as usize]
    }
}

pub fn grid_sample_forward(img: &Tensor, grid: &Tensor) -> DiffResult<Tensor> {
    let d = sample_dims(img, grid)?;
    let mut out = vec![0.0; d.batches * d.c * d.ho * d.wo];
    for bi in 0..d.batches {
        let gbase = bi * 2 * d.ho * d.wo;
        for i in 0..d.ho {
            for j in 0..d.wo {
                let x = grid.data()[gbase + i * d.wo + j];
                let y = grid.data()[gbase + d.ho * d.wo + i * d.wo + j];
                let px = (x + 1.0) * 0.5 * (d.w - 1) as f64;
                let py = (y + 1.0) * 0.5 * (d.h - 1) as f64;
                let cn = corners(px, py);
                for ci in 0..d.c {
                    let plane = &img.data()[(bi * d.c + ci) * d.h * d.w..][..d.h * d.w];
                    let v00 = read(plane, d.h, d.w, cn.y0, cn.x0);
                    let v10 = read(plane, d.h, d.w, cn.y0, cn.x0 + 1);
                    let v01 = read(plane, d.h, d.w, cn.y0 + 1, cn.x0);
                    let v11 = read(plane, d.h, d.w, cn.y0 + 1, cn.x0 + 1);
                    let top = v00 * (1.0 - cn.fx) + v10 * cn.fx;
                    let bot = v01 * (1.0 - cn.fx) + v11 * cn.fx;
                    out[((bi * d.c + ci) * d.ho + i) * d.wo + j] =
                        top * (1.0 - cn.fy) + bot * cn.fy;
                }
            }
        }
    }
    let shape = if d.batched {
        vec![d.batches, d.c, d.ho, d.wo]
    } else {
        vec![d.c, d.ho, d.wo]
    };
    Tensor::new(shape, out)
}

pub fn grid_sample_backward(
    img: &Tensor,
    grid: &Tensor,
    out_grad: &[f64],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let d = sample_dims(img, grid).expect("validated in forward");
    let mut gi = wants[0].then(|| vec![0.0; img.len()]);
    let mut gg = wants[1].then(|| vec![0.0; grid.len()]);
    let sx = 0.5 * (d.w - 1) as f64;
    let sy = 0.5 * (d.h - 1) as f64;
    for bi in 0..d.batches {
        let gbase = bi * 2 * d.ho * d.wo;
        for i in 0..d.ho {
            for j in 0..d.wo {
                let x = grid.data()[gbase + i * d.wo + j];
                let y = grid.data()[gbase + d.ho * d.wo + i * d.wo + j];
                let px = (x + 1.0) * sx;
                let py = (y + 1.0) * sy;
                let cn = corners(px, py);
                let mut acc_dx = 0.0;
                let mut acc_dy = 0.0;
                for ci in 0..d.c {
                    let g = out_grad[((bi * d.c + ci) * d.ho + i) * d.wo + j];
                    let plane_off = (bi * d.c + ci) * d.h * d.w;
                    let plane = &img.data()[plane_off..][..d.h * d.w];
                    let v00 = read(plane, d.h, d.w, cn.y0, cn.x0);
                    let v10 = read(plane, d.h, d.w, cn.y0, cn.x0 + 1);
                    let v01 = read(plane, d.h, d.w, cn.y0 + 1, cn.x0);
                    let v11 = read(plane, d.h, d.w, cn.y0 + 1, cn.x0 + 1);
                    if g != 0.0 {
                        acc_dx += g
                            * ((1.0 - cn.fy) * (v10 - v00) + cn.fy * (v11 - v01));
                        acc_dy += g
                            * ((1.0 - cn.fx) * (v01 - v00) + cn.fx * (v11 - v10));
                        if let Some(gi) = gi.as_mut() {
                            let mut scatter = |yy: isize, xx: isize, wgt: f64| {
                                if yy >= 0
                                    && xx >= 0
                                    && yy < d.h as isize
                                    && xx < d.w as isize
                                {
                                    gi[plane_off + yy as usize * d.w + xx as usize] += g * wgt;
                                }
                            };
                            scatter(cn.y0, cn.x0, (1.0 - cn.fx) * (1.0 - cn.fy));
                            scatter(cn.y0, cn.x0 + 1, cn.fx * (1.0 - cn.fy));
                            scatter(cn.y0 + 1, cn.x0, (1.0 - cn.fx) * cn.fy);
                            scatter(cn.y0 + 1, cn.x0 + 1, cn.fx * cn.fy);
                        }
                    }
                }
                if let Some(gg) = gg.as_mut() {
                    gg[gbase + i * d.wo + j] += acc_dx * sx;
                    gg[gbase + d.ho * d.wo + i * d.wo + j] += acc_dy * sy;
                }
            }
        }
    }
    vec![gi, gg]
}

pub fn grid_sample_jvp(
    img: &Tensor,
    grid: &Tensor,
    output: &Tensor,
    tangents: &[Option<&Vec<f64>>],
) -> Vec<f64> {
    let d = sample_dims(img, grid).expect("validated in forward");
    let mut out = vec![0.0; output.len()];
    let sx = 0.5 * (d.w - 1) as f64;
    let sy = 0.5 * (d.h - 1) as f64;
    for bi in 0..d.batches {
        let gbase = bi * 2 * d.ho * d.wo;
        for i in 0..d.ho {
            for j in 0..d.wo {
                let x = grid.data()[gbase + i * d.wo + j];
                let y = grid.data()[gbase + d.ho * d.wo + i * d.wo + j];
                let px = (x + 1.0) * sx;
                let py = (y + 1.0) * sy;
                let cn = corners(px, py);
                let (pxt, pyt) = match tangents[1] {
                    Some(t) => (
                        t[gbase + i * d.wo + j] * sx,
                        t[gbase + d.ho * d.wo + i * d.wo + j] * sy,
                    ),
                    None => (0.0, 0.0),
                };
                for ci in 0..d.c {
                    let plane_off = (bi * d.c + ci) * d.h * d.w;
                    let plane = &img.data()[plane_off..][..d.h * d.w];
                    let v00 = read(plane, d.h, d.w, cn.y0, cn.x0);
                    let v10 = read(plane, d.h, d.w, cn.y0, cn.x0 + 1);
                    let v01 = read(plane, d.h, d.w, cn.y0 + 1, cn.x0);
                    let v11 = read(plane, d.h, d.w, cn.y0 + 1, cn.x0 + 1);
                    let mut t = pxt * ((1.0 - cn.fy) * (v10 - v00) + cn.fy * (v11 - v01))
                        + pyt * ((1.0 - cn.fx) * (v01 - v00) + cn.fx * (v11 - v10));
                    if let Some(it) = tangents[0] {
                        let tplane = &it[plane_off..plane_off + d.h * d.w];
                        let t00 = read(tplane, d.h, d.w, cn.y0, cn.x0);
                        let t10 = read(tplane, d.h, d.w, cn.y0, cn.x0 + 1);
                        let t01 = read(tplane, d.h, d.w, cn.y0 + 1, cn.x0);
                        let t11 = read(tplane, d.h, d.w, cn.y0 + 1, cn.x0 + 1);
                        let top = t00 * (1.0 - cn.fx) + t10 * cn.fx;
                        let bot = t01 * (1.0 - cn.fx) + t11 * cn.fx;
                        t += top * (1.0 - cn.fy) + bot * cn.fy;
                    }
                    out[((bi * d.c + ci) * d.ho + i) * d.wo + j] = t;
                }
            }
        }
    }
    out
}

fn velocity_rows(v: &Tensor) -> DiffResult<usize> {
    match *v.shape() {
        [6] => Ok(0),
        [b, 6] => Ok(b.max(1)),
        _ => Err(DiffError::InvalidShape {
            op: "velocity_matrix",
            shape: v.shape().to_vec(),
            detail: "expected [6] or [B,6]".into(),
        }),
    }
}

/// Lift a 2x3 row-major velocity into the 3x3 generator with zero bottom row.
fn lift(v: &[f64]) -> Vec<f64> {
    vec![v[0], v[1], v[2], v[3], v[4], v[5], 0.0, 0.0, 0.0]
}

pub fn velocity_matrix_forward(v: &Tensor) -> DiffResult<Tensor> {
    let b = velocity_rows(v)?;
    let rows = b.max(1);
    let mut out = vec![0.0; v.len()];
    for r in 0..rows {
        let a = lift(&v.data()[r * 6..r * 6 + 6]);
        let e = linalg::expm(&a, 3);
        out[r * 6..r * 6 + 6].copy_from_slice(&e[0..6]);
    }
    Tensor::new(v.shape().to_vec(), out)
}

pub fn velocity_matrix_backward(v: &Tensor, out_grad: &[f64]) -> Vec<f64> {
    let b = velocity_rows(v).expect("validated in forward");
    let rows = b.max(1);
    let mut gv = vec![0.0; v.len()];
    for r in 0..rows {
        let a = lift(&v.data()[r * 6..r * 6 + 6]);
        let mut at = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                at[j * 3 + i] = a[i * 3 + j];
            }
        }
        // Adjoint identity: <G, Dexp_A(E)> = <Dexp_{A^T}(G), E>.
        let gbar = lift(&out_grad[r * 6..r * 6 + 6]);
        let da = linalg::expm_frechet(&at, &gbar, 3);
        gv[r * 6..r * 6 + 6].copy_from_slice(&da[0..6]);
    }
    gv
}

pub fn velocity_matrix_jvp(v: &Tensor, output: &Tensor, tangent: Option<&Vec<f64>>) -> Vec<f64> {
    let b = velocity_rows(v).expect("validated in forward");
    let rows = b.max(1);
    match tangent {
        Some(t) => {
            let mut out = vec![0.0; output.len()];
            for r in 0..rows {
                let a = lift(&v.data()[r * 6..r * 6 + 6]);
                let e = lift(&t[r * 6..r * 6 + 6]);
                let l = linalg::expm_frechet(&a, &e, 3);
                out[r * 6..r * 6 + 6].copy_from_slice(&l[0..6]);
            }
            out
        }
        None => vec![0.0; output.len()],
    }
}
