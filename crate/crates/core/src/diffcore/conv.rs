//! Convolution, pooling, and upsampling kernels (NCHW, zero padding).

use super::tensor::Tensor;
use super::{DiffError, DiffResult};

fn dims4(op: &'static str, t: &Tensor) -> DiffResult<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(DiffError::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            detail: "expected rank 4 (NCHW)".into(),
        }),
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1)
}

pub fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> DiffResult<Tensor> {
    let [b, c, h, w] = dims4("conv2d", x)?;
    let [o, kc, kh, kw] = dims4("conv2d", k)?;
    if kc != c {
        return Err(DiffError::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(DiffError::Domain {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    let (ho, wo) = match (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad)) {
        (Some(a), Some(bx)) => (a, bx),
        _ => {
            return Err(DiffError::Domain {
                op: "conv2d",
                detail: format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            })
        }
    };
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; b * o * ho * wo];
    for bi in 0..b {
        for oi in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let xoff = (bi * c + ci) * h * w;
                        let koff = (oi * c + ci) * kh * kw;
                        for u in 0..kh {
                            let yy = (i * stride + u) as isize - pad as isize;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let xx = (j * stride + v) as isize - pad as isize;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += xd[xoff + yy as usize * w + xx as usize]
                                    * kd[koff + u * kw + v];
                            }
                        }
                    }
                    out[((bi * o + oi) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, o, ho, wo], out)
}

pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    out_grad: &[f64],
    wants: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let [b, c, h, w] = dims4("conv2d", x).expect("validated in forward");
    let [o, _, kh, kw] = dims4("conv2d", k).expect("validated in forward");
    let ho = out_extent(h, kh, stride, pad).unwrap();
    let wo = out_extent(w, kw, stride, pad).unwrap();
    let xd = x.data();
    let kd = k.data();
    let mut gx = wants[0].then(|| vec![0.0; x.len()]);
    let mut gk = wants[1].then(|| vec![0.0; k.len()]);
    for bi in 0..b {
        for oi in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let g = out_grad[((bi * o + oi) * ho + i) * wo + j];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        let xoff = (bi * c + ci) * h * w;
                        let koff = (oi * c + ci) * kh * kw;
                        for u in 0..kh {
                            let yy = (i * stride + u) as isize - pad as isize;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let xx = (j * stride + v) as isize - pad as isize;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let xi = xoff + yy as usize * w + xx as usize;
                                let ki = koff + u * kw + v;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += g * kd[ki];
                                }
                                if let Some(gk) = gk.as_mut() {
                                    gk[ki] += g * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    vec![gx, gk]
}

pub fn conv2d_jvp(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    output: &Tensor,
    tangents: &[Option<&Vec<f64>>],
) -> Vec<f64> {
    let mut out = vec![0.0; output.len()];
    if let Some(xt) = tangents[0] {
        let txt = Tensor::new(x.shape().to_vec(), xt.clone()).unwrap();
        let part = conv2d_forward(&txt, k, stride, pad).unwrap();
        for (o, p) in out.iter_mut().zip(part.data()) {
            *o += p;
        }
    }
    if let Some(kt) = tangents[1] {
        let tkt = Tensor::new(k.shape().to_vec(), kt.clone()).unwrap();
        let part = conv2d_forward(x, &tkt, stride, pad).unwrap();
        for (o, p) in out.iter_mut().zip(part.data()) {
            *o += p;
        }
    }
    out
}

pub fn avg_pool2_forward(x: &Tensor) -> DiffResult<Tensor> {
    let [b, c, h, w] = dims4("avg_pool2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(DiffError::InvalidShape {
            op: "avg_pool2",
            shape: x.shape().to_vec(),
            detail: "spatial extents must be even".into(),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; b * c * ho * wo];
    for bc in 0..b * c {
        let xoff = bc * h * w;
        let ooff = bc * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let base = xoff + 2 * i * w + 2 * j;
                out[ooff + i * wo + j] =
                    0.25 * (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]);
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn avg_pool2_backward(x: &Tensor, out_grad: &[f64]) -> Vec<f64> {
    let [b, c, h, w] = dims4("avg_pool2", x).expect("validated in forward");
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; x.len()];
    for bc in 0..b * c {
        let xoff = bc * h * w;
        let ooff = bc * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                let g = 0.25 * out_grad[ooff + i * wo + j];
                let base = xoff + 2 * i * w + 2 * j;
                gx[base] += g;
                gx[base + 1] += g;
                gx[base + w] += g;
                gx[base + w + 1] += g;
            }
        }
    }
    gx
}

pub fn upsample2_forward(x: &Tensor) -> DiffResult<Tensor> {
    let [b, c, h, w] = dims4("upsample2", x)?;
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; b * c * ho * wo];
    for bc in 0..b * c {
        let xoff = bc * h * w;
        let ooff = bc * ho * wo;
        for i in 0..ho {
            for j in 0..wo {
                out[ooff + i * wo + j] = xd[xoff + (i / 2) * w + j / 2];
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn upsample2_backward(x: &Tensor, out_grad: &[f64]) -> Vec<f64> {
    let [b, c, h, w] = dims4("upsample2", x).expect("validated in forward");
    let (_, wo) = (2 * h, 2 * w);
    let mut gx = vec![0.0; x.len()];
    for bc in 0..b * c {
        let xoff = bc * h * w;
        let ooff = bc * 4 * h * w;
        for i in 0..2 * h {
            for j in 0..2 * w {
                gx[xoff + (i / 2) * w + j / 2] += out_grad[ooff + i * wo + j];
            }
        }
    }
    gx
}
