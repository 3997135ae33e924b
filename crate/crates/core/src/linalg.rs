//! Small dense matrix helpers: linear solves, matrix exponentials, and a
//! symmetric eigensolver.
//!
//! Matrices are row-major `Vec<f64>` with explicit dimension arguments. The
//! routines target the small sizes this crate actually uses (affine lifts,
//! metric tensors, latent-by-latent systems); nothing here is tuned for large
//! problems.

/// Multiply the `n x m` matrix `a` by the `m x p` matrix `b`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * m, "lhs size mismatch");
    assert_eq!(b.len(), m * p, "rhs size mismatch");
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..p {
                out[i * p + j] += aik * b[k * p + j];
            }
        }
    }
    out
}

/// Maximum absolute column sum (the induced 1-norm) of an `n x n` matrix.
pub fn one_norm(a: &[f64], n: usize) -> f64 {
    let mut best = 0.0f64;
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            s += a[i * n + j].abs();
        }
        best = best.max(s);
    }
    best
}

/// Identity matrix of size `n`.
pub fn identity(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    out
}

/// Solve `A X = B` for the `n x p` matrix `X` by Gaussian elimination with
/// partial pivoting. Returns `None` when a pivot underflows (singular system).
pub fn solve(a: &[f64], b: &[f64], n: usize, p: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), n * n, "matrix must be square");
    assert_eq!(b.len(), n * p, "rhs size mismatch");
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut pivot = col;
        let mut pivot_val = m[col * n + col].abs();
        for row in col + 1..n {
            let v = m[row * n + col].abs();
            if v > pivot_val {
                pivot = row;
                pivot_val = v;
            }
        }
        if pivot_val < 1e-300 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
            }
            for j in 0..p {
                x.swap(col * p + j, pivot * p + j);
            }
        }
        let d = m[col * n + col];
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m[row * n + j] -= f * m[col * n + j];
            }
            for j in 0..p {
                x[row * p + j] -= f * x[col * p + j];
            }
        }
    }
    for row in 0..n {
        let d = m[row * n + row];
        for j in 0..p {
            x[row * p + j] /= d;
        }
    }
    Some(x)
}

/// Degree-13 Pade coefficients for the matrix exponential.
const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// Matrix exponential of an `n x n` matrix by scaling and squaring with a
/// degree-13 Pade approximant.
///
/// The argument is halved until its 1-norm drops to 0.5 or below, the Pade
/// quotient is evaluated there, and the result is squared back up. With that
/// threshold the approximant is accurate to machine precision for every input
/// this crate produces.
pub fn expm(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "matrix must be square");
    let norm = one_norm(a, n);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    if norm > 0.5 {
        squarings = (norm / 0.5).log2().ceil() as u32;
        scale = 0.5f64.powi(squarings as i32);
    }
    let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();

    let a2 = matmul(&scaled, &scaled, n, n, n);
    let a4 = matmul(&a2, &a2, n, n, n);
    let a6 = matmul(&a2, &a4, n, n, n);

    // U = A (A6 (b13 A6 + b11 A4 + b9 A2) + b7 A6 + b5 A4 + b3 A2 + b1 I)
    // V =    A6 (b12 A6 + b10 A4 + b8 A2) + b6 A6 + b4 A4 + b2 A2 + b0 I
    let mut inner_u = vec![0.0; n * n];
    let mut inner_v = vec![0.0; n * n];
    for i in 0..n * n {
        inner_u[i] = PADE13[13] * a6[i] + PADE13[11] * a4[i] + PADE13[9] * a2[i];
        inner_v[i] = PADE13[12] * a6[i] + PADE13[10] * a4[i] + PADE13[8] * a2[i];
    }
    let mut u = matmul(&a6, &inner_u, n, n, n);
    let mut v = matmul(&a6, &inner_v, n, n, n);
    for i in 0..n {
        for j in 0..n {
            let idx = i * n + j;
            u[idx] += PADE13[7] * a6[idx] + PADE13[5] * a4[idx] + PADE13[3] * a2[idx];
            v[idx] += PADE13[6] * a6[idx] + PADE13[4] * a4[idx] + PADE13[2] * a2[idx];
            if i == j {
                u[idx] += PADE13[1];
                v[idx] += PADE13[0];
            }
        }
    }
    let u = matmul(&scaled, &u, n, n, n);

    // expm(A) ~ (V - U)^-1 (V + U)
    let mut vmu = vec![0.0; n * n];
    let mut vpu = vec![0.0; n * n];
    for i in 0..n * n {
        vmu[i] = v[i] - u[i];
        vpu[i] = v[i] + u[i];
    }
    let mut result =
        solve(&vmu, &vpu, n, n).expect("Pade denominator is nonsingular at this scaling");
    for _ in 0..squarings {
        result = matmul(&result, &result, n, n, n);
    }
    result
}

/// Frechet derivative of the matrix exponential at `a` in direction `e`,
/// computed exactly (to Pade accuracy) from the top-right block of
/// `expm([[A, E], [0, A]])`.
pub fn expm_frechet(a: &[f64], e: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "matrix must be square");
    assert_eq!(e.len(), n * n, "direction must match");
    let m = 2 * n;
    let mut block = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            block[i * m + j] = a[i * n + j];
            block[i * m + (j + n)] = e[i * n + j];
            block[(i + n) * m + (j + n)] = a[i * n + j];
        }
    }
    let big = expm(&block, m);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = big[i * m + (j + n)];
        }
    }
    out
}

/// Eigenvalues and eigenvectors of a symmetric `n x n` matrix by the cyclic
/// Jacobi method. Returns `(values, vectors)` with eigenvalues ascending and
/// eigenvectors as the contract `vectors` column `k` pairing with `values[k]`.
pub fn sym_eig(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n, "matrix must be square");
    let mut m = a.to_vec();
    let mut vecs = identity(n);
    if n == 1 {
        return (vec![m[0]], vecs);
    }
    let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = vecs[k * n + p];
                    let vkq = vecs[k * n + q];
                    vecs[k * n + p] = c * vkp - s * vkq;
                    vecs[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut sorted_vecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            sorted_vecs[row * n + new_col] = vecs[row * n + old_col];
        }
    }
    (values, sorted_vecs)
}

/// Singular values of an `r x c` matrix, descending: square roots of the
/// eigenvalues of the smaller Gram matrix.
pub fn singular_values(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    assert_eq!(a.len(), r * c, "matrix size mismatch");
    let k = r.min(c);
    let gram = if r <= c {
        // A A^T, r x r
        let mut g = vec![0.0; r * r];
        for i in 0..r {
            for j in 0..r {
                let mut s = 0.0;
                for t in 0..c {
                    s += a[i * c + t] * a[j * c + t];
                }
                g[i * r + j] = s;
            }
        }
        g
    } else {
        // A^T A, c x c
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut s = 0.0;
                for t in 0..r {
                    s += a[t * c + i] * a[t * c + j];
                }
                g[i * c + j] = s;
            }
        }
        g
    };
    let (mut vals, _) = sym_eig(&gram, k);
    vals.reverse();
    vals.iter().map(|v| v.max(0.0).sqrt()).collect()
}

/// Least-squares solution of `A x = b` through the normal equations with a
/// small ridge term for rank safety. `a` is `rows x cols`, `b` has `rows`
/// entries.
pub fn lstsq(a: &[f64], b: &[f64], rows: usize, cols: usize, ridge: f64) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    assert_eq!(b.len(), rows);
    let mut ata = vec![0.0; cols * cols];
    let mut atb = vec![0.0; cols];
    for i in 0..rows {
        for p in 0..cols {
            let aip = a[i * cols + p];
            if aip == 0.0 {
                continue;
            }
            atb[p] += aip * b[i];
            for q in 0..cols {
                ata[p * cols + q] += aip * a[i * cols + q];
            }
        }
    }
    for p in 0..cols {
        ata[p * cols + p] += ridge;
    }
    solve(&ata, &atb, cols, 1).expect("ridge keeps the normal equations nonsingular")
}
