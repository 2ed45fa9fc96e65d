//! Straight-line reference implementations of every attention operator,
//! written against flat f64 slices with explicit loops and no shared code
//! with the tensor/tape stack. The verification suites compare the graph
//! kernels against these.

fn softmax_row(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            for j in 0..p {
                out[i * p + j] += aik * b[kk * p + j];
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Dense attention: softmax(q kᵀ / sqrt(d)) v. Shapes [n, d].
pub fn softmax_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[i * d + c] * k[j * d + c];
            }
            logits[i * n + j] = dot * scale;
        }
    }
    for row in logits.chunks_mut(n) {
        softmax_row(row);
    }
    matmul(&logits, v, n, n, d)
}

/// Low-rank attention: keys/values first compressed by w_proj [m, n].
pub fn linformer_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    w_proj: &[f64],
    n: usize,
    m: usize,
    d: usize,
) -> Vec<f64> {
    let kp = matmul(w_proj, k, m, n, d);
    let vp = matmul(w_proj, v, m, n, d);
    let scale = 1.0 / (d as f64).sqrt();
    let mut logits = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut dot = 0.0;
            for c in 0..d {
                dot += q[i * d + c] * kp[j * d + c];
            }
            logits[i * m + j] = dot * scale;
        }
    }
    for row in logits.chunks_mut(m) {
        softmax_row(row);
    }
    matmul(&logits, &vp, n, m, d)
}

/// Feature-context attention: softmax over features of q, softmax over
/// tokens of each key feature, context = ks v, out = qs context.
pub fn efficient_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut qs = q.to_vec();
    for row in qs.chunks_mut(d) {
        softmax_row(row);
    }
    let mut kt = transpose(k, n, d); // [d, n]
    for row in kt.chunks_mut(n) {
        softmax_row(row);
    }
    let context = matmul(&kt, v, d, n, d);
    matmul(&qs, &context, n, d, d)
}

/// Positive random-feature attention with frozen features omega [r, d].
pub fn performer_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    omega: &[f64],
    n: usize,
    d: usize,
    r: usize,
) -> Vec<f64> {
    let input_scale = (d as f64).powf(-0.25);
    let feat_scale = 1.0 / (r as f64).sqrt();
    let psi = |x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * r];
        for i in 0..n {
            let mut sq = 0.0;
            for c in 0..d {
                let xh = x[i * d + c] * input_scale;
                sq += xh * xh;
            }
            for f in 0..r {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += x[i * d + c] * input_scale * omega[f * d + c];
                }
                out[i * r + f] = feat_scale * (dot - 0.5 * sq).exp();
            }
        }
        out
    };
    let pq = psi(q);
    let pk = psi(k);
    let mut out = vec![0.0; n * d];
    // aggregate[f][c] = sum_j pk[j][f] v[j][c]; ksum[f] = sum_j pk[j][f]
    let mut aggregate = vec![0.0; r * d];
    let mut ksum = vec![0.0; r];
    for j in 0..n {
        for f in 0..r {
            let pf = pk[j * r + f];
            ksum[f] += pf;
            for c in 0..d {
                aggregate[f * d + c] += pf * v[j * d + c];
            }
        }
    }
    for i in 0..n {
        let mut den = 0.0;
        for f in 0..r {
            den += pq[i * r + f] * ksum[f];
        }
        for c in 0..d {
            let mut num = 0.0;
            for f in 0..r {
                num += pq[i * r + f] * aggregate[f * d + c];
            }
            out[i * d + c] = num / den;
        }
    }
    out
}

/// Feature-axis attention. With `normalize` the columns of q and k are
/// l2-normalized first; the affinity is divided by `tau` before softmax.
pub fn cross_covariance_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    tau: f64,
    normalize: bool,
) -> Vec<f64> {
    let norm_cols = |x: &[f64]| -> Vec<f64> {
        let mut out = x.to_vec();
        for c in 0..d {
            let mut sq = 0.0;
            for i in 0..n {
                sq += x[i * d + c] * x[i * d + c];
            }
            let norm = sq.sqrt().max(1e-12);
            for i in 0..n {
                out[i * d + c] /= norm;
            }
        }
        out
    };
    let (qn, kn) = if normalize {
        (norm_cols(q), norm_cols(k))
    } else {
        (q.to_vec(), k.to_vec())
    };
    // affinity[a][b] = sum_i qn[i][a] kn[i][b]
    let mut affinity = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            for b in 0..d {
                affinity[a * d + b] += qn[i * d + a] * kn[i * d + b];
            }
        }
    }
    for x in affinity.iter_mut() {
        *x /= tau;
    }
    for row in affinity.chunks_mut(d) {
        softmax_row(row);
    }
    // out[i][a] = sum_b affinity[a][b] v[i][b]
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for a in 0..d {
            let mut acc = 0.0;
            for b in 0..d {
                acc += affinity[a * d + b] * v[i * d + b];
            }
            out[i * d + a] = acc;
        }
    }
    out
}

/// Additive attention's gated values u (before the caller's residual and
/// output projection). gate_q and gate_k are length-d vectors.
pub fn additive_attention_pooled(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    gate_q: &[f64],
    gate_k: &[f64],
    n: usize,
    d: usize,
) -> Vec<f64> {
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let pool = |x: &[f64], gate: &[f64]| -> Vec<f64> {
        let mut scores = vec![0.0; n];
        for i in 0..n {
            let mut dot = 0.0;
            for c in 0..d {
                dot += x[i * d + c] * gate[c];
            }
            scores[i] = dot * inv_sqrt_d;
        }
        softmax_row(&mut scores);
        let mut pooled = vec![0.0; d];
        for i in 0..n {
            for c in 0..d {
                pooled[c] += scores[i] * x[i * d + c];
            }
        }
        pooled
    };
    let global_q = pool(q, gate_q);
    let mut p = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            p[i * d + c] = k[i * d + c] * global_q[c];
        }
    }
    let global_k = pool(&p, gate_k);
    let mut u = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            u[i * d + c] = v[i * d + c] * global_k[c];
        }
    }
    u
}

/// Dense attention restricted to non-overlapping w x w windows of a
/// gh x gw token grid (tokens in row-major grid order).
pub fn window_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    d: usize,
    grid: (usize, usize),
    w: usize,
) -> Vec<f64> {
    let (gh, gw) = grid;
    assert_eq!(gh * gw, n, "grid must cover the tokens");
    assert!(w >= 1 && gh % w == 0 && gw % w == 0, "window must tile grid");
    let mut out = vec![0.0; n * d];
    let area = w * w;
    for wy in 0..gh / w {
        for wx in 0..gw / w {
            let mut idx = Vec::with_capacity(area);
            for iy in 0..w {
                for ix in 0..w {
                    idx.push((wy * w + iy) * gw + (wx * w + ix));
                }
            }
            let gather = |x: &[f64]| -> Vec<f64> {
                let mut g = Vec::with_capacity(area * d);
                for &i in &idx {
                    g.extend_from_slice(&x[i * d..(i + 1) * d]);
                }
                g
            };
            let local = softmax_attention(&gather(q), &gather(k), &gather(v), area, d);
            for (slot, &i) in idx.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(&local[slot * d..(slot + 1) * d]);
            }
        }
    }
    out
}
