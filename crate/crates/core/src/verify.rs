//! Equivalence and gradient verification suites.
//!
//! Every graph kernel is compared elementwise against the straight-line
//! reference implementations in `oracle` on batches of random instances;
//! exact algebraic identities (full-rank compression, full-grid windows)
//! and the random-feature convergence law are checked on top. The
//! `corrupt` switch deliberately injects a small deviation into one
//! comparison so callers can prove the harness actually detects failures.

use crate::attention::{self, AttentionKind, XcaTemperature};
use crate::autodiff::{finite_diff_check, GradCheckReport, Tape};
use crate::error::{Error, Result};
use crate::oracle;
use crate::rng::{derive, Rng};
use crate::tensor::{orthogonal_gaussian, Tensor};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_dev: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, max_dev: f64, tol: f64) -> Self {
        let pass = max_dev.is_finite() && max_dev <= tol;
        CheckOutcome {
            name: name.into(),
            max_dev,
            tol,
            pass,
        }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} max_dev={:.3e} tol={:.1e}",
            if self.pass { "pass" } else { "FAIL" },
            self.name,
            self.max_dev,
            self.tol
        )
    }
}

fn randn_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * std).collect()
}

fn max_abs_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

const ORACLE_TOL: f64 = 1e-10;
const ORACLE_INSTANCES: usize = 100;

/// Run one kernel through the tape in f64 and return its flat output.
#[allow(clippy::too_many_arguments)]
fn tape_kernel(
    kind: AttentionKind,
    batch: Option<usize>,
    n: usize,
    d: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    extra: &KernelInputs,
) -> Result<Vec<f64>> {
    let shape = match batch {
        Some(b) => vec![b, n, d],
        None => vec![n, d],
    };
    let mut t: Tape<f64> = Tape::new();
    let qn = t.constant(Tensor::new(shape.clone(), q.to_vec())?);
    let kn = t.constant(Tensor::new(shape.clone(), k.to_vec())?);
    let vn = t.constant(Tensor::new(shape, v.to_vec())?);
    let out = match (kind, extra) {
        (AttentionKind::Softmax, _) => attention::softmax_attention(&mut t, qn, kn, vn)?,
        (AttentionKind::Linformer, KernelInputs::Linformer { w_proj, m }) => {
            let w = t.constant(Tensor::new(vec![*m, n], w_proj.clone())?);
            attention::linformer_attention(&mut t, qn, kn, vn, w)?
        }
        (AttentionKind::Efficient, _) => attention::efficient_attention(&mut t, qn, kn, vn)?,
        (AttentionKind::Performer, KernelInputs::Performer { omega, r }) => {
            let om = t.constant(Tensor::new(vec![*r, d], omega.clone())?);
            attention::performer_attention(&mut t, qn, kn, vn, om)?
        }
        (AttentionKind::CrossCovariance, KernelInputs::Xca { tau, normalize }) => {
            attention::cross_covariance_attention(
                &mut t,
                qn,
                kn,
                vn,
                XcaTemperature::Fixed(*tau),
                *normalize,
            )?
        }
        (AttentionKind::Additive, KernelInputs::Additive { gate_q, gate_k }) => {
            let gq = t.constant(Tensor::new(vec![d, 1], gate_q.clone())?);
            let gk = t.constant(Tensor::new(vec![d, 1], gate_k.clone())?);
            attention::additive_attention_pooled(&mut t, qn, kn, vn, gq, gk)?
        }
        (AttentionKind::Window, KernelInputs::Window { w, grid }) => {
            attention::window_attention(&mut t, qn, kn, vn, *w, *grid)?
        }
        _ => return Err(Error::Contract("kernel inputs do not match kind".into())),
    };
    Ok(t.value(out).data().to_vec())
}

enum KernelInputs {
    Plain,
    Linformer { w_proj: Vec<f64>, m: usize },
    Performer { omega: Vec<f64>, r: usize },
    Xca { tau: f64, normalize: bool },
    Additive { gate_q: Vec<f64>, gate_k: Vec<f64> },
    Window { w: usize, grid: (usize, usize) },
}

fn oracle_eval(
    kind: AttentionKind,
    n: usize,
    d: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    extra: &KernelInputs,
) -> Vec<f64> {
    match (kind, extra) {
        (AttentionKind::Softmax, _) => oracle::softmax_attention(q, k, v, n, d),
        (AttentionKind::Linformer, KernelInputs::Linformer { w_proj, m }) => {
            oracle::linformer_attention(q, k, v, w_proj, n, *m, d)
        }
        (AttentionKind::Efficient, _) => oracle::efficient_attention(q, k, v, n, d),
        (AttentionKind::Performer, KernelInputs::Performer { omega, r }) => {
            oracle::performer_attention(q, k, v, omega, n, d, *r)
        }
        (AttentionKind::CrossCovariance, KernelInputs::Xca { tau, normalize }) => {
            oracle::cross_covariance_attention(q, k, v, n, d, *tau, *normalize)
        }
        (AttentionKind::Additive, KernelInputs::Additive { gate_q, gate_k }) => {
            oracle::additive_attention_pooled(q, k, v, gate_q, gate_k, n, d)
        }
        (AttentionKind::Window, KernelInputs::Window { w, grid }) => {
            oracle::window_attention(q, k, v, n, d, *grid, *w)
        }
        _ => unreachable!("kernel inputs matched in tape_kernel first"),
    }
}

struct KernelCase {
    name: &'static str,
    kind: AttentionKind,
    xca: Option<(bool, &'static str)>,
}

/// Compare one kernel against its oracle on `ORACLE_INSTANCES` random
/// shapes, plus a handful of 2-batched instances to exercise broadcasting.
fn oracle_check(
    case: &KernelCase,
    seed: u64,
    corrupt: bool,
) -> Result<CheckOutcome> {
    let mut rng = Rng::new(derive(seed, 0x1000 + case.kind as u64 * 7 + case.xca.is_some() as u64));
    let mut max_dev: f64 = 0.0;
    for inst in 0..ORACLE_INSTANCES + 20 {
        let batched = inst >= ORACLE_INSTANCES;
        // window needs a square grid; others take any token count
        let (n, grid, w) = if case.kind == AttentionKind::Window {
            let side = if rng.below(2) == 0 { 2 } else { 4 };
            let w = match side {
                2 => 1 + rng.below(2) as usize, // 1 or 2
                _ => [1, 2, 4][rng.below(3) as usize],
            };
            (side * side, (side, side), w)
        } else {
            (1 + rng.below(16) as usize, (0, 0), 0)
        };
        let d = 1 + rng.below(8) as usize;
        let b = if batched { 2 } else { 1 };
        let q = randn_vec(&mut rng, b * n * d, 1.0);
        let k = randn_vec(&mut rng, b * n * d, 1.0);
        let v = randn_vec(&mut rng, b * n * d, 1.0);
        let extra = match case.kind {
            AttentionKind::Linformer => {
                let m = 1 + rng.below(n as u64) as usize;
                KernelInputs::Linformer {
                    w_proj: randn_vec(&mut rng, m * n, 1.0),
                    m,
                }
            }
            AttentionKind::Performer => {
                let r = 1 + rng.below(8) as usize;
                let mut orng = Rng::new(rng.next_u64());
                let omega: Tensor<f64> = orthogonal_gaussian(&mut orng, r, d)?;
                KernelInputs::Performer {
                    omega: omega.data().to_vec(),
                    r,
                }
            }
            AttentionKind::CrossCovariance => {
                let (normalize, _) = case.xca.unwrap();
                KernelInputs::Xca {
                    tau: 0.25 + rng.uniform() * 2.0,
                    normalize,
                }
            }
            AttentionKind::Additive => KernelInputs::Additive {
                gate_q: randn_vec(&mut rng, d, 1.0),
                gate_k: randn_vec(&mut rng, d, 1.0),
            },
            AttentionKind::Window => KernelInputs::Window { w, grid },
            _ => KernelInputs::Plain,
        };
        let mut got = tape_kernel(
            case.kind,
            batched.then_some(b),
            n,
            d,
            &q,
            &k,
            &v,
            &extra,
        )?;
        if corrupt && case.kind == AttentionKind::Softmax && inst == 0 {
            got[0] += 1e-6;
        }
        let mut want = Vec::with_capacity(b * n * d);
        for bi in 0..b {
            let lo = bi * n * d;
            let hi = lo + n * d;
            want.extend(oracle_eval(
                case.kind,
                n,
                d,
                &q[lo..hi],
                &k[lo..hi],
                &v[lo..hi],
                &extra,
            ));
        }
        max_dev = max_dev.max(max_abs_dev(&got, &want));
    }
    Ok(CheckOutcome::new(
        format!("oracle/{}", case.name),
        max_dev,
        ORACLE_TOL,
    ))
}

/// Compressing with an identity matrix at full length must reproduce
/// dense attention exactly.
fn la_identity_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = Rng::new(derive(seed, 0x2001));
    let mut max_dev: f64 = 0.0;
    for _ in 0..25 {
        let n = 2 + rng.below(15) as usize;
        let d = 1 + rng.below(8) as usize;
        let q = randn_vec(&mut rng, n * d, 1.0);
        let k = randn_vec(&mut rng, n * d, 1.0);
        let v = randn_vec(&mut rng, n * d, 1.0);
        let mut eye = vec![0.0; n * n];
        for i in 0..n {
            eye[i * n + i] = 1.0;
        }
        let got = tape_kernel(
            AttentionKind::Linformer,
            None,
            n,
            d,
            &q,
            &k,
            &v,
            &KernelInputs::Linformer { w_proj: eye, m: n },
        )?;
        let want = tape_kernel(
            AttentionKind::Softmax,
            None,
            n,
            d,
            &q,
            &k,
            &v,
            &KernelInputs::Plain,
        )?;
        max_dev = max_dev.max(max_abs_dev(&got, &want));
    }
    Ok(CheckOutcome::new("identity/la_full_rank", max_dev, ORACLE_TOL))
}

/// A window covering the whole grid must reproduce dense attention.
fn window_identity_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = Rng::new(derive(seed, 0x2002));
    let mut max_dev: f64 = 0.0;
    for _ in 0..25 {
        let side = [2usize, 3, 4][rng.below(3) as usize];
        let n = side * side;
        let d = 1 + rng.below(8) as usize;
        let q = randn_vec(&mut rng, n * d, 1.0);
        let k = randn_vec(&mut rng, n * d, 1.0);
        let v = randn_vec(&mut rng, n * d, 1.0);
        let got = tape_kernel(
            AttentionKind::Window,
            None,
            n,
            d,
            &q,
            &k,
            &v,
            &KernelInputs::Window {
                w: side,
                grid: (side, side),
            },
        )?;
        let want = tape_kernel(
            AttentionKind::Softmax,
            None,
            n,
            d,
            &q,
            &k,
            &v,
            &KernelInputs::Plain,
        )?;
        max_dev = max_dev.max(max_abs_dev(&got, &want));
    }
    Ok(CheckOutcome::new(
        "identity/window_full_grid",
        max_dev,
        ORACLE_TOL,
    ))
}

/// The random-feature approximation must improve (mean absolute error
/// against dense attention, averaged over 100 feature draws) as the
/// feature count grows through 8, 32, 128, 512.
fn performer_convergence_check(seed: u64) -> Result<CheckOutcome> {
    let mut rng = Rng::new(derive(seed, 0x2003));
    let (n, d) = (16, 8);
    let q = randn_vec(&mut rng, n * d, 0.5);
    let k = q.clone(); // self-attention-like regime where the kernel is largest
    let v = randn_vec(&mut rng, n * d, 1.0);
    let want = oracle::softmax_attention(&q, &k, &v, n, d);
    let rs = [8usize, 32, 128, 512];
    let mut means = Vec::with_capacity(rs.len());
    for &r in &rs {
        let mut total = 0.0;
        for _ in 0..100 {
            let mut orng = Rng::new(rng.next_u64());
            let omega: Tensor<f64> = orthogonal_gaussian(&mut orng, r, d)?;
            let got = oracle::performer_attention(&q, &k, &v, omega.data(), n, d, r);
            let err: f64 = got
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / (n * d) as f64;
            total += err;
        }
        means.push(total / 100.0);
    }
    // largest consecutive increase; must be <= 0 for a monotone decrease
    let worst_step = means
        .windows(2)
        .map(|p| p[1] - p[0])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(CheckOutcome::new(
        "convergence/pa_features",
        worst_step,
        0.0,
    ))
}

/// All kernel-vs-oracle, identity, and convergence checks. With `corrupt`
/// one dense-attention output is nudged by 1e-6 to prove the comparisons
/// have teeth; the suite must then report at least one failure.
pub fn equivalence_suite(seed: u64, corrupt: bool) -> Result<Vec<CheckOutcome>> {
    let cases = [
        KernelCase { name: "sa", kind: AttentionKind::Softmax, xca: None },
        KernelCase { name: "la", kind: AttentionKind::Linformer, xca: None },
        KernelCase { name: "ea", kind: AttentionKind::Efficient, xca: None },
        KernelCase { name: "pa", kind: AttentionKind::Performer, xca: None },
        KernelCase { name: "aa", kind: AttentionKind::Additive, xca: None },
        KernelCase {
            name: "xca_canonical",
            kind: AttentionKind::CrossCovariance,
            xca: Some((true, "canonical")),
        },
        KernelCase {
            name: "xca_fixed",
            kind: AttentionKind::CrossCovariance,
            xca: Some((false, "fixed")),
        },
        KernelCase { name: "window", kind: AttentionKind::Window, xca: None },
    ];
    let mut out = Vec::new();
    for case in &cases {
        out.push(oracle_check(case, seed, corrupt)?);
    }
    out.push(la_identity_check(seed)?);
    out.push(window_identity_check(seed)?);
    out.push(performer_convergence_check(seed)?);
    Ok(out)
}

pub const GRAD_TOL: f64 = 1e-4;
const GRAD_H: f64 = 1e-5;
const GRAD_PROBES: usize = 64;

/// Gradient checks for each kernel (probing q, k, v packed side by side),
/// the composite transformer block pieces, and the full tiny model under
/// every mixer. All run in f64 with central differences.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    let n = 6usize;
    let d = 4usize;

    for kind in AttentionKind::ALL {
        let mut rng = Rng::new(derive(seed, 0x3000 + kind as u64));
        // window kernels need a square grid
        let (n, d, grid, w) = match kind {
            AttentionKind::Window => (16usize, 3usize, (4usize, 4usize), 2usize),
            _ => (n, d, (0, 0), 0),
        };
        let packed = Tensor::new(
            vec![n, 3 * d],
            randn_vec(&mut rng, n * 3 * d, 1.0),
        )?;
        // frozen side inputs, rebuilt identically inside every closure call
        let m = (n + 1) / 2;
        let w_proj = randn_vec(&mut rng, m * n, 1.0);
        let mut orng = Rng::new(derive(seed, 0x3100 + kind as u64));
        let omega: Tensor<f64> = orthogonal_gaussian(&mut orng, 6, d)?;
        let gate_q = randn_vec(&mut rng, d, 1.0);
        let gate_k = randn_vec(&mut rng, d, 1.0);
        let mut probe_rng = Rng::new(derive(seed, 0x3200 + kind as u64));
        let report = finite_diff_check(
            &format!("kernel/{}", kind.label()),
            &packed,
            GRAD_H,
            GRAD_PROBES,
            &mut probe_rng,
            |t, x| {
                let q = t.narrow_last(x, 0, d)?;
                let k = t.narrow_last(x, d, d)?;
                let v = t.narrow_last(x, 2 * d, d)?;
                let y = match kind {
                    AttentionKind::Softmax => attention::softmax_attention(t, q, k, v)?,
                    AttentionKind::Linformer => {
                        let wp = t.constant(Tensor::new(vec![m, n], w_proj.clone())?);
                        attention::linformer_attention(t, q, k, v, wp)?
                    }
                    AttentionKind::Efficient => attention::efficient_attention(t, q, k, v)?,
                    AttentionKind::Performer => {
                        let om = t.constant(omega.clone());
                        attention::performer_attention(t, q, k, v, om)?
                    }
                    AttentionKind::Additive => {
                        let gq = t.constant(Tensor::new(vec![d, 1], gate_q.clone())?);
                        let gk = t.constant(Tensor::new(vec![d, 1], gate_k.clone())?);
                        attention::additive_attention_pooled(t, q, k, v, gq, gk)?
                    }
                    AttentionKind::CrossCovariance => {
                        let tau = t.leaf(Tensor::full(&[1], 1.3));
                        attention::cross_covariance_attention(
                            t,
                            q,
                            k,
                            v,
                            XcaTemperature::Learned(tau),
                            true,
                        )?
                    }
                    AttentionKind::Window => attention::window_attention(t, q, k, v, w, grid)?,
                };
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
        )?;
        out.push(report);
    }

    out.push(block_gradcheck(seed)?);
    out.push(merge_gradcheck(seed)?);
    out.push(lpi_input_gradcheck(seed)?);
    out.push(lpi_kernel_gradcheck(seed)?);

    for kind in AttentionKind::ALL {
        out.push(crate::model::model_gradcheck(kind, GRAD_PROBES, seed)?);
    }
    Ok(out)
}

/// Full residual block (norm, dense attention, norm, feed-forward) with
/// frozen parameters, differentiated with respect to its input.
fn block_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(derive(seed, 0x3300));
    let (n, c) = (8usize, 8usize);
    let x = Tensor::new(vec![n, c], randn_vec(&mut rng, n * c, 1.0))?;
    let wq = randn_vec(&mut rng, c * c, 0.3);
    let wk = randn_vec(&mut rng, c * c, 0.3);
    let wv = randn_vec(&mut rng, c * c, 0.3);
    let wo = randn_vec(&mut rng, c * c, 0.3);
    let w1 = randn_vec(&mut rng, c * 2 * c, 0.3);
    let w2 = randn_vec(&mut rng, 2 * c * c, 0.3);
    let gamma = randn_vec(&mut rng, c, 0.2);
    let mut probe_rng = Rng::new(derive(seed, 0x3301));
    finite_diff_check(
        "composite/block",
        &x,
        GRAD_H,
        GRAD_PROBES,
        &mut probe_rng,
        move |t, x| {
            let mk = |t: &mut Tape<f64>, data: &[f64], rows: usize, cols: usize| {
                t.constant(Tensor::new(vec![rows, cols], data.to_vec()).unwrap())
            };
            let g = {
                let base: Vec<f64> = gamma.iter().map(|v| 1.0 + v).collect();
                t.constant(Tensor::new(vec![c], base).unwrap())
            };
            let b = t.constant(Tensor::zeros(&[c]));
            let h = t.layer_norm(x, g, b, 1e-5)?;
            let wqn = mk(t, &wq, c, c);
            let wkn = mk(t, &wk, c, c);
            let wvn = mk(t, &wv, c, c);
            let won = mk(t, &wo, c, c);
            let q = t.matmul(h, wqn)?;
            let k = t.matmul(h, wkn)?;
            let v = t.matmul(h, wvn)?;
            let a = attention::softmax_attention(t, q, k, v)?;
            let a = t.matmul(a, won)?;
            let x = t.add(x, a)?;
            let h = t.layer_norm(x, g, b, 1e-5)?;
            let w1n = mk(t, &w1, c, 2 * c);
            let w2n = mk(t, &w2, 2 * c, c);
            let f = t.matmul(h, w1n)?;
            let f = t.gelu(f)?;
            let f = t.matmul(f, w2n)?;
            let x = t.add(x, f)?;
            let sq = t.mul(x, x)?;
            t.sum_all(sq)
        },
    )
}

/// 2x2 token merge (gather, widen, project, normalize) with respect to
/// its input, read out through a fixed random weighting.
fn merge_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(derive(seed, 0x3400));
    let (g, c, c2) = (4usize, 4usize, 8usize);
    let n = g * g;
    let x = Tensor::new(vec![n, c], randn_vec(&mut rng, n * c, 1.0))?;
    let w = randn_vec(&mut rng, 4 * c * c2, 0.3);
    let readout = randn_vec(&mut rng, (n / 4) * c2, 1.0);
    let mut perm = Vec::with_capacity(n);
    for ty in 0..g / 2 {
        for tx in 0..g / 2 {
            perm.push((2 * ty) * g + 2 * tx);
            perm.push((2 * ty) * g + 2 * tx + 1);
            perm.push((2 * ty + 1) * g + 2 * tx);
            perm.push((2 * ty + 1) * g + 2 * tx + 1);
        }
    }
    let mut probe_rng = Rng::new(derive(seed, 0x3401));
    finite_diff_check(
        "composite/merge",
        &x,
        GRAD_H,
        GRAD_PROBES,
        &mut probe_rng,
        move |t, x| {
            let p = t.permute_rows(x, perm.clone())?;
            let p = t.reshape(p, &[n / 4, 4 * c])?;
            let wn = t.constant(Tensor::new(vec![4 * c, c2], w.clone()).unwrap());
            let p = t.matmul(p, wn)?;
            let gamma = t.constant(Tensor::full(&[c2], 1.1));
            let beta = t.constant(Tensor::full(&[c2], 0.1));
            let p = t.layer_norm(p, gamma, beta, 1e-5)?;
            // A plain sum of squares of a normalized output is nearly
            // constant (rows have fixed norm up to eps), which starves the
            // finite differences of signal; a random readout keeps the loss
            // sensitive to every element.
            let rn = t.constant(Tensor::new(vec![n / 4, c2], readout.clone()).unwrap());
            let y = t.mul(p, rn)?;
            t.sum_all(y)
        },
    )
}

/// Depthwise conv / gelu / conv stack with respect to the token input.
fn lpi_input_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(derive(seed, 0x3500));
    let (g, c) = (4usize, 4usize);
    let n = g * g;
    let x = Tensor::new(vec![n, c], randn_vec(&mut rng, n * c, 1.0))?;
    let k1 = randn_vec(&mut rng, c * 9, 0.3);
    let k2 = randn_vec(&mut rng, c * 9, 0.3);
    let mut probe_rng = Rng::new(derive(seed, 0x3501));
    finite_diff_check(
        "composite/lpi_input",
        &x,
        GRAD_H,
        GRAD_PROBES,
        &mut probe_rng,
        move |t, x| {
            let k1n = t.constant(Tensor::new(vec![c, 3, 3], k1.clone()).unwrap());
            let k2n = t.constant(Tensor::new(vec![c, 3, 3], k2.clone()).unwrap());
            let b1 = t.constant(Tensor::full(&[c], 0.05));
            let b2 = t.constant(Tensor::full(&[c], -0.05));
            let y = t.depthwise_conv3x3(x, k1n, b1, (g, g))?;
            let y = t.gelu(y)?;
            let y = t.depthwise_conv3x3(y, k2n, b2, (g, g))?;
            let sq = t.mul(y, y)?;
            t.sum_all(sq)
        },
    )
}

/// Same stack, but with respect to the first conv's kernel and bias
/// (packed as one [c, 10] leaf: 9 taps then the bias).
fn lpi_kernel_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::new(derive(seed, 0x3600));
    let (g, c) = (4usize, 7usize);
    let n = g * g;
    let x = randn_vec(&mut rng, n * c, 1.0);
    let packed = Tensor::new(vec![c, 10], randn_vec(&mut rng, c * 10, 0.3))?;
    let mut probe_rng = Rng::new(derive(seed, 0x3601));
    finite_diff_check(
        "composite/lpi_kernel",
        &packed,
        GRAD_H,
        GRAD_PROBES,
        &mut probe_rng,
        move |t, p| {
            let taps = t.narrow_last(p, 0, 9)?;
            let kernel = t.reshape(taps, &[c, 3, 3])?;
            let bias2d = t.narrow_last(p, 9, 1)?;
            let bias = t.reshape(bias2d, &[c])?;
            let xin = t.constant(Tensor::new(vec![n, c], x.clone()).unwrap());
            let y = t.depthwise_conv3x3(xin, kernel, bias, (g, g))?;
            let y = t.gelu(y)?;
            let sq = t.mul(y, y)?;
            t.sum_all(sq)
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_clean() {
        let outcomes = equivalence_suite(7, false).unwrap();
        assert_eq!(outcomes.len(), 11);
        for o in &outcomes {
            assert!(o.pass, "{o}");
        }
    }

    #[test]
    fn suite_catches_corruption() {
        let outcomes = equivalence_suite(7, true).unwrap();
        assert!(outcomes.iter().any(|o| !o.pass));
    }
}
