use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The seven interchangeable token-mixing operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Dense softmax attention over token pairs; quadratic in tokens.
    Softmax,
    /// Keys/values projected to a fixed shorter length m before attention.
    Linformer,
    /// Softmax(q) times a feature-space context built from softmax over
    /// tokens of k; linear in tokens.
    Efficient,
    /// Positive random-feature approximation of the softmax kernel.
    Performer,
    /// Additive attention: global pooled query and key gate the values.
    Additive,
    /// Attention across the feature axis (d x d affinity matrix).
    CrossCovariance,
    /// Dense attention within non-overlapping w x w spatial windows.
    Window,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 7] = [
        AttentionKind::Softmax,
        AttentionKind::Linformer,
        AttentionKind::Efficient,
        AttentionKind::Performer,
        AttentionKind::Additive,
        AttentionKind::CrossCovariance,
        AttentionKind::Window,
    ];

    /// Short label used in CLI flags, CSV output, and config files.
    pub fn label(&self) -> &'static str {
        match self {
            AttentionKind::Softmax => "sa",
            AttentionKind::Linformer => "la",
            AttentionKind::Efficient => "ea",
            AttentionKind::Performer => "pa",
            AttentionKind::Additive => "aa",
            AttentionKind::CrossCovariance => "xca",
            AttentionKind::Window => "window",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sa" => Ok(AttentionKind::Softmax),
            "la" => Ok(AttentionKind::Linformer),
            "ea" => Ok(AttentionKind::Efficient),
            "pa" => Ok(AttentionKind::Performer),
            "aa" => Ok(AttentionKind::Additive),
            "xca" => Ok(AttentionKind::CrossCovariance),
            "window" | "swin" => Ok(AttentionKind::Window),
            other => Err(Error::Config(format!(
                "unknown attention kind '{other}' (expected sa|la|ea|pa|aa|xca|window)"
            ))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Temperature handling for feature-axis attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XcaMode {
    /// Column-l2-normalized q/k with one learnable temperature per head.
    Canonical,
    /// No normalization; temperature fixed to half the token count of the
    /// stage the layer sits in.
    FixedTau,
}

impl XcaMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "canonical" => Ok(XcaMode::Canonical),
            "fixed" | "fixed_tau" => Ok(XcaMode::FixedTau),
            other => Err(Error::Config(format!(
                "unknown xca mode '{other}' (expected canonical|fixed)"
            ))),
        }
    }
}

/// Which operator a model uses, plus the operator-specific hyperparameters.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub kind: AttentionKind,
    /// Projected length for Linformer layers as a fraction of the stage's
    /// token count: m = ceil(N * m_ratio).
    pub m_ratio: f64,
    /// Random-feature count for Performer layers; defaults to head_dim / 2.
    pub r: Option<usize>,
    /// Window side for window attention; clamped to the stage grid.
    pub w: usize,
    pub xca_mode: XcaMode,
    /// Channels per head.
    pub head_dim: usize,
}

impl AttentionSpec {
    pub fn new(kind: AttentionKind) -> Self {
        AttentionSpec {
            kind,
            m_ratio: 0.25,
            r: None,
            w: 7,
            xca_mode: XcaMode::Canonical,
            head_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_ratio > 0.0 && self.m_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "m_ratio must be in (0, 1], got {}",
                self.m_ratio
            )));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("head_dim must be >= 1".into()));
        }
        if self.w == 0 {
            return Err(Error::Config("window side must be >= 1".into()));
        }
        if self.r == Some(0) {
            return Err(Error::Config("feature count r must be >= 1".into()));
        }
        Ok(())
    }

    /// Projected length for a stage with n tokens; always in [1, n].
    pub fn m_for(&self, n: usize) -> usize {
        ((n as f64 * self.m_ratio).ceil() as usize).clamp(1, n)
    }

    pub fn r_features(&self) -> usize {
        self.r.unwrap_or((self.head_dim / 2).max(1))
    }

    /// Effective window side on a given grid: the configured side, clamped
    /// to the grid, which must then tile it exactly.
    pub fn window_for(&self, grid: (usize, usize)) -> Result<usize> {
        let side = self.w.min(grid.0).min(grid.1);
        if grid.0 % side != 0 || grid.1 % side != 0 {
            return Err(Error::Config(format!(
                "window side {side} does not tile grid {}x{}",
                grid.0, grid.1
            )));
        }
        Ok(side)
    }
}

fn head_width<T: Scalar>(t: &Tape<T>, q: NodeId) -> usize {
    *t.shape(q).last().unwrap()
}

/// softmax(q kᵀ / sqrt(d)) v over the last two axes; any leading extents
/// are treated as batch.
pub fn softmax_attention<T: Scalar>(
    t: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let d = head_width(t, q);
    let kt = t.transpose_last2(k)?;
    // Temperature applied to the transposed keys, not the logits: same
    // product, but the scaled tensor is d x N instead of N x N.
    let kt = t.scale(kt, T::from_f64(1.0 / (d as f64).sqrt()))?;
    let logits = t.matmul(q, kt)?;
    let weights = t.softmax_last(logits)?;
    t.matmul(weights, v)
}

/// Keys and values compressed to m rows through `w_proj` [m, N], then
/// ordinary scaled-dot attention against the full-length queries.
pub fn linformer_attention<T: Scalar>(
    t: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    w_proj: NodeId,
) -> Result<NodeId> {
    let wp = t.shape(w_proj);
    if wp.len() != 2 {
        return Err(Error::Shape(format!(
            "projection must be a matrix, got {wp:?}"
        )));
    }
    let (m, n_proj) = (wp[0], wp[1]);
    let n = t.shape(k)[t.shape(k).len() - 2];
    if n_proj != n {
        return Err(Error::Shape(format!(
            "projection expects {n_proj} tokens, keys have {n}"
        )));
    }
    if m > n {
        return Err(Error::Config(format!(
            "projected length {m} exceeds token count {n}"
        )));
    }
    let kp = t.matmul(w_proj, k)?;
    let vp = t.matmul(w_proj, v)?;
    softmax_attention(t, q, kp, vp)
}

/// softmax over features of q, softmax over tokens of kᵀ, multiplied
/// through a d x d context matrix: linear in tokens.
pub fn efficient_attention<T: Scalar>(
    t: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId> {
    let qs = t.softmax_last(q)?;
    let kt = t.transpose_last2(k)?;
    let ks = t.softmax_last(kt)?; // per-feature weights over tokens
    let context = t.matmul(ks, v)?;
    t.matmul(qs, context)
}

/// Positive random-feature attention. psi(x) = r^{-1/2} exp(omega xhat -
/// |xhat|^2 / 2) with xhat = x d^{-1/4}, so the approximated kernel is
/// exp(q kᵀ / sqrt(d)); all features are strictly positive, making the
/// normalizer positive too.
pub fn performer_attention<T: Scalar>(
    t: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    omega: NodeId,
) -> Result<NodeId> {
    let d = head_width(t, q);
    let om_shape = t.shape(omega);
    if om_shape.len() != 2 || om_shape[1] != d {
        return Err(Error::Shape(format!(
            "feature matrix {om_shape:?} does not match head width {d}"
        )));
    }
    let r = om_shape[0];
    let om_t = t.transpose_last2(omega)?;
    let feature_scale = T::from_f64(1.0 / (r as f64).sqrt());
    let input_scale = T::from_f64((d as f64).powf(-0.25));

    let psi = |t: &mut Tape<T>, x: NodeId| -> Result<NodeId> {
        let xh = t.scale(x, input_scale)?;
        let proj = t.matmul(xh, om_t)?;
        let sq = t.mul(xh, xh)?;
        let half_norm = t.sum_last_keep(sq)?;
        let neg = t.scale(half_norm, T::from_f64(-0.5))?;
        let shifted = t.badd(proj, neg)?;
        let e = t.exp(shifted)?;
        t.scale(e, feature_scale)
    };

    let pq = psi(t, q)?;
    let pk = psi(t, k)?;
    let pkt = t.transpose_last2(pk)?;
    let aggregate = t.matmul(pkt, v)?;
    let numerator = t.matmul(pq, aggregate)?;
    let ksum = t.sum_last_keep(pkt)?;
    let denominator = t.matmul(pq, ksum)?;
    let min_den = t
        .value(denominator)
        .data()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v.to_f64()));
    if min_den < 1e-30 {
        return Err(Error::Numeric(format!(
            "random-feature normalizer underflow ({min_den:.3e}); rescale the inputs"
        )));
    }
    t.bdiv(numerator, denominator)
}

/// Temperature argument for feature-axis attention.
#[derive(Clone, Copy, Debug)]
pub enum XcaTemperature {
    /// Single-element learnable node.
    Learned(NodeId),
    /// Fixed constant divisor.
    Fixed(f64),
}

/// Attention across the feature axis: a d x d affinity between (optionally
/// column-normalized) q and k, softmaxed and applied to vᵀ.
pub fn cross_covariance_attention<T: Scalar>(
    t: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    temperature: XcaTemperature,
    normalize: bool,
) -> Result<NodeId> {
    let qt = t.transpose_last2(q)?;
    let kt = t.transpose_last2(k)?;
    let (qrows, krows) = if normalize {
        (t.l2_normalize_rows(qt)?, t.l2_normalize_rows(kt)?)
    } else {
        (qt, kt)
    };
    let ktt = t.transpose_last2(krows)?;
    let affinity = t.matmul(qrows, ktt)?;
    let scaled = match temperature {
        XcaTemperature::Learned(tau) => t.div_scalar_node(affinity, tau)?,
        XcaTemperature::Fixed(f) => {
            if f <= 0.0 {
                return Err(Error::Contract("temperature must be positive".into()));
            }
            t.scale(affinity, T::from_f64(1.0 / f))?
        }
    };
    let weights = t.softmax_last(scaled)?;
    let vt = t.transpose_last2(v)?;
    let out_t = t.matmul(weights, vt)?;
    t.transpose_last2(out_t)
}

/// Additive attention core: pool a global query with gate_q, gate the keys
/// with it, pool a global key with gate_k, gate the values. Returns the
/// gated values u; the residual `q + u W` is applied by the caller (see
/// `additive_attention`).
pub fn additive_attention_pooled<T: Scalar>(
    t: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    gate_q: NodeId,
    gate_k: NodeId,
) -> Result<NodeId> {
    let d = head_width(t, q);
    let inv_sqrt_d = T::from_f64(1.0 / (d as f64).sqrt());
    let row_shape = |t: &Tape<T>, x: NodeId| -> Vec<usize> {
        // [.., N, 1] and [.., 1, N] share a memory layout
        let mut s = t.shape(x).to_vec();
        let r = s.len();
        s.swap(r - 2, r - 1);
        s
    };

    let sq = t.matmul(q, gate_q)?;
    let sq = t.scale(sq, inv_sqrt_d)?;
    let shape = row_shape(t, sq);
    let sq = t.reshape(sq, &shape)?;
    let alpha = t.softmax_last(sq)?;
    let global_q = t.matmul(alpha, q)?;

    let p = t.bmul(k, global_q)?;
    let sk = t.matmul(p, gate_k)?;
    let sk = t.scale(sk, inv_sqrt_d)?;
    let shape = row_shape(t, sk);
    let sk = t.reshape(sk, &shape)?;
    let beta = t.softmax_last(sk)?;
    let global_k = t.matmul(beta, p)?;

    t.bmul(v, global_k)
}

/// Full single-head additive attention including its internal output
/// projection and residual: q + (u W_out).
pub fn additive_attention<T: Scalar>(
    t: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    gate_q: NodeId,
    gate_k: NodeId,
    w_out: NodeId,
) -> Result<NodeId> {
    let u = additive_attention_pooled(t, q, k, v, gate_q, gate_k)?;
    let proj = t.matmul(u, w_out)?;
    t.add(q, proj)
}

/// Dense attention inside non-overlapping w x w windows of a token grid.
pub fn window_attention<T: Scalar>(
    t: &mut Tape<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    w: usize,
    grid: (usize, usize),
) -> Result<NodeId> {
    let (gh, gw) = grid;
    let shape = t.shape(q).to_vec();
    let n = shape[shape.len() - 2];
    let d = shape[shape.len() - 1];
    if gh * gw != n {
        return Err(Error::Shape(format!(
            "grid {gh}x{gw} does not cover {n} tokens"
        )));
    }
    if w == 0 || gh % w != 0 || gw % w != 0 {
        return Err(Error::Config(format!(
            "window side {w} does not tile grid {gh}x{gw}"
        )));
    }
    if w == gh && w == gw {
        return softmax_attention(t, q, k, v);
    }
    let mut perm = Vec::with_capacity(n);
    for wy in 0..gh / w {
        for wx in 0..gw / w {
            for iy in 0..w {
                for ix in 0..w {
                    perm.push((wy * w + iy) * gw + (wx * w + ix));
                }
            }
        }
    }
    let windows = (gh / w) * (gw / w);
    let lead = &shape[..shape.len() - 2];
    let mut boxed: Vec<usize> = lead.to_vec();
    boxed.extend_from_slice(&[windows, w * w, d]);
    let mut flat: Vec<usize> = lead.to_vec();
    flat.extend_from_slice(&[n, d]);

    let gather = |t: &mut Tape<T>, x: NodeId| -> Result<NodeId> {
        let p = t.permute_rows(x, perm.clone())?;
        t.reshape(p, &boxed)
    };
    let qw = gather(t, q)?;
    let kw = gather(t, k)?;
    let vw = gather(t, v)?;
    let out = softmax_attention(t, qw, kw, vw)?;
    let out = t.reshape(out, &flat)?;
    let mut inverse = vec![0usize; n];
    for (j, &p) in perm.iter().enumerate() {
        inverse[p] = j;
    }
    t.permute_rows(out, inverse)
}

/// Variant-specific parameter nodes consumed by `multi_head`.
#[derive(Clone, Debug)]
pub enum KernelExtras {
    None,
    /// Shared [m, N] projection for the stage.
    Linformer { w_proj: NodeId },
    /// Frozen [r, d] feature matrix for the layer.
    Performer { omega: NodeId },
    /// Per-head temperatures [h], or None for the fixed N/2 variant.
    CrossCovariance { taus: Option<NodeId> },
    /// Per-head gate vectors, each stored as a [d, h] matrix.
    Additive { gate_q: NodeId, gate_k: NodeId },
}

/// Node ids of one attention layer's parameters.
#[derive(Clone, Debug)]
pub struct AttentionNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub extras: KernelExtras,
}

/// Shared multi-head wrapper: project x to q/k/v, split into heads of
/// width head_dim, dispatch the configured kernel per head, concatenate,
/// and apply the output projection. The additive variant consumes the
/// output projection internally — its per-head gated values are
/// concatenated, projected, and added to the full-width query.
pub fn multi_head<T: Scalar>(
    t: &mut Tape<T>,
    x: NodeId,
    nodes: &AttentionNodes,
    spec: &AttentionSpec,
    grid: (usize, usize),
) -> Result<NodeId> {
    let shape = t.shape(x).to_vec();
    let c = *shape.last().unwrap();
    let n = shape[shape.len() - 2];
    let d = spec.head_dim;
    if c % d != 0 {
        return Err(Error::Config(format!(
            "width {c} is not a multiple of head width {d}"
        )));
    }
    let heads = c / d;

    let q_full = {
        let m = t.matmul(x, nodes.wq)?;
        t.badd(m, nodes.bq)?
    };
    let k_full = {
        let m = t.matmul(x, nodes.wk)?;
        t.badd(m, nodes.bk)?
    };
    let v_full = {
        let m = t.matmul(x, nodes.wv)?;
        t.badd(m, nodes.bv)?
    };

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = t.narrow_last(q_full, h * d, d)?;
        let k = t.narrow_last(k_full, h * d, d)?;
        let v = t.narrow_last(v_full, h * d, d)?;
        let out = match (&spec.kind, &nodes.extras) {
            (AttentionKind::Softmax, _) => softmax_attention(t, q, k, v)?,
            (AttentionKind::Linformer, KernelExtras::Linformer { w_proj }) => {
                linformer_attention(t, q, k, v, *w_proj)?
            }
            (AttentionKind::Efficient, _) => efficient_attention(t, q, k, v)?,
            (AttentionKind::Performer, KernelExtras::Performer { omega }) => {
                performer_attention(t, q, k, v, *omega)?
            }
            (AttentionKind::CrossCovariance, KernelExtras::CrossCovariance { taus }) => {
                match taus {
                    Some(taus) => {
                        let tau = t.narrow_last(*taus, h, 1)?;
                        cross_covariance_attention(
                            t,
                            q,
                            k,
                            v,
                            XcaTemperature::Learned(tau),
                            true,
                        )?
                    }
                    None => cross_covariance_attention(
                        t,
                        q,
                        k,
                        v,
                        XcaTemperature::Fixed(n as f64 / 2.0),
                        false,
                    )?,
                }
            }
            (AttentionKind::Additive, KernelExtras::Additive { gate_q, gate_k }) => {
                let gq = t.narrow_last(*gate_q, h, 1)?;
                let gk = t.narrow_last(*gate_k, h, 1)?;
                additive_attention_pooled(t, q, k, v, gq, gk)?
            }
            (AttentionKind::Window, _) => {
                let side = spec.window_for(grid)?;
                window_attention(t, q, k, v, side, grid)?
            }
            (kind, extras) => {
                return Err(Error::Contract(format!(
                    "attention kind {kind} missing its parameters (got {extras:?})"
                )))
            }
        };
        head_outs.push(out);
    }
    let merged = t.concat_last(&head_outs)?;
    let projected = {
        let m = t.matmul(merged, nodes.wo)?;
        t.badd(m, nodes.bo)?
    };
    if spec.kind == AttentionKind::Additive {
        t.add(q_full, projected)
    } else {
        Ok(projected)
    }
}
