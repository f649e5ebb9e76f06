//! Distribution-alignment losses between paired embedding batches.
//!
//! The core statistic is an empirical Cauchy-Schwarz divergence computed from
//! Gaussian gram matrices:
//!
//!   D = -log( S_at / sqrt(S_aa * S_tt) )
//!
//! where each S is a count-normalized double sum over kernel evaluations,
//! diagonals included. The cross sum never exceeds the geometric mean of the
//! self sums (Cauchy-Schwarz in the kernel feature space), so D >= 0 up to
//! rounding, and D = 0 exactly when the two multisets coincide.
//!
//! Bandwidths are data-derived (median heuristic) or fixed, and are always
//! treated as constants during differentiation.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{sq_dist, Tensor};

/// Lower clamp on the log argument; keeps the loss finite for far-apart sets.
const LOG_FLOOR: f64 = 1e-300;

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthPolicy {
    /// Median pairwise distance of the pooled set, per call.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct KernelConfig {
    pub policy: BandwidthPolicy,
    pub sigma_floor: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            policy: BandwidthPolicy::Median,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        KernelConfig {
            policy: BandwidthPolicy::Fixed(sigma),
            sigma_floor: DEFAULT_SIGMA_FLOOR,
        }
    }

    /// Effective bandwidth for a pair of point sets; never beneath the floor.
    pub fn sigma_for(&self, x: &Tensor, y: &Tensor) -> f64 {
        match self.policy {
            BandwidthPolicy::Fixed(s) => s.max(self.sigma_floor),
            BandwidthPolicy::Median => median_bandwidth(x, y, self.sigma_floor),
        }
    }
}

/// sigma = sqrt(median squared pairwise distance of the pooled rows / 2),
/// clamped below. Degenerate (all-identical) sets fall to the floor.
pub fn median_bandwidth(x: &Tensor, y: &Tensor, floor: f64) -> f64 {
    let mut rows: Vec<&[f64]> = Vec::with_capacity(x.rows() + y.rows());
    for i in 0..x.rows() {
        rows.push(x.row(i));
    }
    for j in 0..y.rows() {
        rows.push(y.row(j));
    }
    let n = rows.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(rows[i], rows[j]));
        }
    }
    if dists.is_empty() {
        return floor;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    (median / 2.0).sqrt().max(floor)
}

/// Count-normalized CS divergence between two row sets of any sizes.
/// The normalizations cancel when counts match, reproducing the paired form.
fn cs_core(tape: &mut Tape, a: NodeId, t: NodeId, sigma: f64) -> Result<NodeId> {
    let n_a = tape.value(a).rows() as f64;
    let n_t = tape.value(t).rows() as f64;

    let k_at = tape.gaussian_gram(a, t, sigma)?;
    let k_aa = tape.gaussian_gram(a, a, sigma)?;
    let k_tt = tape.gaussian_gram(t, t, sigma)?;

    let s_at_raw = tape.sum_all(k_at);
    let s_at = tape.mul_scalar(s_at_raw, 1.0 / (n_a * n_t));
    let s_aa_raw = tape.sum_all(k_aa);
    let s_aa = tape.mul_scalar(s_aa_raw, 1.0 / (n_a * n_a));
    let s_tt_raw = tape.sum_all(k_tt);
    let s_tt = tape.mul_scalar(s_tt_raw, 1.0 / (n_t * n_t));

    let denom_sq = tape.mul(s_aa, s_tt)?;
    let denom = tape.sqrt(denom_sq)?;
    let ratio = tape.div(s_at, denom)?;
    let clamped = tape.clamp_min(ratio, LOG_FLOOR);
    let lg = tape.log(clamped)?;
    Ok(tape.neg(lg))
}

/// Paired-batch CS divergence; sample counts must match.
pub fn cs_divergence_hat(
    tape: &mut Tape,
    a: NodeId,
    t: NodeId,
    cfg: &KernelConfig,
) -> Result<NodeId> {
    let (ba, bt) = (tape.value(a).rows(), tape.value(t).rows());
    if ba != bt {
        return Err(Error::ShapeMismatch {
            op: "cs_divergence_hat",
            lhs: tape.value(a).shape().to_vec(),
            rhs: tape.value(t).shape().to_vec(),
        });
    }
    let sigma = cfg.sigma_for(tape.value(a), tape.value(t));
    cs_core(tape, a, t, sigma)
}

/// Global-level loss over pooled batch representatives.
pub fn cs_global_loss(
    tape: &mut Tape,
    pooled_a: NodeId,
    pooled_t: NodeId,
    cfg: &KernelConfig,
) -> Result<NodeId> {
    cs_divergence_hat(tape, pooled_a, pooled_t, cfg)
}

/// Mean per-pair CS divergence between token sets; counts may differ within
/// a pair, each pair gets its own bandwidth.
pub fn cs_token_loss(
    tape: &mut Tape,
    tokens_a: &[NodeId],
    tokens_t: &[NodeId],
    cfg: &KernelConfig,
) -> Result<NodeId> {
    if tokens_a.is_empty() || tokens_a.len() != tokens_t.len() {
        return Err(Error::domain(
            "cs_token_loss",
            format!("need equal non-zero pair counts, got {} vs {}", tokens_a.len(), tokens_t.len()),
        ));
    }
    let mut acc: Option<NodeId> = None;
    for (&za, &zt) in tokens_a.iter().zip(tokens_t) {
        let sigma = cfg.sigma_for(tape.value(za), tape.value(zt));
        let d = cs_core(tape, za, zt, sigma)?;
        acc = Some(match acc {
            None => d,
            Some(prev) => tape.add(prev, d)?,
        });
    }
    Ok(tape.mul_scalar(acc.expect("non-empty"), 1.0 / tokens_a.len() as f64))
}

/// Symmetric InfoNCE over cosine similarities with in-batch negatives.
pub fn info_nce(tape: &mut Tape, a: NodeId, t: NodeId, tau: f64) -> Result<NodeId> {
    let b = tape.value(a).rows();
    if tape.value(t).rows() != b {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            lhs: tape.value(a).shape().to_vec(),
            rhs: tape.value(t).shape().to_vec(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::domain("info_nce", "temperature must be positive"));
    }
    for (name, id) in [("a", a), ("t", t)] {
        for i in 0..b {
            if tape.value(id).row(i).iter().all(|&v| v == 0.0) {
                return Err(Error::domain(
                    "info_nce",
                    format!("zero-norm row {i} in batch {name}"),
                ));
            }
        }
    }

    let normalize = |tape: &mut Tape, x: NodeId| -> Result<NodeId> {
        let sq = tape.mul(x, x)?;
        let sums = tape.row_sums(sq);
        let norms = tape.sqrt(sums)?;
        tape.div_cols(x, norms)
    };
    let na = normalize(tape, a)?;
    let nt = normalize(tape, t)?;

    let ntt = tape.transpose(nt);
    let sims_raw = tape.matmul(na, ntt)?;
    let sims = tape.mul_scalar(sims_raw, 1.0 / tau);
    let diag: Vec<usize> = (0..b).collect();

    let ls_a2t = tape.log_softmax(sims);
    let d1 = tape.take_per_row(ls_a2t, &diag)?;
    let m1 = tape.mean_all(d1);

    let sims_t = tape.transpose(sims);
    let ls_t2a = tape.log_softmax(sims_t);
    let d2 = tape.take_per_row(ls_t2a, &diag)?;
    let m2 = tape.mean_all(d2);

    let total = tape.add(m1, m2)?;
    let half = tape.mul_scalar(total, -0.5);
    Ok(half)
}

#[derive(Debug, Clone, Copy)]
pub struct CmaWeights {
    pub alpha_global: f64,
    pub alpha_token: f64,
    pub alpha_nce: f64,
    pub tau: f64,
}

impl Default for CmaWeights {
    fn default() -> Self {
        CmaWeights {
            alpha_global: 1.0,
            alpha_token: 1.0,
            alpha_nce: 1.0,
            tau: 0.07,
        }
    }
}

/// Component values for logging; None marks a term disabled by zero weight.
#[derive(Debug, Clone, Copy, Default)]
pub struct CmaParts {
    pub global: Option<f64>,
    pub token: Option<f64>,
    pub nce: Option<f64>,
}

/// Weighted alignment loss. Zero-weight components are skipped entirely and
/// reported as absent.
pub fn cma_loss(
    tape: &mut Tape,
    pooled_a: NodeId,
    pooled_t: NodeId,
    tokens_a: &[NodeId],
    tokens_t: &[NodeId],
    w: &CmaWeights,
    cfg: &KernelConfig,
) -> Result<(NodeId, CmaParts)> {
    let mut parts = CmaParts::default();
    let mut total: Option<NodeId> = None;
    let push = |tape: &mut Tape, total: &mut Option<NodeId>, term: NodeId, weight: f64| -> Result<()> {
        let scaled = tape.mul_scalar(term, weight);
        *total = Some(match *total {
            None => scaled,
            Some(prev) => tape.add(prev, scaled)?,
        });
        Ok(())
    };

    if w.alpha_global != 0.0 {
        let g = cs_global_loss(tape, pooled_a, pooled_t, cfg)?;
        parts.global = Some(tape.value(g).item());
        push(tape, &mut total, g, w.alpha_global)?;
    }
    if w.alpha_token != 0.0 {
        let t = cs_token_loss(tape, tokens_a, tokens_t, cfg)?;
        parts.token = Some(tape.value(t).item());
        push(tape, &mut total, t, w.alpha_token)?;
    }
    if w.alpha_nce != 0.0 {
        let n = info_nce(tape, pooled_a, pooled_t, w.tau)?;
        parts.nce = Some(tape.value(n).item());
        push(tape, &mut total, n, w.alpha_nce)?;
    }
    let total = match total {
        Some(t) => t,
        None => tape.scalar(0.0),
    };
    Ok((total, parts))
}

// ── gap metrics ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct GapMetrics {
    pub l2_mean: f64,
    /// None when some row has zero norm (cosine undefined).
    pub cos_mean: Option<f64>,
}

/// Paired modality-gap measurements over pooled batches.
pub fn gap_metrics(a: &Tensor, t: &Tensor) -> Result<GapMetrics> {
    let b = a.rows();
    if b != t.rows() || a.cols() != t.cols() {
        return Err(Error::ShapeMismatch {
            op: "gap_metrics",
            lhs: a.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let mut l2 = 0.0;
    let mut cos = 0.0;
    let mut cos_defined = true;
    for i in 0..b {
        let (ra, rt) = (a.row(i), t.row(i));
        l2 += sq_dist(ra, rt).sqrt();
        let na: f64 = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt: f64 = rt.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nt == 0.0 {
            cos_defined = false;
        } else {
            let dot: f64 = ra.iter().zip(rt).map(|(x, y)| x * y).sum();
            cos += dot / (na * nt);
        }
    }
    Ok(GapMetrics {
        l2_mean: l2 / b as f64,
        cos_mean: if cos_defined { Some(cos / b as f64) } else { None },
    })
}

// ─────────────────────────────────────────────────────────────────────────────
