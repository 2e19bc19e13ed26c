//! Visual contrastive loss, topical pair prediction and their sum.
//!
//! Row layout follows [`EmbeddingBatch`]: row `3n + s` is video `n`, slot
//! `s ∈ {i, j, k}`. For an anchor `a` with positive `b`, the negative pool is
//! `b` together with every *active* row of another video. Active rows are the
//! `i`/`j` slots, plus the `k` slots when `include_vk_negatives` is set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mlp_backward_into, mlp_forward_from_pre, EmbeddingBatch, Mlp, MlpCache, MlpParams, Slot};
use crate::numerics::{axpy, dot, l2_normalize, normalize_backward, sigmoid, stable_logsumexp, Mat64, Vec64};

/// Clamp applied to predicted consistencies before the focal loss.
pub const EPS_P: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConcatMode {
    Bidirectional,
    Unidirectional,
}

/// Loss applied to the topical `(i, k)` pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopicalPairs {
    /// `k` clips take no part in the pair losses.
    None,
    /// `k` clips join the pair-prediction set.
    Tp,
    /// `(i, k)` is treated as a second contrastive positive.
    Cl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub focal_gamma: f64,
    pub include_vk_negatives: bool,
    pub concat_mode: ConcatMode,
    pub enable_vcl: bool,
    pub enable_tcl: bool,
    pub exclude_self_pairs: bool,
    pub topical_pairs: TopicalPairs,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            focal_gamma: 0.5,
            include_vk_negatives: true,
            concat_mode: ConcatMode::Bidirectional,
            enable_vcl: true,
            enable_tcl: true,
            exclude_self_pairs: false,
            topical_pairs: TopicalPairs::Tp,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal_gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        if !self.enable_vcl && !self.enable_tcl && self.topical_pairs != TopicalPairs::Cl {
            return Err(Error::NoLossEnabled);
        }
        Ok(())
    }

    /// Plain contrastive baseline: no topical clip anywhere.
    pub fn contrastive_only() -> Self {
        Self {
            include_vk_negatives: false,
            enable_tcl: false,
            topical_pairs: TopicalPairs::None,
            ..Self::default()
        }
    }

    fn k_is_active(&self) -> bool {
        self.include_vk_negatives || self.topical_pairs == TopicalPairs::Cl
    }
}

/// `−log softmax_pool(s_{i,·}/τ)[j]` on cosine similarities of rows of `z`.
pub fn nt_xent_pair(i: usize, j: usize, z: &Mat64, pool: &[usize], tau: f64) -> Result<f64> {
    if pool.len() < 2 {
        return Err(Error::PoolTooSmall(pool.len()));
    }
    if !pool.contains(&j) {
        return Err(Error::PositiveNotInPool(j));
    }
    if i == j || pool.contains(&i) {
        return Err(Error::InvalidArgument(format!("anchor {i} must not appear in its own pool")));
    }
    let logits = pool
        .iter()
        .map(|&n| Ok(crate::numerics::cosine_sim(z.row(i), z.row(n))? / tau))
        .collect::<Result<Vec<_>>>()?;
    let s_ij = crate::numerics::cosine_sim(z.row(i), z.row(j))? / tau;
    Ok(stable_logsumexp(&logits)? - s_ij)
}

/// Rows that serve as negatives for other videos.
fn active_rows(batch: &EmbeddingBatch, cfg: &LossConfig) -> Vec<usize> {
    (0..batch.z.rows())
        .filter(|&r| batch.index[r].1 != Slot::K || cfg.k_is_active())
        .collect()
}

/// Negative pool of anchor `a` with positive `b`.
pub fn negative_pool(batch: &EmbeddingBatch, active: &[usize], a: usize, b: usize) -> Vec<usize> {
    let va = batch.video_of(a);
    let mut pool: Vec<usize> = active.iter().copied().filter(|&r| batch.video_of(r) != va).collect();
    pool.push(b);
    pool
}

fn row_of(batch: &EmbeddingBatch, n: usize, slot: Slot) -> usize {
    batch
        .index
        .iter()
        .position(|&e| e == (n, slot))
        .expect("validated index map")
}

/// Ordered (anchor, positive) terms of the contrastive loss, grouped by
/// normalizer.
fn contrastive_terms(batch: &EmbeddingBatch, cfg: &LossConfig) -> Vec<(usize, usize)> {
    let n = batch.n_videos();
    let mut terms = Vec::new();
    if cfg.enable_vcl {
        for v in 0..n {
            let (i, j) = (row_of(batch, v, Slot::I), row_of(batch, v, Slot::J));
            terms.extend([(i, j), (j, i)]);
        }
    }
    if cfg.topical_pairs == TopicalPairs::Cl {
        for v in 0..n {
            let (i, k) = (row_of(batch, v, Slot::I), row_of(batch, v, Slot::K));
            terms.extend([(i, k), (k, i)]);
        }
    }
    terms
}

/// Symmetrized contrastive loss averaged per pair type, `(1/2N)Σ[ℓ(i,j)+ℓ(j,i)]`,
/// with its gradient w.r.t. every row of `z`.
pub fn vcl_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<(f64, Mat64)> {
    let n = batch.n_videos();
    if n < 2 {
        return Err(Error::TooFewVideos(n));
    }
    let rows = batch.z.rows();
    let normed: Vec<(Vec64, f64)> = (0..rows)
        .map(|r| l2_normalize(batch.z.row(r)))
        .collect::<Result<_>>()?;
    let units = Mat64::from_rows(&normed.iter().map(|(u, _)| u.clone()).collect::<Vec<_>>())?;
    let active = active_rows(batch, cfg);
    let terms = contrastive_terms(batch, cfg);
    let weight = 1.0 / (2 * n) as f64;
    let inv_tau = 1.0 / cfg.tau;

    // each term yields its loss and a sparse gradient on unit rows
    let per_term: Vec<(f64, Vec<(usize, Vec64)>)> = terms
        .par_iter()
        .map(|&(a, b)| {
            let pool = negative_pool(batch, &active, a, b);
            let ua = units.row(a);
            let logits: Vec<f64> = pool.iter().map(|&r| dot(ua, units.row(r)) * inv_tau).collect();
            let lse = stable_logsumexp(&logits)?;
            let s_ab = dot(ua, units.row(b)) * inv_tau;
            let mut grads = Vec::with_capacity(pool.len() + 1);
            let mut d_ua = vec![0.0; ua.len()];
            for (&r, &lg) in pool.iter().zip(&logits) {
                let p = (lg - lse).exp();
                let coef = weight * inv_tau * (p - if r == b { 1.0 } else { 0.0 });
                axpy(coef, units.row(r), &mut d_ua);
                grads.push((r, crate::numerics::scale(ua, coef)));
            }
            grads.push((a, d_ua));
            Ok((lse - s_ab, grads))
        })
        .collect::<Result<_>>()?;

    let mut loss = 0.0;
    let mut d_units = Mat64::zeros(rows, batch.z.cols());
    for (l, grads) in &per_term {
        loss += weight * l;
        for (r, g) in grads {
            axpy(1.0, g, d_units.row_mut(*r));
        }
    }
    let mut dz = Mat64::zeros(rows, batch.z.cols());
    for r in 0..rows {
        let (u, nrm) = &normed[r];
        dz.row_mut(r).copy_from_slice(&normalize_backward(u, *nrm, d_units.row(r)));
    }
    Ok((loss, dz))
}

/// Ordered pairs `(a, b)` over `rows` for the predictor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub rows: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

impl PairSet {
    /// Concatenated features `t_a ⊕ t_b`, one row per pair.
    pub fn features(&self, t: &Mat64) -> Mat64 {
        let c = t.cols();
        let mut out = Mat64::zeros(self.pairs.len(), 2 * c);
        for (p, &(a, b)) in self.pairs.iter().enumerate() {
            let row = out.row_mut(p);
            row[..c].copy_from_slice(t.row(a));
            row[c..].copy_from_slice(t.row(b));
        }
        out
    }
}

/// Bidirectional: every ordered pair over `rows`, self-pairs included.
/// Unidirectional: one orientation `a ≤ b` per unordered pair.
pub fn build_pair_set(rows: &[usize], mode: ConcatMode, exclude_self_pairs: bool) -> PairSet {
    let mut pairs = Vec::new();
    for (ia, &a) in rows.iter().enumerate() {
        for (ib, &b) in rows.iter().enumerate() {
            let keep = match mode {
                ConcatMode::Bidirectional => true,
                ConcatMode::Unidirectional => ia <= ib,
            };
            if keep && !(exclude_self_pairs && a == b) {
                pairs.push((a, b));
            }
        }
    }
    PairSet {
        rows: rows.to_vec(),
        pairs,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    /// `G_ab = 1` iff rows `a` and `b` come from the same video.
    pub g: Mat64,
    /// Label of each pair in the active pair set.
    pub labels: Vec<bool>,
    pub gamma1: usize,
    pub gamma2: usize,
}

pub fn topic_labels(index: &[(usize, Slot)], pairs: &PairSet) -> LabelMatrix {
    let n = index.len();
    let mut g = Mat64::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            if index[a].0 == index[b].0 {
                g[(a, b)] = 1.0;
            }
        }
    }
    let labels: Vec<bool> = pairs.pairs.iter().map(|&(a, b)| index[a].0 == index[b].0).collect();
    let gamma1 = labels.iter().filter(|&&l| l).count();
    LabelMatrix {
        g,
        gamma2: labels.len() - gamma1,
        labels,
        gamma1,
    }
}

/// `(1 − p)^γ · (−ln p)`
pub fn focal(p: f64, gamma: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    Ok((1.0 - p).powf(gamma) * -p.ln())
}

/// `d focal / dp`
pub fn focal_derivative(p: f64, gamma: f64) -> f64 {
    let q = 1.0 - p;
    let ce = -p.ln();
    let lead = if gamma == 0.0 || ce == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) * ce };
    lead - q.powf(gamma) / p
}

/// Class-balanced focal loss over the active pairs, with `dL/dM`.
pub fn tp_loss(m: &[f64], labels: &LabelMatrix, gamma: f64) -> Result<(f64, Vec64)> {
    if m.len() != labels.labels.len() {
        return Err(Error::DimensionMismatch {
            what: "predicted consistencies",
            expected: labels.labels.len(),
            got: m.len(),
        });
    }
    if labels.gamma2 == 0 {
        return Err(Error::NoNegatives);
    }
    if labels.gamma1 == 0 {
        return Err(Error::InvalidArgument("no positive pairs".into()));
    }
    let (w1, w2) = (1.0 / labels.gamma1 as f64, 1.0 / labels.gamma2 as f64);
    let mut pos = 0.0;
    let mut neg = 0.0;
    let mut dm = Vec::with_capacity(m.len());
    for (&p, &l) in m.iter().zip(&labels.labels) {
        if l {
            pos += focal(p, gamma)?;
            dm.push(w1 * focal_derivative(p, gamma));
        } else {
            neg += focal(1.0 - p, gamma)?;
            dm.push(-w2 * focal_derivative(1.0 - p, gamma));
        }
    }
    Ok((w1 * pos + w2 * neg, dm))
}

/// Forward state of the predictor over a pair set.
pub struct TopicalCache {
    /// Pair caches grouped by anchor position in `PairSet::rows`.
    caches: Vec<Vec<(usize, MlpCache)>>,
    raw: Vec64,
}

/// `M = clamp(sigmoid(φ(t_a ⊕ t_b)))`. The first layer of `φ` is split into
/// halves acting on `t_a` and `t_b`, so each row is projected once rather
/// than once per pair.
pub fn topical_forward(phi: &Mlp, t: &Mat64, pairs: &PairSet) -> Result<(Vec64, TopicalCache)> {
    let c = t.cols();
    if phi.spec.input_dim() != 2 * c || phi.spec.output_dim() != 1 {
        return Err(Error::DimensionMismatch {
            what: "predictor input",
            expected: phi.spec.input_dim(),
            got: 2 * c,
        });
    }
    let layer0 = &phi.params.layers[0];
    let left = layer0.w.col_block(0, c);
    let right = layer0.w.col_block(c, 2 * c);
    let mut proj_a = vec![Vec64::new(); t.rows()];
    let mut proj_b = vec![Vec64::new(); t.rows()];
    for &r in &pairs.rows {
        let mut a = left.matvec(t.row(r));
        axpy(1.0, &layer0.b, &mut a);
        proj_a[r] = a;
        proj_b[r] = right.matvec(t.row(r));
    }

    let mut by_anchor: Vec<Vec<(usize, (usize, usize))>> = vec![Vec::new(); t.rows()];
    for (p, &(a, b)) in pairs.pairs.iter().enumerate() {
        by_anchor[a].push((p, (a, b)));
    }
    let groups: Vec<Vec<(usize, f64, MlpCache)>> = by_anchor
        .par_iter()
        .map(|group| {
            group
                .iter()
                .map(|&(p, (a, b))| {
                    let mut pre = proj_a[a].clone();
                    axpy(1.0, &proj_b[b], &mut pre);
                    let (y, cache) = mlp_forward_from_pre(&phi.spec, &phi.params, pre)?;
                    Ok((p, y[0], cache))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut raw = vec![0.0; pairs.pairs.len()];
    let mut caches = Vec::with_capacity(groups.len());
    for group in groups {
        let mut g = Vec::with_capacity(group.len());
        for (p, logit, cache) in group {
            raw[p] = sigmoid(logit);
            g.push((p, cache));
        }
        caches.push(g);
    }
    let m = raw.iter().map(|&v| v.clamp(EPS_P, 1.0 - EPS_P)).collect();
    Ok((m, TopicalCache { caches, raw }))
}

/// Backpropagates `dL/dM` into `φ` and the topical embeddings.
pub fn topical_backward(
    phi: &Mlp,
    t: &Mat64,
    pairs: &PairSet,
    cache: &TopicalCache,
    dm: &[f64],
) -> Result<(Mat64, MlpParams)> {
    let c = t.cols();
    let hidden = phi.spec.layer_dims[1];
    let rows = t.rows();

    // per anchor: summed dpre over partners, dpre per partner, deeper grads
    let parts: Vec<(Vec64, Vec<(usize, Vec64)>, MlpParams)> = cache
        .caches
        .par_iter()
        .map(|group| {
            let mut grads = MlpParams::zeros(&phi.spec);
            let mut sum_a = vec![0.0; hidden];
            let mut per_b = Vec::with_capacity(group.len());
            for (p, pc) in group {
                let s = cache.raw[*p];
                let dlogit = if s < EPS_P || s > 1.0 - EPS_P { 0.0 } else { dm[*p] * s * (1.0 - s) };
                let dpre = mlp_backward_into(&phi.spec, &phi.params, pc, &[dlogit], &mut grads)?;
                axpy(1.0, &dpre, &mut sum_a);
                per_b.push((pairs.pairs[*p].1, dpre));
            }
            Ok((sum_a, per_b, grads))
        })
        .collect::<Result<_>>()?;

    let mut dphi = MlpParams::zeros(&phi.spec);
    let mut sum_b = vec![vec![0.0; hidden]; rows];
    let mut sum_a = vec![vec![0.0; hidden]; rows];
    for (a, (sa, per_b, grads)) in parts.iter().enumerate() {
        dphi.axpy(1.0, grads);
        axpy(1.0, sa, &mut sum_a[a]);
        for (b, dpre) in per_b {
            axpy(1.0, dpre, &mut sum_b[*b]);
        }
    }

    let layer0 = &phi.params.layers[0];
    let left = layer0.w.col_block(0, c);
    let right = layer0.w.col_block(c, 2 * c);
    let mut dt = Mat64::zeros(rows, c);
    let g0 = &mut dphi.layers[0];
    for r in 0..rows {
        let (sa, sb) = (&sum_a[r], &sum_b[r]);
        if sa.iter().all(|v| *v == 0.0) && sb.iter().all(|v| *v == 0.0) {
            continue;
        }
        let tr = t.row(r);
        for h in 0..hidden {
            let wrow = g0.w.row_mut(h);
            axpy(sa[h], tr, &mut wrow[..c]);
            axpy(sb[h], tr, &mut wrow[c..]);
        }
        axpy(1.0, sa, &mut g0.b);
        let mut d = left.matvec_t(sa);
        axpy(1.0, &right.matvec_t(sb), &mut d);
        dt.row_mut(r).copy_from_slice(&d);
    }
    Ok((dt, dphi))
}

#[derive(Debug, Clone)]
pub struct LossBundle {
    pub l_cl: f64,
    pub l_tp: f64,
    pub total: f64,
    pub dz: Mat64,
    pub dt: Mat64,
    pub dphi: MlpParams,
    /// Fraction of pairs whose thresholded prediction matches the label.
    pub tp_accuracy: Option<f64>,
}

/// Rows entering the pair-prediction loss.
pub fn tp_rows(batch: &EmbeddingBatch, cfg: &LossConfig) -> Vec<usize> {
    (0..batch.t.rows())
        .filter(|&r| batch.index[r].1 != Slot::K || cfg.topical_pairs == TopicalPairs::Tp)
        .collect()
}

pub fn total_loss(batch: &EmbeddingBatch, phi: &Mlp, cfg: &LossConfig) -> Result<LossBundle> {
    cfg.validate()?;
    batch.validate()?;
    let mut bundle = LossBundle {
        l_cl: 0.0,
        l_tp: 0.0,
        total: 0.0,
        dz: Mat64::zeros(batch.z.rows(), batch.z.cols()),
        dt: Mat64::zeros(batch.t.rows(), batch.t.cols()),
        dphi: MlpParams::zeros(&phi.spec),
        tp_accuracy: None,
    };
    if cfg.enable_vcl || cfg.topical_pairs == TopicalPairs::Cl {
        let (l, dz) = vcl_loss(batch, cfg)?;
        bundle.l_cl = l;
        bundle.dz = dz;
    }
    if cfg.enable_tcl {
        let pairs = build_pair_set(&tp_rows(batch, cfg), cfg.concat_mode, cfg.exclude_self_pairs);
        let labels = topic_labels(&batch.index, &pairs);
        let (m, cache) = topical_forward(phi, &batch.t, &pairs)?;
        let (l, dm) = tp_loss(&m, &labels, cfg.focal_gamma)?;
        let (dt, dphi) = topical_backward(phi, &batch.t, &pairs, &cache, &dm)?;
        let correct = m.iter().zip(&labels.labels).filter(|(p, l)| (**p > 0.5) == **l).count();
        bundle.tp_accuracy = Some(correct as f64 / m.len() as f64);
        bundle.l_tp = l;
        bundle.dt = dt;
        bundle.dphi = dphi;
    }
    bundle.total = bundle.l_cl + bundle.l_tp;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{mlp_forward, Activation, FinalActivation, MlpSpec};
    use crate::numerics::{fd_gradient, max_rel_error, Rng, FD_STEP};

    // focal(0.5, 0.5) and twice that, 40 significant digits
    const FOCAL_HALF: f64 = 0.490_129_071_734_273_595_856_950_861_817_616_690_645_7;
    const TWO_FOCAL_HALF: f64 = 0.980_258_143_468_547_191_713_901_723_635_233_381_291_5;

    fn batch_from(z: Mat64, t: Mat64) -> EmbeddingBatch {
        let n = z.rows() / 3;
        EmbeddingBatch {
            z,
            t,
            index: EmbeddingBatch::standard_index(n),
        }
    }

    fn random_batch(n: usize, dz: usize, dt: usize, seed: u64) -> EmbeddingBatch {
        let mut rng = Rng::new(seed);
        let z = Mat64::from_vec(3 * n, dz, rng.normal_vec(3 * n * dz, 1.0)).unwrap();
        let t = Mat64::from_vec(3 * n, dt, rng.normal_vec(3 * n * dt, 1.0)).unwrap();
        batch_from(z, t)
    }

    fn constant_batch(n: usize) -> EmbeddingBatch {
        let z = Mat64::from_vec(3 * n, 2, [1.0, 0.5].repeat(3 * n)).unwrap();
        batch_from(z.clone(), z)
    }

    #[test]
    fn identical_embeddings_give_log_pool_size() {
        let b = constant_batch(2);
        let eq2 = LossConfig::contrastive_only();
        let (l2, _) = vcl_loss(&b, &eq2).unwrap();
        assert!((l2 - 3f64.ln()).abs() < 1e-12);
        let eq4 = LossConfig::default();
        let (l4, _) = vcl_loss(&b, &eq4).unwrap();
        assert!((l4 - 4f64.ln()).abs() < 1e-12);

        let active = active_rows(&b, &eq4);
        let pool = negative_pool(&b, &active, 0, 1);
        assert_eq!(pool.len(), 4);
        assert!((nt_xent_pair(0, 1, &b.z, &pool, 0.1).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    fn brute_force(i: usize, j: usize, z: &Mat64, pool: &[usize], tau: f64) -> f64 {
        let cos = |a: usize, b: usize| {
            let (ra, rb) = (z.row(a), z.row(b));
            dot(ra, rb) / (dot(ra, ra).sqrt() * dot(rb, rb).sqrt())
        };
        let denom: f64 = pool.iter().map(|&n| (cos(i, n) / tau).exp()).sum();
        -((cos(i, j) / tau).exp() / denom).ln()
    }

    #[test]
    fn nt_xent_matches_enumeration() {
        for n in 2..=4 {
            let b = random_batch(n, 5, 3, n as u64);
            for cfg in [LossConfig::default(), LossConfig::contrastive_only()] {
                let active = active_rows(&b, &cfg);
                for (a, p) in contrastive_terms(&b, &cfg) {
                    let pool = negative_pool(&b, &active, a, p);
                    let got = nt_xent_pair(a, p, &b.z, &pool, 0.1).unwrap();
                    assert!((got - brute_force(a, p, &b.z, &pool, 0.1)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn nt_xent_errors() {
        let b = random_batch(2, 4, 2, 0);
        assert!(matches!(
            nt_xent_pair(0, 1, &b.z, &[3, 4], 0.1),
            Err(Error::PositiveNotInPool(1))
        ));
        assert!(matches!(nt_xent_pair(0, 1, &b.z, &[1], 0.1), Err(Error::PoolTooSmall(1))));
        let single = random_batch(1, 4, 2, 0);
        assert!(matches!(
            vcl_loss(&single, &LossConfig::default()),
            Err(Error::TooFewVideos(1))
        ));
    }

    #[test]
    fn vcl_gradient_matches_fd() {
        for seed in 0..4 {
            let b = random_batch(3, 4, 2, seed);
            for cfg in [
                LossConfig::default(),
                LossConfig::contrastive_only(),
                LossConfig {
                    topical_pairs: TopicalPairs::Cl,
                    ..LossConfig::default()
                },
            ] {
                let (_, dz) = vcl_loss(&b, &cfg).unwrap();
                let num = fd_gradient(
                    |v| {
                        let z = Mat64::from_vec(b.z.rows(), b.z.cols(), v.to_vec()).unwrap();
                        vcl_loss(&batch_from(z, b.t.clone()), &cfg).unwrap().0
                    },
                    b.z.data(),
                    FD_STEP,
                )
                .unwrap();
                assert!(max_rel_error(dz.data(), &num) < 1e-4);
            }
        }
    }

    #[test]
    fn pair_set_sizes_and_labels() {
        let rows: Vec<usize> = (0..6).collect();
        let bi = build_pair_set(&rows, ConcatMode::Bidirectional, false);
        let uni = build_pair_set(&rows, ConcatMode::Unidirectional, false);
        assert_eq!(bi.pairs.len(), 36);
        assert_eq!(uni.pairs.len(), 21);
        assert!(bi.pairs.contains(&(3, 3)) && uni.pairs.contains(&(3, 3)));
        assert_eq!(build_pair_set(&rows, ConcatMode::Bidirectional, true).pairs.len(), 30);

        let index = EmbeddingBatch::standard_index(2);
        let lab = topic_labels(&index, &bi);
        assert_eq!((lab.gamma1, lab.gamma2), (18, 18));
        for a in 0..6 {
            assert_eq!(lab.g[(a, a)], 1.0);
            for b in 0..6 {
                assert_eq!(lab.g[(a, b)], lab.g[(b, a)]);
            }
        }
        let one = topic_labels(&EmbeddingBatch::standard_index(1), &build_pair_set(&[0, 1, 2], ConcatMode::Bidirectional, false));
        assert_eq!(one.gamma2, 0);
        assert!(matches!(tp_loss(&[0.5; 9], &one, 0.5), Err(Error::NoNegatives)));
    }

    #[test]
    fn label_balance_is_one_over_n() {
        for n in 1..=16 {
            let rows: Vec<usize> = (0..3 * n).collect();
            let lab = topic_labels(
                &EmbeddingBatch::standard_index(n),
                &build_pair_set(&rows, ConcatMode::Bidirectional, false),
            );
            assert_eq!(lab.gamma1, 9 * n);
            assert_eq!(lab.gamma1 + lab.gamma2, 9 * n * n);
            assert!((lab.gamma1 as f64 / (9 * n * n) as f64 - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn focal_values() {
        assert_eq!(focal(1.0, 0.5).unwrap(), 0.0);
        assert_eq!(focal(0.3, 0.0).unwrap(), -(0.3f64).ln());
        assert!((focal(0.5, 0.5).unwrap() - FOCAL_HALF).abs() < 1e-15);
        assert!(matches!(focal(0.0, 0.5), Err(Error::InvalidProbability(_))));
        for &p in &[0.1, 0.4, 0.9] {
            for &g in &[0.0, 0.5, 2.0] {
                let num = fd_gradient(|x| focal(x[0], g).unwrap(), &[p], 1e-6).unwrap()[0];
                assert!((focal_derivative(p, g) - num).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tp_loss_values_and_gradient() {
        let rows: Vec<usize> = (0..6).collect();
        let pairs = build_pair_set(&rows, ConcatMode::Bidirectional, false);
        let lab = topic_labels(&EmbeddingBatch::standard_index(2), &pairs);
        let (half, _) = tp_loss(&[0.5; 36], &lab, 0.5).unwrap();
        assert!((half - TWO_FOCAL_HALF).abs() < 1e-14);

        let perfect: Vec<f64> = lab.labels.iter().map(|&l| if l { 1.0 } else { EPS_P }).collect();
        assert!(tp_loss(&perfect, &lab, 0.5).unwrap().0 < 1e-6);

        let mut rng = Rng::new(8);
        let m: Vec<f64> = (0..36).map(|_| rng.uniform_in(0.05, 0.95)).collect();
        let (_, dm) = tp_loss(&m, &lab, 0.5).unwrap();
        let num = fd_gradient(|v| tp_loss(v, &lab, 0.5).unwrap().0, &m, 1e-6).unwrap();
        assert!(max_rel_error(&dm, &num) < 1e-4);
    }

    fn phi_for(dt: usize, seed: u64) -> Mlp {
        let spec = MlpSpec::new(vec![2 * dt, 5, 1], Activation::Relu, FinalActivation::None).unwrap();
        Mlp::init(spec, &mut Rng::new(seed))
    }

    #[test]
    fn zero_predictor_outputs_half_and_order_matters() {
        let b = random_batch(2, 3, 3, 1);
        let pairs = build_pair_set(&(0..6).collect::<Vec<_>>(), ConcatMode::Bidirectional, false);
        let zero = Mlp {
            spec: phi_for(3, 0).spec,
            params: MlpParams::zeros(&phi_for(3, 0).spec),
        };
        let (m, _) = topical_forward(&zero, &b.t, &pairs).unwrap();
        assert!(m.iter().all(|&v| v == 0.5));
        let phi = phi_for(3, 5);
        let (m, _) = topical_forward(&phi, &b.t, &pairs).unwrap();
        let ab = pairs.pairs.iter().position(|&p| p == (0, 4)).unwrap();
        let ba = pairs.pairs.iter().position(|&p| p == (4, 0)).unwrap();
        assert_ne!(m[ab], m[ba]);
    }

    #[test]
    fn split_predictor_matches_concatenation() {
        let b = random_batch(3, 3, 4, 2);
        let phi = phi_for(4, 6);
        for mode in [ConcatMode::Bidirectional, ConcatMode::Unidirectional] {
            let pairs = build_pair_set(&(0..9).collect::<Vec<_>>(), mode, false);
            let (m, cache) = topical_forward(&phi, &b.t, &pairs).unwrap();
            let feats = pairs.features(&b.t);
            let mut rng = Rng::new(3);
            let dm = rng.normal_vec(m.len(), 1.0);
            let mut ref_phi = MlpParams::zeros(&phi.spec);
            let mut ref_dt = Mat64::zeros(9, 4);
            for (p, &(a, bb)) in pairs.pairs.iter().enumerate() {
                let (y, c) = mlp_forward(&phi.spec, &phi.params, feats.row(p)).unwrap();
                let s = sigmoid(y[0]);
                assert!((s.clamp(EPS_P, 1.0 - EPS_P) - m[p]).abs() < 1e-14);
                let dx = mlp_backward_into(&phi.spec, &phi.params, &c, &[dm[p] * s * (1.0 - s)], &mut ref_phi).unwrap();
                axpy(1.0, &dx[..4], ref_dt.row_mut(a));
                axpy(1.0, &dx[4..], ref_dt.row_mut(bb));
            }
            let (dt, dphi) = topical_backward(&phi, &b.t, &pairs, &cache, &dm).unwrap();
            assert!(max_rel_error(dt.data(), ref_dt.data()) < 1e-10);
            assert!(max_rel_error(&dphi.flatten(), &ref_phi.flatten()) < 1e-10);
        }
    }

    fn tp_objective(t: &Mat64, phi: &Mlp, index: &[(usize, Slot)], cfg: &LossConfig) -> f64 {
        let b = EmbeddingBatch {
            z: t.clone(),
            t: t.clone(),
            index: index.to_vec(),
        };
        let pairs = build_pair_set(&tp_rows(&b, cfg), cfg.concat_mode, cfg.exclude_self_pairs);
        let lab = topic_labels(index, &pairs);
        let (m, _) = topical_forward(phi, t, &pairs).unwrap();
        tp_loss(&m, &lab, cfg.focal_gamma).unwrap().0
    }

    #[test]
    fn total_loss_gradients_match_fd() {
        for seed in 0..3 {
            let b = random_batch(2, 3, 3, 10 + seed);
            let phi = phi_for(3, 20 + seed);
            for cfg in [
                LossConfig::default(),
                LossConfig {
                    concat_mode: ConcatMode::Unidirectional,
                    exclude_self_pairs: true,
                    ..LossConfig::default()
                },
                LossConfig {
                    enable_vcl: false,
                    topical_pairs: TopicalPairs::None,
                    ..LossConfig::default()
                },
            ] {
                let bundle = total_loss(&b, &phi, &cfg).unwrap();
                assert!((bundle.total - bundle.l_cl - bundle.l_tp).abs() < 1e-12);
                let num_t = fd_gradient(|v| {
                    let t = Mat64::from_vec(b.t.rows(), b.t.cols(), v.to_vec()).unwrap();
                    tp_objective(&t, &phi, &b.index, &cfg)
                }, b.t.data(), FD_STEP)
                .unwrap();
                assert!(max_rel_error(bundle.dt.data(), &num_t) < 1e-4);
                let mut probe = phi.clone();
                let num_phi = fd_gradient(|v| {
                    probe.params.unflatten(v);
                    tp_objective(&b.t, &probe, &b.index, &cfg)
                }, &phi.params.flatten(), FD_STEP)
                .unwrap();
                assert!(max_rel_error(&bundle.dphi.flatten(), &num_phi) < 1e-4);
            }
        }
    }

    #[test]
    fn loss_assignments() {
        let b = random_batch(3, 4, 3, 4);
        let phi = phi_for(3, 1);
        let vcl_only = LossConfig {
            enable_tcl: false,
            ..LossConfig::default()
        };
        let r = total_loss(&b, &phi, &vcl_only).unwrap();
        assert!(r.l_cl > 0.0 && r.l_tp == 0.0 && r.dt.data().iter().all(|v| *v == 0.0));

        let tp_only = LossConfig {
            enable_vcl: false,
            topical_pairs: TopicalPairs::None,
            ..LossConfig::default()
        };
        let r = total_loss(&b, &phi, &tp_only).unwrap();
        assert!(r.l_cl == 0.0 && r.l_tp > 0.0);
        // k rows take no part when topical pairs are off
        for v in 0..3 {
            assert!(r.dt.row(3 * v + 2).iter().all(|x| *x == 0.0));
        }

        let cl_cl = LossConfig {
            enable_tcl: false,
            topical_pairs: TopicalPairs::Cl,
            ..LossConfig::default()
        };
        let with_k = total_loss(&b, &phi, &cl_cl).unwrap().l_cl;
        let without = total_loss(&b, &phi, &vcl_only).unwrap().l_cl;
        assert!(with_k > without);

        let none = LossConfig {
            enable_vcl: false,
            enable_tcl: false,
            topical_pairs: TopicalPairs::None,
            ..LossConfig::default()
        };
        assert!(matches!(total_loss(&b, &phi, &none), Err(Error::NoLossEnabled)));
    }

    #[test]
    fn removing_vk_changes_loss_by_enumerable_term() {
        let b = random_batch(3, 4, 2, 7);
        let with = LossConfig::default();
        let without = LossConfig {
            include_vk_negatives: false,
            ..LossConfig::default()
        };
        let tau = 0.1;
        let cos = |a: usize, c: usize| crate::numerics::cosine_sim(b.z.row(a), b.z.row(c)).unwrap();
        for (a, p) in contrastive_terms(&b, &with) {
            let pw = negative_pool(&b, &active_rows(&b, &with), a, p);
            let po = negative_pool(&b, &active_rows(&b, &without), a, p);
            let extra: Vec<usize> = pw.iter().copied().filter(|r| !po.contains(r)).collect();
            assert!(extra.iter().all(|&r| b.index[r].1 == Slot::K && b.video_of(r) != b.video_of(a)));
            let denom_o: f64 = po.iter().map(|&r| (cos(a, r) / tau).exp()).sum();
            let denom_e: f64 = extra.iter().map(|&r| (cos(a, r) / tau).exp()).sum();
            let diff = nt_xent_pair(a, p, &b.z, &pw, tau).unwrap() - nt_xent_pair(a, p, &b.z, &po, tau).unwrap();
            assert!((diff - (1.0 + denom_e / denom_o).ln()).abs() < 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn vcl_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
                let b = random_batch(3, 4, 2, seed);
                let mut scaled = b.z.clone();
                scaled.data_mut().iter_mut().for_each(|v| *v *= c);
                let cfg = LossConfig::default();
                let l0 = vcl_loss(&b, &cfg).unwrap().0;
                let l1 = vcl_loss(&batch_from(scaled, b.t.clone()), &cfg).unwrap().0;
                prop_assert!((l0 - l1).abs() < 1e-12);
            }

            #[test]
            fn tp_loss_is_permutation_invariant_within_classes(seed in 0u64..1000) {
                let pairs = build_pair_set(&(0..9).collect::<Vec<_>>(), ConcatMode::Bidirectional, false);
                let lab = topic_labels(&EmbeddingBatch::standard_index(3), &pairs);
                let mut rng = crate::numerics::Rng::new(seed);
                let m: Vec<f64> = (0..pairs.pairs.len()).map(|_| rng.uniform_in(0.01, 0.99)).collect();
                let l0 = tp_loss(&m, &lab, 0.5).unwrap().0;
                let mut pos: Vec<usize> = (0..m.len()).filter(|&p| lab.labels[p]).collect();
                let mut neg: Vec<usize> = (0..m.len()).filter(|&p| !lab.labels[p]).collect();
                let shift = seed as usize % pos.len();
                pos.rotate_left(shift);
                neg.reverse();
                let mut permuted = m.clone();
                let pos_src: Vec<usize> = (0..m.len()).filter(|&p| lab.labels[p]).collect();
                let neg_src: Vec<usize> = (0..m.len()).filter(|&p| !lab.labels[p]).collect();
                for (d, s) in pos_src.iter().zip(&pos) { permuted[*d] = m[*s]; }
                for (d, s) in neg_src.iter().zip(&neg) { permuted[*d] = m[*s]; }
                let l1 = tp_loss(&permuted, &lab, 0.5).unwrap().0;
                prop_assert!((l0 - l1).abs() < 1e-12);
            }

            #[test]
            fn nt_xent_is_nonnegative(seed in 0u64..1000) {
                let b = random_batch(2, 3, 2, seed);
                let cfg = LossConfig::default();
                prop_assert!(vcl_loss(&b, &cfg).unwrap().0 >= 0.0);
            }
        }
    }
}
