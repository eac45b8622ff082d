//! Training objectives.
//!
//! Every loss is built on a [`Graph`] so it can be differentiated. The
//! contrastive losses share one kernel: given a similarity matrix `S` over a
//! batch of `2N` samples, anchor `i` contributes
//!
//! ```text
//! -1/|P(i)| · Σ_{p ∈ P(i)} log( exp(S_ip/τ) / Σ_{k≠i} exp(S_ik/τ) )
//! ```
//!
//! where `P(i)` is every other sample sharing `i`'s label. The global
//! variant uses cosine similarity of projected globals; the spatial variant
//! uses the attention-aligned similarity of [`spatial_similarity`].

use scl_autodiff::{Bound, Graph, Reduction, Tensor, Var, NORM_EPS};

use crate::error::{config, contract};
use crate::model::{AttentionVars, AuxHeads, FeaturePack, FeatureVars};
use crate::{Error, Result};

/// How per-location similarities are combined into one score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Sum,
    Mean,
    Max,
    LogSumExp,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [Self::Sum, Self::Mean, Self::Max, Self::LogSumExp];

    fn reduction(self) -> Reduction {
        match self {
            Self::Sum => Reduction::Sum,
            Self::Mean => Reduction::Mean,
            Self::Max => Reduction::Max,
            Self::LogSumExp => Reduction::LogSumExp,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
            Self::Max => "max",
            Self::LogSumExp => "logsumexp",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| config(format!("unknown aggregation {s:?}")))
    }
}

/// How anchor terms are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnchorNorm {
    Sum,
    Mean,
}

impl std::str::FromStr for AnchorNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            _ => Err(config(format!("unknown anchor normalization {s:?}"))),
        }
    }
}

impl AnchorNorm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Global temperature τ.
    pub tau: f64,
    /// Spatial temperature τ′.
    pub tau_prime: f64,
    pub aggregation: Aggregation,
    pub anchor_normalization: AnchorNorm,
    /// When false, the labels are replaced by [`ss_labels`].
    pub supervised: bool,
    /// Re-normalise aligned values before the dot product.
    pub renormalize_aligned: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            tau_prime: 0.1,
            aggregation: Aggregation::Mean,
            anchor_normalization: AnchorNorm::Sum,
            supervised: true,
            renormalize_aligned: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau_prime > 0.0) {
            return Err(config(format!(
                "temperatures must be positive, got {} and {}",
                self.tau, self.tau_prime
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda_ce: f64,
    pub lambda_sc: f64,
    pub lambda_gc: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_sc: 1.0,
            lambda_gc: 1.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_sc", self.lambda_sc),
            ("lambda_gc", self.lambda_gc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config(format!(
                    "{name} must be a nonnegative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub lambda_cd: f64,
    pub lambda_kl: f64,
    pub kl_temperature: f64,
    /// Weight of the global feature-matching term.
    pub alpha: f64,
    /// Weight of the spatial feature-matching term.
    pub beta: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_cd: 10.0,
            lambda_kl: 1.0,
            kl_temperature: 4.0,
            alpha: 1.0,
            beta: 0.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cd, self.lambda_kl, self.alpha, self.beta];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(config("distillation weights must be nonnegative numbers"));
        }
        if self.kl_temperature.is_nan() || self.kl_temperature <= 0.0 {
            return Err(config(format!(
                "kl temperature must be positive, got {}",
                self.kl_temperature
            )));
        }
        Ok(())
    }
}

/// Features of `2N` samples with their labels. Rows `i` and `i + N` are
/// normally two views of one source image.
#[derive(Clone, Debug)]
pub struct ContrastBatch {
    /// `[2N, d′]` projected globals or `[2N, HW, d]` spatial features.
    pub features: Var,
    pub labels: Vec<usize>,
}

impl ContrastBatch {
    pub fn new(features: Var, labels: Vec<usize>) -> Self {
        Self { features, labels }
    }

    /// `N`, half the batch.
    pub fn n(&self) -> usize {
        self.labels.len() / 2
    }

    /// Checks that views `i` and `i + N` carry the same label.
    pub fn check_paired(&self) -> Result<()> {
        check_labels(&self.labels)?;
        let n = self.n();
        match (0..n).find(|&i| self.labels[i] != self.labels[i + n]) {
            Some(i) => Err(contract(format!(
                "views {i} and {} have different labels",
                i + n
            ))),
            None => Ok(()),
        }
    }

    fn effective_labels(&self, cfg: &LossConfig) -> Vec<usize> {
        if cfg.supervised {
            self.labels.clone()
        } else {
            ss_labels(self.n())
        }
    }
}

fn check_labels(labels: &[usize]) -> Result<()> {
    if labels.is_empty() || !labels.len().is_multiple_of(2) {
        return Err(contract(format!(
            "contrastive batch needs an even, nonzero size, got {}",
            labels.len()
        )));
    }
    Ok(())
}

/// `[0, 1, …, N−1, 0, 1, …, N−1]`: each sample's only positive is its twin.
pub fn ss_labels(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| i % n).collect()
}

/// Mean cross-entropy of `logits: [B, C]` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(contract(format!(
            "{} labels for logits {s:?}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s[1]) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {} classes",
            s[1]
        )));
    }
    let lse = g.reduce(logits, Reduction::LogSumExp, 1)?;
    let picked = g.gather(logits, labels)?;
    let per = g.sub(lse, picked)?;
    Ok(g.mean_all(per)?)
}

/// Cosine similarity of two vectors.
pub fn sim_global(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Cosine similarity matrix of the rows of `f: [B, d′]`.
pub fn global_similarity(g: &mut Graph, f: Var) -> Result<Var> {
    if g.shape(f).len() != 2 {
        return Err(contract(format!(
            "projected features must be [B, d'], got {:?}",
            g.shape(f)
        )));
    }
    let u = g.l2_normalize(f, NORM_EPS)?;
    let ut = g.transpose(u)?;
    Ok(g.matmul(u, ut)?)
}

/// Contrastive loss from pre-scaled logits `S/τ` of shape `[2N, 2N]`.
pub fn contrastive_from_logits(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    norm: AnchorNorm,
) -> Result<Var> {
    check_labels(labels)?;
    let m = labels.len();
    if g.shape(logits) != [m, m] {
        return Err(contract(format!(
            "similarity matrix {:?} for {m} labels",
            g.shape(logits)
        )));
    }
    let mut mask = Tensor::zeros(&[m, m]);
    let mut weights = Tensor::zeros(&[m, m]);
    let mut row_weight = Tensor::zeros(&[m]);
    for i in 0..m {
        mask.data_mut()[i * m + i] = f64::NEG_INFINITY;
        let positives: Vec<usize> = (0..m)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if positives.is_empty() {
            log::warn!("anchor {i} has no positives and is skipped");
            continue;
        }
        let c = 1.0 / positives.len() as f64;
        for j in positives {
            weights.data_mut()[i * m + j] = c;
        }
        row_weight.data_mut()[i] = 1.0;
    }
    let mask = g.constant(mask);
    let masked = g.add(logits, mask)?;
    let lse = g.reduce(masked, Reduction::LogSumExp, 1)?;
    let rw = g.constant(row_weight);
    let denom = g.mul(lse, rw)?;
    let denom = g.sum_all(denom)?;
    let w = g.constant(weights);
    let numer = g.mul(logits, w)?;
    let numer = g.sum_all(numer)?;
    let loss = g.sub(denom, numer)?;
    Ok(match norm {
        AnchorNorm::Sum => loss,
        AnchorNorm::Mean => g.scale(loss, 1.0 / m as f64),
    })
}

/// Global contrastive loss over projected globals `batch.features: [2N, d′]`.
pub fn gc_loss(g: &mut Graph, batch: &ContrastBatch, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    check_rows(g, batch)?;
    let s = global_similarity(g, batch.features)?;
    let logits = g.scale(s, 1.0 / cfg.tau);
    contrastive_from_logits(
        g,
        logits,
        &batch.effective_labels(cfg),
        cfg.anchor_normalization,
    )
}

fn check_rows(g: &Graph, batch: &ContrastBatch) -> Result<()> {
    check_labels(&batch.labels)?;
    let rows = g.shape(batch.features).first().copied().unwrap_or(0);
    if rows != batch.labels.len() {
        return Err(contract(format!(
            "{} labels for {rows} feature rows",
            batch.labels.len()
        )));
    }
    Ok(())
}

/// Aligns sample `i` to sample `j`.
///
/// With `v_i, k_i, q_j: [HW, d′]`, returns `(a·v_i, a)` where
/// `a = softmax_rows(q_j·k_iᵀ/√d′)`: row `r` is the distribution of
/// query location `r` of `j` over the key locations of `i`.
pub fn align(g: &mut Graph, v_i: Var, k_i: Var, q_j: Var) -> Result<(Var, Var)> {
    let (sv, sk, sq) = (
        g.shape(v_i).to_vec(),
        g.shape(k_i).to_vec(),
        g.shape(q_j).to_vec(),
    );
    if sv.len() != 2 || sv != sk || sk != sq {
        return Err(contract(format!(
            "align needs matching [HW, d'] inputs, got {sv:?}, {sk:?}, {sq:?}"
        )));
    }
    let kt = g.transpose(k_i)?;
    let s = g.matmul(q_j, kt)?;
    let s = g.scale(s, 1.0 / (sq[1] as f64).sqrt());
    let a = g.softmax_rows(s)?;
    let v = g.matmul(a, v_i)?;
    Ok((v, a))
}

/// Spatial similarity of one pair from their per-sample attention inputs,
/// each `[HW, d′]` with unit value rows.
pub fn sim_spatial_pair(
    g: &mut Graph,
    (v_i, q_i, k_i): (Var, Var, Var),
    (v_j, q_j, k_j): (Var, Var, Var),
    cfg: &LossConfig,
) -> Result<Var> {
    let (mut v_ij, _) = align(g, v_i, k_i, q_j)?;
    let (mut v_ji, _) = align(g, v_j, k_j, q_i)?;
    if cfg.renormalize_aligned {
        v_ij = g.l2_normalize(v_ij, NORM_EPS)?;
        v_ji = g.l2_normalize(v_ji, NORM_EPS)?;
    }
    let a = g.mul(v_i, v_ji)?;
    let b = g.mul(v_j, v_ij)?;
    let per = g.add(a, b)?;
    let per = g.reduce(per, Reduction::Sum, 1)?;
    Ok(g.reduce(per, cfg.aggregation.reduction(), 0)?)
}

/// Spatial similarity of two spatial feature maps `[HW, d]` under `heads`.
pub fn sim_spatial(z_i: &Tensor, z_j: &Tensor, heads: &AuxHeads, cfg: &LossConfig) -> Result<f64> {
    if z_i.shape() != z_j.shape() || z_i.rank() != 2 {
        return Err(contract(format!(
            "spatial maps {:?} and {:?} differ",
            z_i.shape(),
            z_j.shape()
        )));
    }
    let mut g = Graph::new();
    let p = heads.store().bind(&mut g, false);
    let [hw, d] = [z_i.shape()[0], z_i.shape()[1]];
    let mut both = z_i.data().to_vec();
    both.extend_from_slice(z_j.data());
    let z = g.constant(Tensor::new(vec![2, hw, d], both).expect("two maps"));
    let att = heads.attention(&mut g, &p, z)?;
    let s = spatial_similarity(&mut g, &att, cfg)?;
    Ok(g.value(s).at(&[0, 1]))
}

/// Spatial similarity matrix `[B, B]` for every pair of a batch at once.
///
/// `T[j, r, i] = Σ_s a_{ij}[r, s] (v_j^r · v_i^s)` is the score of
/// location `r` of `j` against `i` aligned to `j`. The per-location pair
/// score is `T[i, r, j] + T[j, r, i]`, aggregated over `r`.
pub fn spatial_similarity(g: &mut Graph, att: &AttentionVars, cfg: &LossConfig) -> Result<Var> {
    let s = g.shape(att.value).to_vec();
    if s.len() != 3 || g.shape(att.query) != s.as_slice() || g.shape(att.key) != s.as_slice() {
        return Err(contract(format!(
            "attention inputs must share shape [B, HW, d'], got {s:?}"
        )));
    }
    let (b, hw, dh) = (s[0], s[1], s[2]);
    let v = g.reshape(att.value, &[b * hw, dh])?;
    let q = g.reshape(att.query, &[b * hw, dh])?;
    let k = g.reshape(att.key, &[b * hw, dh])?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = g.reshape(scores, &[b * hw * b, hw])?;
    let a = g.softmax_rows(scores)?;
    let t = if cfg.renormalize_aligned {
        // a: [j, r, i, s] -> [i, j·r, s], mixed with v_i: [i, s, d'].
        let a4 = g.reshape(a, &[b, hw, b, hw])?;
        let a4 = g.permute(a4, &[2, 0, 1, 3])?;
        let a3 = g.reshape(a4, &[b, b * hw, hw])?;
        let v3 = g.reshape(v, &[b, hw, dh])?;
        let mixed = g.bmm(a3, v3)?;
        let mixed = g.l2_normalize(mixed, NORM_EPS)?;
        let idx: Vec<usize> = (0..b).flat_map(|_| 0..b * hw).collect();
        let vj = g.select(v, &idx)?;
        let vj = g.reshape(vj, &[b, b * hw, dh])?;
        let dots = g.mul(mixed, vj)?;
        let dots = g.reduce(dots, Reduction::Sum, 2)?;
        let dots = g.reshape(dots, &[b, b, hw])?;
        g.permute(dots, &[1, 2, 0])?
    } else {
        let vt = g.transpose(v)?;
        let gram = g.matmul(v, vt)?;
        let gram = g.reshape(gram, &[b * hw * b, hw])?;
        let prod = g.mul(a, gram)?;
        let t = g.reduce(prod, Reduction::Sum, 1)?;
        g.reshape(t, &[b, hw, b])?
    };
    let tt = g.permute(t, &[2, 1, 0])?;
    let per = g.add(t, tt)?;
    Ok(g.reduce(per, cfg.aggregation.reduction(), 1)?)
}

/// Spatial contrastive loss over `batch.features: [2N, HW, d]`.
pub fn sc_loss(
    g: &mut Graph,
    heads: &AuxHeads,
    p: &Bound,
    batch: &ContrastBatch,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_rows(g, batch)?;
    let att = heads.attention(g, p, batch.features)?;
    let s = spatial_similarity(g, &att, cfg)?;
    let logits = g.scale(s, 1.0 / cfg.tau_prime);
    contrastive_from_logits(
        g,
        logits,
        &batch.effective_labels(cfg),
        cfg.anchor_normalization,
    )
}

/// `λ_CE·CE + λ_SC·SC + λ_GC·GC`. Terms with zero weight may be absent.
pub fn total_loss(
    g: &mut Graph,
    ce: Var,
    gc: Option<Var>,
    sc: Option<Var>,
    w: &ObjectiveWeights,
) -> Result<Var> {
    w.validate()?;
    let mut total = g.scale(ce, w.lambda_ce);
    for (name, term, lambda) in [("gc", gc, w.lambda_gc), ("sc", sc, w.lambda_sc)] {
        match term {
            Some(t) => {
                let t = g.scale(t, lambda);
                total = g.add(total, t)?;
            }
            None if lambda != 0.0 => {
                return Err(contract(format!(
                    "{name} weight is {lambda} but the term is missing"
                )))
            }
            None => {}
        }
    }
    Ok(total)
}

/// Row-wise softmax of `x / t` in plain arithmetic.
pub(crate) fn soft_targets(x: &Tensor, t: f64) -> Tensor {
    let c = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / t));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v / t - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// `T²` times the batch-mean `KL(softmax(teacher/T) ‖ softmax(student/T))`.
/// The teacher enters as a constant.
pub fn kl_distill(g: &mut Graph, student: Var, teacher: &Tensor, t: f64) -> Result<Var> {
    if t.is_nan() || t <= 0.0 {
        return Err(config(format!("temperature must be positive, got {t}")));
    }
    let s = g.shape(student).to_vec();
    if s.len() != 2 || s != teacher.shape() {
        return Err(contract(format!(
            "student logits {s:?} vs teacher {:?}",
            teacher.shape()
        )));
    }
    let targets = soft_targets(teacher, t);
    let entropy: f64 = targets
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let scaled = g.scale(student, 1.0 / t);
    let lse = g.reduce(scaled, Reduction::LogSumExp, 1)?;
    let lse = g.sum_all(lse)?;
    let pt = g.constant(targets);
    let cross = g.mul(scaled, pt)?;
    let cross = g.sum_all(cross)?;
    let kl = g.sub(lse, cross)?;
    let kl = g.add_scalar(kl, entropy);
    Ok(g.scale(kl, t * t / s[0] as f64))
}

/// Feature matching between normalised teacher and student features.
///
/// `α·mean_i ‖ẑ_t^g − ẑ_s^g‖² + β·mean_i Σ_r ‖ẑ_t^{s,r} − ẑ_s^{s,r}‖²`.
pub fn cd_loss(
    g: &mut Graph,
    teacher: &FeaturePack,
    student: FeatureVars,
    cfg: &DistillConfig,
) -> Result<Var> {
    cfg.validate()?;
    if g.shape(student.global) != teacher.global.shape()
        || g.shape(student.spatial) != teacher.spatial.shape()
    {
        return Err(contract(format!(
            "student features {:?}/{:?} vs teacher {:?}/{:?}",
            g.shape(student.global),
            g.shape(student.spatial),
            teacher.global.shape(),
            teacher.spatial.shape()
        )));
    }
    let b = teacher.batch() as f64;
    let mut total = g.constant(Tensor::scalar(0.0));
    for (weight, t, s) in [
        (cfg.alpha, &teacher.global, student.global),
        (cfg.beta, &teacher.spatial, student.spatial),
    ] {
        if weight == 0.0 {
            continue;
        }
        let tn = g.constant(t.clone());
        let tn = g.l2_normalize(tn, NORM_EPS)?;
        let sn = g.l2_normalize(s, NORM_EPS)?;
        let diff = g.sub(tn, sn)?;
        let sq = g.mul(diff, diff)?;
        let sq = g.sum_all(sq)?;
        let term = g.scale(sq, weight / b);
        total = g.add(total, term)?;
    }
    Ok(total)
}
