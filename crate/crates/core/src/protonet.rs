//! Episodic prototypical-network training with contrastive auxiliary losses.

use scl_autodiff::{collect_grads, Adam, Graph, Reduction, Tensor, Var};

use crate::data::{simclr_aug, stack, standard_aug, MetaDataset, Split};
use crate::error::{config, contract};
use crate::fewshot::{sample_episode, Episode, EpisodeSpec};
use crate::losses::{
    cross_entropy, gc_loss, sc_loss, total_loss, AnchorNorm, ContrastBatch, LossConfig,
    ObjectiveWeights,
};
use crate::model::{AuxHeads, Backbone, ModelConfig};
use crate::pretrain::StepLosses;
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ProtoConfig {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub n_episodes: usize,
    pub weights: ObjectiveWeights,
    pub loss_cfg: LossConfig,
    /// Adam step size.
    pub lr: f64,
    pub seed: u64,
}

impl ProtoConfig {
    /// 5-way 5-shot episodes with 16 queries per class.
    pub fn paper() -> Self {
        Self {
            ways: 5,
            shots: 5,
            queries: 16,
            n_episodes: 20_000,
            weights: ObjectiveWeights {
                lambda_ce: 1.0,
                lambda_gc: 0.5,
                lambda_sc: 0.5,
            },
            loss_cfg: LossConfig::default(),
            lr: 1e-3,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            queries: 6,
            n_episodes: 300,
            loss_cfg: LossConfig {
                anchor_normalization: AnchorNorm::Mean,
                ..LossConfig::default()
            },
            ..Self::paper()
        }
    }

    fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            ways: self.ways,
            shots: self.shots,
            queries: self.queries,
            n_episodes: self.n_episodes,
            n_runs: 1,
            support_aug_copies: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.episode_spec().validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config(format!("invalid learning rate {}", self.lr)));
        }
        self.weights.validate()?;
        self.loss_cfg.validate()
    }
}

/// Row-wise class means of `z` as `[C, d]`.
pub fn prototypes(g: &mut Graph, z: Var, labels: &[usize], classes: usize) -> Result<Var> {
    let n = g.shape(z)[0];
    if n != labels.len() {
        return Err(contract(format!(
            "{} labels for {n} support rows",
            labels.len()
        )));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        if y >= classes {
            return Err(contract(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(contract(format!("class {c} has no support examples")));
    }
    let mut avg = vec![0.0; classes * n];
    for (i, &y) in labels.iter().enumerate() {
        avg[y * n + i] = 1.0 / counts[y] as f64;
    }
    let a = g.constant(Tensor::new(vec![classes, n], avg)?);
    Ok(g.matmul(a, z)?)
}

/// `logit[q, c] = −‖z_q − p_c‖²`.
pub fn proto_logits(g: &mut Graph, queries: Var, protos: Var) -> Result<Var> {
    let (q, c) = (g.shape(queries)[0], g.shape(protos)[0]);
    let sq = |g: &mut Graph, x: Var| -> Result<Var> {
        let x2 = g.mul(x, x)?;
        let s = g.reduce(x2, Reduction::Sum, 1)?;
        let n = g.shape(s)[0];
        Ok(g.reshape(s, &[n, 1])?)
    };
    let zq2 = sq(g, queries)?;
    let pc2 = sq(g, protos)?;
    let ones_c = g.constant(Tensor::full(&[1, c], 1.0));
    let ones_q = g.constant(Tensor::full(&[q, 1], 1.0));
    let pc2_t = g.transpose(pc2)?;
    let a = g.matmul(zq2, ones_c)?;
    let b = g.matmul(ones_q, pc2_t)?;
    let pt = g.transpose(protos)?;
    let cross = g.matmul(queries, pt)?;
    let cross2 = g.scale(cross, 2.0);
    let ab = g.add(a, b)?;
    let d = g.sub(ab, cross2)?;
    Ok(g.neg(d))
}

/// Augmented views of an episode's support and query images, paired as in
/// pre-training, with labels in `0..C`.
pub fn episode_views(
    ds: &MetaDataset,
    ep: &Episode,
    seed: u64,
    index: u64,
) -> (Tensor, Vec<usize>) {
    let members: Vec<usize> = ep.support.iter().chain(&ep.query).copied().collect();
    let labels: Vec<usize> = ep
        .support_labels
        .iter()
        .chain(&ep.query_labels)
        .copied()
        .collect();
    let mut views = Vec::with_capacity(2 * members.len());
    for (k, &i) in members.iter().enumerate() {
        let img = ds.images[i].to_f64();
        views.push(standard_aug(
            &img,
            ds.shape,
            &mut stream(seed, "proto-aug-standard", &[index, k as u64]),
        ));
    }
    for (k, &i) in members.iter().enumerate() {
        let img = ds.images[i].to_f64();
        views.push(simclr_aug(
            &img,
            ds.shape,
            &mut stream(seed, "proto-aug-simclr", &[index, k as u64]),
        ));
    }
    let doubled = labels.iter().chain(&labels).copied().collect();
    (stack(&views, ds.shape), doubled)
}

/// One Adam update on episode number `index`.
pub fn episodic_train_step(
    (backbone, heads): (&mut Backbone, &mut AuxHeads),
    opt: &mut Adam,
    ds: &MetaDataset,
    ep: &Episode,
    index: u64,
    cfg: &ProtoConfig,
) -> Result<StepLosses> {
    let w = &cfg.weights;
    let ways = ep.classes.len();
    let mut g = Graph::new();
    let pb = backbone.store().bind(&mut g, true);
    let ph = heads.store().bind(&mut g, true);
    let originals: Vec<Vec<f64>> = ep
        .support
        .iter()
        .chain(&ep.query)
        .map(|&i| ds.images[i].to_f64())
        .collect();
    let x = g.constant(stack(&originals, ds.shape));
    let f = backbone.forward(&mut g, &pb, x)?;
    let (ns, nq) = (ep.support.len(), ep.query.len());
    let zs = g.select(f.global, &(0..ns).collect::<Vec<_>>())?;
    let zq = g.select(f.global, &(ns..ns + nq).collect::<Vec<_>>())?;
    let protos = prototypes(&mut g, zs, &ep.support_labels, ways)?;
    let logits = proto_logits(&mut g, zq, protos)?;
    let ce = cross_entropy(&mut g, logits, &ep.query_labels)?;
    let (gc, sc) = if w.lambda_gc > 0.0 || w.lambda_sc > 0.0 {
        let (views, labels) = episode_views(ds, ep, cfg.seed, index);
        let xv = g.constant(views);
        let fv = backbone.forward(&mut g, &pb, xv)?;
        let gc = if w.lambda_gc > 0.0 {
            let proj = heads.project(&mut g, &ph, fv.global)?;
            Some(gc_loss(
                &mut g,
                &ContrastBatch::new(proj, labels.clone()),
                &cfg.loss_cfg,
            )?)
        } else {
            None
        };
        let sc = if w.lambda_sc > 0.0 {
            Some(sc_loss(
                &mut g,
                heads,
                &ph,
                &ContrastBatch::new(fv.spatial, labels),
                &cfg.loss_cfg,
            )?)
        } else {
            None
        };
        (gc, sc)
    } else {
        (None, None)
    };
    let total = total_loss(&mut g, ce, gc, sc, w)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let out = StepLosses {
        ce: g.value(ce).item(),
        gc: val(gc),
        sc: val(sc),
        total: g.value(total).item(),
    };
    if !out.total.is_finite() {
        return Err(Error::Numeric(format!(
            "episode {index}: non-finite loss {out:?} (lr {})",
            opt.lr
        )));
    }
    let grads = g.backward(total)?;
    opt.step(collect_grads(
        [(backbone.store_mut(), &pb), (heads.store_mut(), &ph)],
        &grads,
    ));
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ProtoTrained {
    pub backbone: Backbone,
    pub heads: AuxHeads,
    /// Losses of every episode in order.
    pub history: Vec<StepLosses>,
}

/// Trains from a fresh initialisation on episodes drawn from the train split.
pub fn proto_train(
    ds: &MetaDataset,
    model: ModelConfig,
    cfg: &ProtoConfig,
) -> Result<ProtoTrained> {
    cfg.validate()?;
    let mut backbone = Backbone::new(model, &mut stream(cfg.seed, "init-backbone", &[]))?;
    let mut heads = AuxHeads::new(
        model.feature_dim,
        model.head_dim,
        &mut stream(cfg.seed, "init-heads", &[]),
    )?;
    let spec = cfg.episode_spec();
    let mut opt = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.n_episodes);
    for e in 0..cfg.n_episodes as u64 {
        let ep = sample_episode(
            ds,
            Split::Train,
            &spec,
            &mut stream(cfg.seed, "proto-episode", &[e]),
        )?;
        let l = episodic_train_step((&mut backbone, &mut heads), &mut opt, ds, &ep, e, cfg)?;
        if e % 50 == 0 {
            log::info!("episode {e} ce {:.4} gc {:.4} sc {:.4}", l.ce, l.gc, l.sc);
        }
        history.push(l);
    }
    Ok(ProtoTrained {
        backbone,
        heads,
        history,
    })
}
