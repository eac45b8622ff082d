//! Pre-training on the merged meta-train set and teacher-student
//! distillation.

use rand::seq::index::sample;
use scl_autodiff::{collect_grads, Graph, Sgd, Tensor, Var};

use crate::data::{simclr_aug, stack, standard_aug, MergedDataset};
use crate::error::{config, contract};
use crate::losses::{
    cd_loss, cross_entropy, gc_loss, kl_distill, sc_loss, total_loss, AnchorNorm, ContrastBatch,
    DistillConfig, LossConfig, ObjectiveWeights,
};
use crate::model::{AuxHeads, Backbone, FeaturePack, LinearHead, ModelConfig};
use crate::rng::stream;
use crate::{Error, Result};

/// The pre-training objectives that can be selected by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Ce,
    CeGc,
    CeSc,
    CeGcSc,
    CeSsGc,
    CeSsSc,
}

impl Objective {
    pub const ALL: [Objective; 6] = [
        Self::Ce,
        Self::CeGc,
        Self::CeSc,
        Self::CeGcSc,
        Self::CeSsGc,
        Self::CeSsSc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ce => "ce",
            Self::CeGc => "ce+gc",
            Self::CeSc => "ce+sc",
            Self::CeGcSc => "ce+gc+sc",
            Self::CeSsGc => "ce+ssgc",
            Self::CeSsSc => "ce+sssc",
        }
    }

    /// Weights for this objective with contrastive terms scaled by `lambda`.
    pub fn weights(self, lambda: f64) -> ObjectiveWeights {
        let (gc, sc) = match self {
            Self::Ce => (0.0, 0.0),
            Self::CeGc | Self::CeSsGc => (lambda, 0.0),
            Self::CeSc | Self::CeSsSc => (0.0, lambda),
            Self::CeGcSc => (lambda, lambda),
        };
        ObjectiveWeights {
            lambda_ce: 1.0,
            lambda_gc: gc,
            lambda_sc: sc,
        }
    }

    pub fn supervised(self) -> bool {
        !matches!(self, Self::CeSsGc | Self::CeSsSc)
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| config(format!("unknown objective {s:?}; expected one of ce, ce+gc, ce+sc, ce+gc+sc, ce+ssgc, ce+sssc")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `N`; each step sees `2N` views.
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs (0-based) at whose start the learning rate is multiplied by 0.1.
    pub decay_epochs: Vec<usize>,
    pub weights: ObjectiveWeights,
    pub loss_cfg: LossConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// 30 epochs on the desk-scale synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            lr: 5e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            epochs: 30,
            decay_epochs: vec![20, 26],
            weights: ObjectiveWeights::default(),
            loss_cfg: LossConfig {
                anchor_normalization: AnchorNorm::Mean,
                ..LossConfig::default()
            },
            seed: 0,
        }
    }

    /// The mini-ImageNet schedule.
    pub fn paper_mini() -> Self {
        Self {
            epochs: 90,
            decay_epochs: vec![60, 80],
            loss_cfg: LossConfig::default(),
            ..Self::desk()
        }
    }

    /// The CIFAR-FS schedule, with contrastive weights halved.
    pub fn paper_cifar() -> Self {
        Self {
            epochs: 90,
            decay_epochs: vec![45, 60, 75],
            weights: ObjectiveWeights {
                lambda_ce: 1.0,
                lambda_sc: 0.5,
                lambda_gc: 0.5,
            },
            loss_cfg: LossConfig::default(),
            ..Self::desk()
        }
    }

    /// The desk schedule at the distillation learning rate.
    pub fn desk_distill() -> Self {
        Self {
            lr: 1e-2,
            ..Self::desk()
        }
    }

    pub fn with_objective(mut self, objective: Objective, lambda: f64) -> Self {
        self.weights = objective.weights(lambda);
        self.loss_cfg.supervised = objective.supervised();
        self
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * 0.1f64.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0
            && self.momentum >= 0.0
            && self.momentum < 1.0
            && self.weight_decay >= 0.0)
        {
            return Err(config(
                "need lr >= 0, 0 <= momentum < 1 and weight_decay >= 0",
            ));
        }
        if self.batch_size == 0 {
            return Err(config("batch size must be positive"));
        }
        self.weights.validate()?;
        self.loss_cfg.validate()
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub gc: f64,
    pub sc: f64,
    pub kl: f64,
    pub cd: f64,
    pub total: f64,
}

/// `2N` augmented views: rows `i` and `i + N` come from `sources[i]`.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub sources: Vec<usize>,
}

fn steps_per_epoch(len: usize, n: usize) -> usize {
    len.div_ceil(n)
}

/// Draws `n` distinct images for step `step` and returns their standard
/// views followed by their SimCLR views.
pub fn make_train_batch(
    merged: &MergedDataset,
    n: usize,
    seed: u64,
    step: u64,
) -> Result<TrainBatch> {
    if n == 0 || n > merged.len() {
        return Err(config(format!(
            "batch size {n} for {} images",
            merged.len()
        )));
    }
    let picks = sample(&mut stream(seed, "batch", &[step]), merged.len(), n).into_vec();
    let mut views = Vec::with_capacity(2 * n);
    for (k, &i) in picks.iter().enumerate() {
        let img = merged.images[i].to_f64();
        views.push(standard_aug(
            &img,
            merged.shape,
            &mut stream(seed, "aug-standard", &[step, k as u64]),
        ));
    }
    for (k, &i) in picks.iter().enumerate() {
        let img = merged.images[i].to_f64();
        views.push(simclr_aug(
            &img,
            merged.shape,
            &mut stream(seed, "aug-simclr", &[step, k as u64]),
        ));
    }
    let labels: Vec<usize> = picks
        .iter()
        .chain(&picks)
        .map(|&i| merged.images[i].label)
        .collect();
    let sources = picks.iter().chain(&picks).copied().collect();
    Ok(TrainBatch {
        images: stack(&views, merged.shape),
        labels,
        sources,
    })
}

/// Everything produced by one pre-training run.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub backbone: Backbone,
    pub heads: AuxHeads,
    pub classifier: LinearHead,
    pub history: Vec<EpochStats>,
}

/// Initial parameters for a run: backbone, heads and CE head.
pub fn init_model(
    model: ModelConfig,
    n_classes: usize,
    seed: u64,
) -> Result<(Backbone, AuxHeads, LinearHead)> {
    let backbone = Backbone::new(model, &mut stream(seed, "init-backbone", &[]))?;
    let heads = AuxHeads::new(
        model.feature_dim,
        model.head_dim,
        &mut stream(seed, "init-heads", &[]),
    )?;
    let classifier = LinearHead::new(
        model.feature_dim,
        n_classes,
        &mut stream(seed, "init-classifier", &[]),
    );
    Ok((backbone, heads, classifier))
}

/// Loss values of one step; unused terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub ce: f64,
    pub gc: f64,
    pub sc: f64,
    pub total: f64,
}

/// One optimisation step on `batch`.
pub fn train_step(
    (backbone, heads, classifier): (&mut Backbone, &mut AuxHeads, &mut LinearHead),
    opt: &mut Sgd,
    batch: &TrainBatch,
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let w = &cfg.weights;
    let mut g = Graph::new();
    let pb = backbone.store().bind(&mut g, true);
    let ph = heads.store().bind(&mut g, true);
    let pc = classifier.store().bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let f = backbone.forward(&mut g, &pb, x)?;
    let logits = classifier.logits(&mut g, &pc, f.global)?;
    let ce = cross_entropy(&mut g, logits, &batch.labels)?;
    let gc = if w.lambda_gc > 0.0 {
        let proj = heads.project(&mut g, &ph, f.global)?;
        Some(gc_loss(
            &mut g,
            &ContrastBatch::new(proj, batch.labels.clone()),
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
            &ContrastBatch::new(f.spatial, batch.labels.clone()),
            &cfg.loss_cfg,
        )?)
    } else {
        None
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
            "non-finite loss {:?} (lr {})",
            out, opt.lr
        )));
    }
    let grads = g.backward(total)?;
    opt.step(collect_grads(
        [
            (backbone.store_mut(), &pb),
            (heads.store_mut(), &ph),
            (classifier.store_mut(), &pc),
        ],
        &grads,
    ));
    Ok(out)
}

/// Minimises the weighted objective with SGD and step decay.
pub fn pretrain(
    merged: &MergedDataset,
    model: ModelConfig,
    cfg: &TrainConfig,
) -> Result<Pretrained> {
    cfg.validate()?;
    let (mut backbone, mut heads, mut classifier) =
        init_model(model, merged.n_classes(), cfg.seed)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let steps = steps_per_epoch(merged.len(), cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        let mut stats = EpochStats {
            epoch,
            lr: opt.lr,
            ..EpochStats::default()
        };
        for s in 0..steps {
            let step = (epoch * steps + s) as u64;
            let batch = make_train_batch(merged, cfg.batch_size, cfg.seed, step)?;
            let l = train_step(
                (&mut backbone, &mut heads, &mut classifier),
                &mut opt,
                &batch,
                cfg,
            )
            .map_err(|e| annotate(e, epoch))?;
            stats.ce += l.ce / steps as f64;
            stats.gc += l.gc / steps as f64;
            stats.sc += l.sc / steps as f64;
            stats.total += l.total / steps as f64;
        }
        log::info!(
            "epoch {epoch} lr {:.1e} ce {:.4} gc {:.4} sc {:.4}",
            stats.lr,
            stats.ce,
            stats.gc,
            stats.sc
        );
        history.push(stats);
    }
    Ok(Pretrained {
        backbone,
        heads,
        classifier,
        history,
    })
}

fn annotate(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

/// How the student starts out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudentInit {
    Fresh,
    /// A copy of the teacher, including its CE head.
    CopyTeacher,
}

#[derive(Clone, Debug)]
pub struct DistillOptions {
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub generations: usize,
    pub init: StudentInit,
}

#[derive(Clone, Debug)]
pub struct Distilled {
    pub backbone: Backbone,
    pub classifier: LinearHead,
    /// One history per generation.
    pub history: Vec<Vec<EpochStats>>,
    /// Mean teacher-student distance of normalised global features before
    /// and after the last generation.
    pub distance_before: f64,
    pub distance_after: f64,
}

/// `N` standard views for distillation step `step`.
fn distill_batch(merged: &MergedDataset, n: usize, seed: u64, step: u64) -> Result<Tensor> {
    if n == 0 || n > merged.len() {
        return Err(config(format!(
            "batch size {n} for {} images",
            merged.len()
        )));
    }
    let picks = sample(&mut stream(seed, "distill-batch", &[step]), merged.len(), n).into_vec();
    let views: Vec<Vec<f64>> = picks
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            standard_aug(
                &merged.images[i].to_f64(),
                merged.shape,
                &mut stream(seed, "distill-aug", &[step, k as u64]),
            )
        })
        .collect();
    Ok(stack(&views, merged.shape))
}

fn teacher_outputs(
    backbone: &Backbone,
    head: &LinearHead,
    images: &Tensor,
) -> Result<(FeaturePack, Tensor)> {
    let mut g = Graph::new();
    let pb = backbone.store().bind(&mut g, false);
    let pc = head.store().bind(&mut g, false);
    let x = g.constant(images.clone());
    let f = backbone.forward(&mut g, &pb, x)?;
    let logits = head.logits(&mut g, &pc, f.global)?;
    Ok((
        FeaturePack {
            spatial: g.value(f.spatial).clone(),
            global: g.value(f.global).clone(),
        },
        g.value(logits).clone(),
    ))
}

/// Mean Euclidean distance between the normalised global features of two
/// networks over `images`.
pub fn feature_distance(a: &Backbone, b: &Backbone, images: &Tensor) -> Result<f64> {
    let (fa, fb) = (a.embed(images)?, b.embed(images)?);
    let d = fa.global.shape()[1];
    let unit = |r: &[f64]| {
        let n = r
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(scl_autodiff::NORM_EPS);
        r.iter().map(|v| v / n).collect::<Vec<_>>()
    };
    let rows = fa.global.shape()[0];
    let mut total = 0.0;
    for (ra, rb) in fa.global.data().chunks(d).zip(fb.global.data().chunks(d)) {
        let (ua, ub) = (unit(ra), unit(rb));
        total += ua
            .iter()
            .zip(&ub)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / rows as f64)
}

/// Every merged image, unaugmented.
pub fn reference_images(merged: &MergedDataset) -> Tensor {
    let views: Vec<Vec<f64>> = merged.images.iter().map(|i| i.to_f64()).collect();
    stack(&views, merged.shape)
}

/// Losses of one distillation step as `(kl, cd, total)`.
pub fn distill_step(
    student: (&mut Backbone, &mut LinearHead),
    teacher: (&Backbone, &LinearHead),
    opt: &mut Sgd,
    images: &Tensor,
    cfg: &DistillConfig,
) -> Result<(f64, f64, f64)> {
    let (backbone, head) = student;
    let (t_pack, t_logits) = teacher_outputs(teacher.0, teacher.1, images)?;
    let mut g = Graph::new();
    let pb = backbone.store().bind(&mut g, true);
    let pc = head.store().bind(&mut g, true);
    let x = g.constant(images.clone());
    let f = backbone.forward(&mut g, &pb, x)?;
    let logits = head.logits(&mut g, &pc, f.global)?;
    let kl = kl_distill(&mut g, logits, &t_logits, cfg.kl_temperature)?;
    let cd = cd_loss(&mut g, &t_pack, f, cfg)?;
    let a = g.scale(kl, cfg.lambda_kl);
    let b = g.scale(cd, cfg.lambda_cd);
    let total = g.add(a, b)?;
    let out = (
        g.value(kl).item(),
        g.value(cd).item(),
        g.value(total).item(),
    );
    if !out.2.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite distillation loss {out:?} (lr {})",
            opt.lr
        )));
    }
    let grads = g.backward(total)?;
    opt.step(collect_grads(
        [(backbone.store_mut(), &pb), (head.store_mut(), &pc)],
        &grads,
    ));
    Ok(out)
}

/// Trains `generations` students in sequence, each distilled from the
/// previous network.
pub fn distill(
    teacher: (&Backbone, &LinearHead),
    student_model: ModelConfig,
    merged: &MergedDataset,
    opts: &DistillOptions,
) -> Result<Distilled> {
    opts.train.validate()?;
    opts.distill.validate()?;
    if opts.generations == 0 {
        return Err(config("generations must be at least 1"));
    }
    if student_model != *teacher.0.config() {
        return Err(contract(format!(
            "student {student_model:?} does not match teacher {:?}",
            teacher.0.config()
        )));
    }
    if teacher.1.feature_dim() != student_model.feature_dim {
        return Err(contract("teacher classifier does not match its backbone"));
    }
    let reference = reference_images(merged);
    let cfg = &opts.train;
    let steps = steps_per_epoch(merged.len(), cfg.batch_size);
    let (mut t_backbone, mut t_head) = (teacher.0.clone(), teacher.1.clone());
    let mut history = Vec::new();
    let mut before = 0.0;
    let mut last: Option<(Backbone, LinearHead)> = None;
    for generation in 0..opts.generations {
        if let Some((b, h)) = last.take() {
            t_backbone = b;
            t_head = h;
        }
        let seed = cfg.seed.wrapping_add(generation as u64);
        let (mut backbone, mut head) = match opts.init {
            StudentInit::CopyTeacher => (t_backbone.clone(), t_head.clone()),
            StudentInit::Fresh => {
                let (b, _, h) = init_model(student_model, t_head.classes(), seed)?;
                (b, h)
            }
        };
        before = feature_distance(&t_backbone, &backbone, &reference)?;
        let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
        let mut gen_history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            opt.lr = cfg.lr_at(epoch);
            let mut stats = EpochStats {
                epoch,
                lr: opt.lr,
                ..EpochStats::default()
            };
            for s in 0..steps {
                let images =
                    distill_batch(merged, cfg.batch_size, seed, (epoch * steps + s) as u64)?;
                let (kl, cd, total) = distill_step(
                    (&mut backbone, &mut head),
                    (&t_backbone, &t_head),
                    &mut opt,
                    &images,
                    &opts.distill,
                )
                .map_err(|e| annotate(e, epoch))?;
                stats.kl += kl / steps as f64;
                stats.cd += cd / steps as f64;
                stats.total += total / steps as f64;
            }
            log::info!(
                "generation {generation} epoch {epoch} kl {:.4} cd {:.4}",
                stats.kl,
                stats.cd
            );
            gen_history.push(stats);
        }
        history.push(gen_history);
        last = Some((backbone, head));
    }
    let (backbone, classifier) = last.expect("at least one generation");
    let distance_after = feature_distance(&t_backbone, &backbone, &reference)?;
    Ok(Distilled {
        backbone,
        classifier,
        history,
        distance_before: before,
        distance_after,
    })
}
