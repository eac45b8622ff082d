//! A small full model whose every parameter can be finite-difference checked.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scl_core::autodiff::{AdError, Bound, GradCheck, GradCheckReport, Graph, Tensor, Var};
use scl_core::losses::{
    cd_loss, cross_entropy, gc_loss, kl_distill, sc_loss, total_loss, Aggregation, ContrastBatch,
    DistillConfig, LossConfig, ObjectiveWeights,
};
use scl_core::model::{AuxHeads, Backbone, FeaturePack, LinearHead, ModelConfig};
use scl_core::rng::stream;

pub fn config() -> ModelConfig {
    ModelConfig {
        input_channels: 3,
        input_size: 16,
        feature_dim: 12,
        head_dim: 4,
        pool_target: 3,
        conv_channels: [4, 8],
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Ce,
    Gc,
    Sc(Aggregation),
    Total,
    Kl,
    Cd { alpha: f64, beta: f64 },
}

impl Target {
    pub fn all() -> Vec<Target> {
        let mut v = vec![Target::Ce, Target::Gc];
        v.extend(Aggregation::ALL.into_iter().map(Target::Sc));
        v.extend([
            Target::Total,
            Target::Kl,
            Target::Cd {
                alpha: 1.0,
                beta: 0.0,
            },
            Target::Cd {
                alpha: 1.0,
                beta: 1.0,
            },
        ]);
        v
    }
}

pub struct Rig {
    pub backbone: Backbone,
    pub heads: AuxHeads,
    pub classifier: LinearHead,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub teacher: (FeaturePack, Tensor),
    /// Parameter values to check, biases replaced by values in `[0.1, 0.5]`.
    pub params: Vec<Tensor>,
}

pub fn to_ad(e: scl_core::Error) -> AdError {
    match e {
        scl_core::Error::Autodiff(a) => a,
        other => AdError::Domain(other.to_string()),
    }
}

impl Rig {
    pub fn new(seed: u64) -> Self {
        let cfg = config();
        let backbone = Backbone::new(cfg, &mut stream(seed, "rig-backbone", &[])).unwrap();
        let heads = AuxHeads::new(
            cfg.feature_dim,
            cfg.head_dim,
            &mut stream(seed, "rig-heads", &[]),
        )
        .unwrap();
        let classifier =
            LinearHead::new(cfg.feature_dim, 3, &mut stream(seed, "rig-classifier", &[]));
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = 4 * 3 * 16 * 16;
        let images = Tensor::new(
            vec![4, 3, 16, 16],
            (0..n).map(|_| r.random::<f64>()).collect(),
        )
        .unwrap();
        let params = backbone
            .store()
            .iter()
            .chain(heads.store().iter())
            .chain(classifier.store().iter())
            .map(|p| {
                if p.value.rank() == 1 {
                    let v = (0..p.value.numel())
                        .map(|_| r.random_range(0.1..0.5))
                        .collect();
                    Tensor::new(p.value.shape().to_vec(), v).unwrap()
                } else {
                    p.value.clone()
                }
            })
            .collect();
        let teacher_net = Backbone::new(cfg, &mut stream(seed, "rig-teacher", &[])).unwrap();
        let pack = teacher_net.embed(&images).unwrap();
        let t_logits = Tensor::new(
            vec![4, 3],
            (0..12).map(|_| 3.0 * r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        Self {
            backbone,
            heads,
            classifier,
            images,
            labels: vec![0, 1, 0, 1],
            teacher: (pack, t_logits),
            params,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|t| t.numel()).sum()
    }

    fn bounds(&self, xs: &[Var]) -> (Bound, Bound, Bound) {
        let nb = self.backbone.store().len();
        let nh = self.heads.store().len();
        (
            Bound::from_vars(xs[..nb].to_vec()),
            Bound::from_vars(xs[nb..nb + nh].to_vec()),
            Bound::from_vars(xs[nb + nh..].to_vec()),
        )
    }

    pub fn loss(&self, g: &mut Graph, xs: &[Var], target: Target) -> Result<Var, AdError> {
        let (pb, ph, pc) = self.bounds(xs);
        let x = g.constant(self.images.clone());
        let f = self.backbone.forward(g, &pb, x).map_err(to_ad)?;
        let lc = LossConfig {
            tau: 0.5,
            tau_prime: 0.5,
            ..LossConfig::default()
        };
        let ce = |g: &mut Graph| -> Result<Var, AdError> {
            let logits = self.classifier.logits(g, &pc, f.global).map_err(to_ad)?;
            cross_entropy(g, logits, &self.labels).map_err(to_ad)
        };
        let gc = |g: &mut Graph| -> Result<Var, AdError> {
            let proj = self.heads.project(g, &ph, f.global).map_err(to_ad)?;
            gc_loss(g, &ContrastBatch::new(proj, self.labels.clone()), &lc).map_err(to_ad)
        };
        let sc = |g: &mut Graph, agg: Aggregation| -> Result<Var, AdError> {
            let cfg = LossConfig {
                aggregation: agg,
                ..lc
            };
            sc_loss(
                g,
                &self.heads,
                &ph,
                &ContrastBatch::new(f.spatial, self.labels.clone()),
                &cfg,
            )
            .map_err(to_ad)
        };
        match target {
            Target::Ce => ce(g),
            Target::Gc => gc(g),
            Target::Sc(agg) => sc(g, agg),
            Target::Total => {
                let (c, gl, s) = (ce(g)?, gc(g)?, sc(g, Aggregation::Mean)?);
                let w = ObjectiveWeights {
                    lambda_ce: 1.0,
                    lambda_gc: 0.7,
                    lambda_sc: 0.3,
                };
                total_loss(g, c, Some(gl), Some(s), &w).map_err(to_ad)
            }
            Target::Kl => {
                let logits = self.classifier.logits(g, &pc, f.global).map_err(to_ad)?;
                kl_distill(g, logits, &self.teacher.1, 4.0).map_err(to_ad)
            }
            Target::Cd { alpha, beta } => {
                let cfg = DistillConfig {
                    alpha,
                    beta,
                    ..DistillConfig::default()
                };
                cd_loss(g, &self.teacher.0, f, &cfg).map_err(to_ad)
            }
        }
    }

    pub fn check(&self, target: Target) -> GradCheckReport {
        GradCheck::default()
            .run(&self.params, |g, xs| self.loss(g, xs, target))
            .unwrap()
    }
}
