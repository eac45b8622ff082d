mod common;

use common::{rand_mat, rng, to_tensor, Mat};
use rand::Rng;
use scl_core::autodiff::{Graph, Tensor};
use scl_core::data::{synth_generate, Split, SynthConfig};
use scl_core::fewshot::{sample_episode, EpisodeSpec};
use scl_core::losses::ObjectiveWeights;
use scl_core::model::ModelConfig;
use scl_core::protonet::*;
use scl_core::rng::stream;
use scl_core::Error;

fn eval_protos(z: &Mat, labels: &[usize], classes: usize) -> Result<Tensor, Error> {
    let mut g = Graph::new();
    let x = g.constant(to_tensor(z));
    let p = prototypes(&mut g, x, labels, classes)?;
    Ok(g.value(p).clone())
}

fn eval_logits(q: &Mat, p: &Mat) -> Tensor {
    let mut g = Graph::new();
    let (qv, pv) = (g.constant(to_tensor(q)), g.constant(to_tensor(p)));
    let l = proto_logits(&mut g, qv, pv).unwrap();
    g.value(l).clone()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_channels: 3,
        input_size: 8,
        feature_dim: 8,
        head_dim: 4,
        pool_target: 2,
        conv_channels: [8, 8],
    }
}

#[test]
fn prototypes_are_class_means() {
    let mut r = rng(1);
    let z = rand_mat(&mut r, 6, 4);
    let labels = [1, 0, 2, 1, 0, 2];
    let p = eval_protos(&z, &labels, 3).unwrap();
    for c in 0..3 {
        let members: Vec<&Vec<f64>> = z
            .iter()
            .zip(&labels)
            .filter(|(_, &y)| y == c)
            .map(|(v, _)| v)
            .collect();
        for j in 0..4 {
            let mean = members.iter().map(|v| v[j]).sum::<f64>() / members.len() as f64;
            assert!((p.at(&[c, j]) - mean).abs() <= 1e-14);
        }
    }
    let one_shot = eval_protos(&z[..3].to_vec(), &[2, 0, 1], 3).unwrap();
    assert_eq!(one_shot.row(0), z[1].as_slice());
    let same = eval_protos(&vec![z[0].clone(); 3], &[0, 0, 0], 1).unwrap();
    assert!(same
        .row(0)
        .iter()
        .zip(&z[0])
        .all(|(a, b)| (a - b).abs() <= 1e-15));
}

#[test]
fn prototypes_ignore_support_order() {
    let mut r = rng(2);
    let z = rand_mat(&mut r, 8, 3);
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let order = [5, 2, 7, 0, 3, 6, 1, 4];
    let shuffled: Mat = order.iter().map(|&i| z[i].clone()).collect();
    let shuffled_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    let a = eval_protos(&z, &labels, 4).unwrap();
    let b = eval_protos(&shuffled, &shuffled_labels, 4).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| (x - y).abs() <= 1e-14));
}

#[test]
fn missing_or_invalid_classes_are_rejected() {
    let z = rand_mat(&mut rng(3), 4, 2);
    assert!(matches!(
        eval_protos(&z, &[0, 0, 2, 2], 3),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        eval_protos(&z, &[0, 1, 3, 1], 2),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        eval_protos(&z, &[0, 1], 2),
        Err(Error::Contract(_))
    ));
}

#[test]
fn logits_are_negative_squared_distances() {
    let mut r = rng(4);
    let q = rand_mat(&mut r, 7, 5);
    let p = rand_mat(&mut r, 3, 5);
    let l = eval_logits(&q, &p);
    for (i, qi) in q.iter().enumerate() {
        for (c, pc) in p.iter().enumerate() {
            let d: f64 = qi.iter().zip(pc).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((l.at(&[i, c]) + d).abs() <= 1e-12);
        }
    }
}

#[test]
fn logits_ignore_common_translation() {
    let mut r = rng(5);
    let q = rand_mat(&mut r, 4, 3);
    let p = rand_mat(&mut r, 5, 3);
    let t: Vec<f64> = (0..3).map(|_| r.random_range(-5.0..5.0)).collect();
    let shift = |m: &Mat| -> Mat {
        m.iter()
            .map(|v| v.iter().zip(&t).map(|(a, b)| a + b).collect())
            .collect()
    };
    let a = eval_logits(&q, &p);
    let b = eval_logits(&shift(&q), &shift(&p));
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| (x - y).abs() <= 1e-9));
}

#[test]
fn nearest_and_equidistant_queries() {
    let p: Mat = vec![
        vec![1.0, 0.0],
        vec![0.0, 1.0],
        vec![-1.0, 0.0],
        vec![0.0, -1.0],
    ];
    let l = eval_logits(&vec![p[2].clone(), vec![0.0, 0.0]], &p);
    let best = (0..4)
        .max_by(|&a, &b| l.at(&[0, a]).total_cmp(&l.at(&[0, b])))
        .unwrap();
    assert_eq!(best, 2);
    assert_eq!(l.at(&[0, 2]), 0.0);
    assert!((0..4).all(|c| l.at(&[1, c]) == -1.0));
}

#[test]
fn views_cover_support_and_query_twice() {
    let ds = synth_generate(&SynthConfig::new(15, 8, 8, 5)).unwrap();
    let spec = EpisodeSpec {
        ways: 3,
        shots: 2,
        queries: 4,
        n_episodes: 1,
        n_runs: 1,
        support_aug_copies: 0,
    };
    let ep = sample_episode(&ds, Split::Train, &spec, &mut stream(0, "ep", &[])).unwrap();
    let (views, labels) = episode_views(&ds, &ep, 0, 0);
    assert_eq!(views.shape(), &[2 * 3 * (2 + 4), 3, 8, 8]);
    assert_eq!(labels.len(), 36);
    assert_eq!(labels[..18], labels[18..]);
    assert_eq!(&labels[..6], ep.support_labels.as_slice());
    assert_eq!(views, episode_views(&ds, &ep, 0, 0).0);
    assert_ne!(views, episode_views(&ds, &ep, 0, 1).0);
}

#[test]
fn fresh_network_starts_near_uniform() {
    let ds = synth_generate(&SynthConfig::new(15, 12, 8, 5)).unwrap();
    let cfg = ProtoConfig {
        n_episodes: 1,
        queries: 4,
        shots: 2,
        ..ProtoConfig::desk()
    };
    let t = proto_train(&ds, tiny_model(), &cfg).unwrap();
    let ce = t.history[0].ce;
    assert!((ce - 5f64.ln()).abs() <= 0.1 * 5f64.ln(), "{ce}");
    assert!(t.history[0].gc > 0.0 && t.history[0].sc > 0.0);
}

#[test]
fn episodic_training_reduces_loss() {
    let ds = synth_generate(&SynthConfig::new(15, 12, 8, 5)).unwrap();
    let cfg = ProtoConfig {
        n_episodes: 60,
        queries: 4,
        shots: 2,
        ..ProtoConfig::desk()
    };
    let t = proto_train(&ds, tiny_model(), &cfg).unwrap();
    let avg = |s: &[scl_core::pretrain::StepLosses]| {
        s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64
    };
    let (first, last) = (avg(&t.history[..10]), avg(&t.history[50..]));
    assert!(last < first, "{first} -> {last}");
    let again = proto_train(&ds, tiny_model(), &cfg).unwrap();
    assert_eq!(again.backbone, t.backbone);
}

#[test]
fn supervised_only_skips_contrastive_terms() {
    let ds = synth_generate(&SynthConfig::new(15, 12, 8, 5)).unwrap();
    let cfg = ProtoConfig {
        n_episodes: 2,
        queries: 4,
        shots: 1,
        weights: ObjectiveWeights {
            lambda_ce: 1.0,
            lambda_gc: 0.0,
            lambda_sc: 0.0,
        },
        ..ProtoConfig::desk()
    };
    let t = proto_train(&ds, tiny_model(), &cfg).unwrap();
    assert!(t
        .history
        .iter()
        .all(|l| l.gc == 0.0 && l.sc == 0.0 && l.total == l.ce));
    assert!(proto_train(&ds, tiny_model(), &ProtoConfig { ways: 1, ..cfg }).is_err());
}
