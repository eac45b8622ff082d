mod harness;

use harness::{Rig, Target};
use scl_core::autodiff::{Graph, Tensor};
use scl_core::checkpoint::Checkpoint;
use scl_core::kv::KvMap;
use scl_core::model::{Backbone, LinearHead, ModelConfig};
use scl_core::rng::stream;
use scl_core::Error;

fn images(b: usize, side: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = stream(seed, "images", &[]);
    let n = b * 3 * side * side;
    Tensor::new(
        vec![b, 3, side, side],
        (0..n).map(|_| r.random::<f64>()).collect(),
    )
    .unwrap()
}

#[test]
fn rig_is_small() {
    let rig = Rig::new(0);
    assert!(rig.num_params() < 5000, "{}", rig.num_params());
    assert_eq!(rig.backbone.config().locations(), 4);
}

#[test]
fn ce_gradient_through_backbone() {
    let rep = Rig::new(1).check(Target::Ce);
    assert!(rep.max_rel_err <= 1e-4, "{rep:?}");
}

#[test]
fn large_maps_are_pooled_to_target() {
    let cfg = ModelConfig {
        input_size: 32,
        ..harness::config()
    };
    assert_eq!(cfg.conv_side(), 4);
    assert_eq!(cfg.spatial_side(), 3);
    let net = Backbone::new(cfg, &mut stream(0, "net", &[])).unwrap();
    let f = net.embed(&images(2, 32, 1)).unwrap();
    assert_eq!(f.spatial.shape(), &[2, 9, 12]);
    for b in 0..2 {
        for c in 0..12 {
            let mean = (0..9).map(|l| f.spatial.at(&[b, l, c])).sum::<f64>() / 9.0;
            assert!((mean - f.global.at(&[b, c])).abs() <= 1e-12);
        }
    }
}

#[test]
fn embedding_is_batch_equivariant() {
    let net = Backbone::new(harness::config(), &mut stream(3, "net", &[])).unwrap();
    let x = images(3, 16, 2);
    let per = 3 * 16 * 16;
    let mut swapped = x.data()[2 * per..].to_vec();
    swapped.extend_from_slice(&x.data()[..2 * per]);
    let y = Tensor::new(x.shape().to_vec(), swapped).unwrap();
    let (a, b) = (net.embed(&x).unwrap(), net.embed(&y).unwrap());
    for (i, j) in [(0, 1), (1, 2), (2, 0)] {
        for c in 0..12 {
            assert!((a.global.at(&[i, c]) - b.global.at(&[j, c])).abs() < 1e-12);
        }
    }
}

#[test]
fn initialisation_is_seeded() {
    let a = Backbone::new(ModelConfig::desk(), &mut stream(5, "net", &[])).unwrap();
    let b = Backbone::new(ModelConfig::desk(), &mut stream(5, "net", &[])).unwrap();
    let c = Backbone::new(ModelConfig::desk(), &mut stream(6, "net", &[])).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a
        .store()
        .iter()
        .filter(|p| p.name.ends_with("bias"))
        .all(|p| p.value.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn heads_attention_is_deterministic() {
    let rig = Rig::new(4);
    let f = rig.backbone.embed(&rig.images).unwrap();
    let run = || {
        let mut g = Graph::new();
        let p = rig.heads.store().bind(&mut g, false);
        let z = g.constant(f.spatial.clone());
        let a = rig.heads.attention(&mut g, &p, z).unwrap();
        g.value(a.value).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_file_round_trip() {
    let net = Backbone::new(harness::config(), &mut stream(7, "net", &[])).unwrap();
    let head = LinearHead::new(12, 5, &mut stream(7, "head", &[]));
    let mut manifest = KvMap::new();
    manifest.set("objective", "ce+sc");
    let ck = Checkpoint {
        backbone: net,
        classifier: Some(head),
        manifest,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sclk");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.backbone, ck.backbone);
    assert_eq!(back.classifier, ck.classifier);
    assert_eq!(back.manifest.get("objective"), Some("ce+sc"));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::Format { .. })
    ));
}
