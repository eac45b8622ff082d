//! Procedural stand-in for a few-shot image benchmark.
//!
//! Class `c` fixes a pattern family, an orientation and a spatial
//! frequency. Each image draws its own phase, small pose changes, colour,
//! background, a class-independent blob and pixel noise.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ImageShape, LabeledImage, MetaDataset};
use crate::error::config;
use crate::kv::KvMap;
use crate::rng::{stream, Stream};
use crate::Result;

const ORIENTATIONS: usize = 6;
const FREQUENCIES: [f64; 4] = [1.5, 2.25, 3.0, 3.75];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Scale of per-image nuisance variation; 0 makes a class's images identical
    /// up to noise.
    pub jitter: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl SynthConfig {
    /// A third of the classes become test classes, the rest train.
    pub fn new(n_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Self {
        let n_test = n_classes / 3;
        Self {
            n_classes,
            per_class,
            image_size,
            channels: 3,
            seed,
            noise: 0.08,
            jitter: 1.0,
            n_train: n_classes - n_test,
            n_val: 0,
            n_test,
        }
    }

    pub fn clean(mut self) -> Self {
        self.noise = 0.0;
        self.jitter = 0.0;
        self
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("generator", "synth");
        m.set("n_classes", self.n_classes);
        m.set("per_class", self.per_class);
        m.set("image_size", self.image_size);
        m.set("channels", self.channels);
        m.set("seed", self.seed);
        m.set("noise", self.noise);
        m.set("jitter", self.jitter);
        m.set("n_train", self.n_train);
        m.set("n_val", self.n_val);
        m.set("n_test", self.n_test);
        m
    }

    fn validate(&self) -> Result<()> {
        if self.n_classes < 10 {
            return Err(config(format!(
                "need at least 10 classes, got {}",
                self.n_classes
            )));
        }
        if self.per_class < 2 {
            return Err(config(format!(
                "need at least 2 images per class, got {}",
                self.per_class
            )));
        }
        if self.image_size < 4 || self.channels == 0 {
            return Err(config(
                "images must be at least 4 pixels wide with one channel",
            ));
        }
        if self.n_train + self.n_val + self.n_test != self.n_classes
            || self.n_train == 0
            || self.n_test == 0
        {
            return Err(config(format!(
                "split {}/{}/{} does not partition {} classes",
                self.n_train, self.n_val, self.n_test, self.n_classes
            )));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0) {
            return Err(config("noise and jitter must be nonnegative"));
        }
        Ok(())
    }
}

struct ClassPattern {
    family: usize,
    theta: f64,
    freq: f64,
}

impl ClassPattern {
    fn of(c: usize) -> Self {
        Self {
            family: (c / (ORIENTATIONS * FREQUENCIES.len())) % 3,
            theta: (c % ORIENTATIONS) as f64 * PI / ORIENTATIONS as f64,
            freq: FREQUENCIES[(c / ORIENTATIONS) % FREQUENCIES.len()],
        }
    }

    fn value(&self, u: f64, v: f64, theta: f64, freq: f64, phase: f64) -> f64 {
        let wave = |t: f64, f: f64| (2.0 * PI * f * (u * t.cos() + v * t.sin()) + phase).sin();
        match self.family {
            0 => wave(theta, freq),
            1 => 0.8 * wave(theta, freq).signum(),
            _ => 0.7 * wave(theta, freq) + 0.5 * wave(theta + PI / 2.0, 2.0 * freq),
        }
    }
}

fn render(cfg: &SynthConfig, pattern: &ClassPattern, rng: &mut Stream) -> Vec<f32> {
    let j = cfg.jitter;
    let s = cfg.image_size;
    let u = |r: &mut Stream| r.random_range(-1.0..1.0);
    let phase = j * rng.random_range(0.0..2.0 * PI);
    let theta = pattern.theta + j * u(rng) * PI / 36.0;
    let freq = pattern.freq * (1.0 + j * 0.08 * u(rng));
    let contrast = 0.35 + j * 0.1 * u(rng);
    let colour: Vec<f64> = (0..cfg.channels)
        .map(|_| 1.0 - j * rng.random_range(0.0..0.7))
        .collect();
    let background: Vec<f64> = (0..cfg.channels).map(|_| 0.5 + j * 0.2 * u(rng)).collect();
    let blob_amp = j * 0.3 * u(rng);
    let (by, bx) = (
        rng.random_range(0.0..s as f64),
        rng.random_range(0.0..s as f64),
    );
    let blob_sigma = rng.random_range(1.5..3.0) * s as f64 / 16.0;
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("finite std");

    let mut out = Vec::with_capacity(cfg.channels * s * s);
    for c in 0..cfg.channels {
        for y in 0..s {
            for x in 0..s {
                let (uu, vv) = (x as f64 / s as f64, y as f64 / s as f64);
                let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                let blob = blob_amp * (-d2 / (2.0 * blob_sigma * blob_sigma)).exp();
                let eps = if cfg.noise > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                let v = background[c]
                    + contrast * colour[c] * pattern.value(uu, vv, theta, freq, phase)
                    + blob
                    + eps;
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

/// Generates `n_classes · per_class` images, class-major, and assigns classes
/// to splits by a seeded shuffle.
pub fn synth_generate(cfg: &SynthConfig) -> Result<MetaDataset> {
    cfg.validate()?;
    let mut images = Vec::with_capacity(cfg.n_classes * cfg.per_class);
    for c in 0..cfg.n_classes {
        let pattern = ClassPattern::of(c);
        for i in 0..cfg.per_class {
            let mut rng = stream(cfg.seed, "synth-image", &[c as u64, i as u64]);
            images.push(LabeledImage {
                pixels: render(cfg, &pattern, &mut rng),
                label: c,
            });
        }
    }
    let mut order: Vec<usize> = (0..cfg.n_classes).collect();
    order.shuffle(&mut stream(cfg.seed, "synth-split", &[]));
    let (train, rest) = order.split_at(cfg.n_train);
    let (val, test) = rest.split_at(cfg.n_val);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let ds = MetaDataset {
        shape: ImageShape::square(cfg.channels, cfg.image_size),
        n_classes: cfg.n_classes,
        images,
        train_classes: sorted(train),
        val_classes: sorted(val),
        test_classes: sorted(test),
        params: cfg.to_kv(),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_determinism() {
        let cfg = SynthConfig::new(24, 40, 16, 7);
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a.images.len(), 960);
        assert_eq!(
            (
                a.train_classes.len(),
                a.val_classes.len(),
                a.test_classes.len()
            ),
            (16, 0, 8)
        );
        assert_eq!(a, synth_generate(&cfg).unwrap());
        assert!(a
            .images
            .iter()
            .all(|i| i.pixels.iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(synth_generate(&SynthConfig::new(24, 1, 16, 7)).is_err());
        assert!(synth_generate(&SynthConfig::new(9, 10, 16, 7)).is_err());
    }
}
