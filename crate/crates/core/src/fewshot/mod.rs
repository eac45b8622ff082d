//! Episodic meta-testing on frozen features.
//!
//! Each episode draws `C` unseen classes, `K` support and `Q` query images
//! per class, augments the support set, fits a linear classifier on the
//! support features and scores the queries.

mod logreg;
mod metrics;

pub use logreg::{fit_linear, imprint_weights, LinearClassifier, GRAD_TOL, MAX_ITERS};
pub use metrics::{episode_stats, median, EvalReport, MetricsRecord};

use rand::seq::index::sample;
use scl_autodiff::kernels::adaptive_window;
use scl_autodiff::Tensor;

use crate::data::{simclr_aug, stack, MetaDataset, Split};
use crate::error::config;
use crate::model::{Backbone, FeaturePack};
use crate::rng::{stream, Stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub n_episodes: usize,
    pub n_runs: usize,
    /// Augmented copies added per support image.
    pub support_aug_copies: usize,
}

impl EpisodeSpec {
    /// 600 five-way episodes over three runs.
    pub fn paper(shots: usize) -> Self {
        Self {
            ways: 5,
            shots,
            queries: 15,
            n_episodes: 600,
            n_runs: 3,
            support_aug_copies: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2
            || self.shots == 0
            || self.queries == 0
            || self.n_episodes == 0
            || self.n_runs == 0
        {
            return Err(config(format!("invalid episode spec {self:?}")));
        }
        Ok(())
    }
}

/// Support and query image indices with labels remapped to `0..C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Original class of each episode label.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Draws classes, then disjoint support and query images, without replacement.
pub fn sample_episode(
    ds: &MetaDataset,
    split: Split,
    spec: &EpisodeSpec,
    rng: &mut Stream,
) -> Result<Episode> {
    let pool = ds.classes(split);
    let groups = ds.by_class();
    let need = spec.shots + spec.queries;
    let eligible: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&c| groups[c].len() >= need)
        .collect();
    if eligible.len() < spec.ways {
        return Err(config(format!(
            "{}-way {}-shot {}-query episodes need {} classes with {need} images, found {}",
            spec.ways,
            spec.shots,
            spec.queries,
            spec.ways,
            eligible.len()
        )));
    }
    let picked = sample(rng, eligible.len(), spec.ways).into_vec();
    let mut ep = Episode {
        classes: Vec::with_capacity(spec.ways),
        support: Vec::new(),
        support_labels: Vec::new(),
        query: Vec::new(),
        query_labels: Vec::new(),
    };
    for (label, &ci) in picked.iter().enumerate() {
        let class = eligible[ci];
        ep.classes.push(class);
        let members = &groups[class];
        let chosen = sample(rng, members.len(), need).into_vec();
        for (k, &m) in chosen.iter().enumerate() {
            if k < spec.shots {
                ep.support.push(members[m]);
                ep.support_labels.push(label);
            } else {
                ep.query.push(members[m]);
                ep.query_labels.push(label);
            }
        }
    }
    Ok(ep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    Global,
    Spatial,
    Both(BothAggregation),
}

/// How `both` mode combines the two classifiers' scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BothAggregation {
    Sum,
    Max,
}

impl FeatureMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Spatial => "spatial",
            Self::Both(BothAggregation::Sum) => "both-sum",
            Self::Both(BothAggregation::Max) => "both-max",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "spatial" => Ok(Self::Spatial),
            "both-sum" | "both" => Ok(Self::Both(BothAggregation::Sum)),
            "both-max" => Ok(Self::Both(BothAggregation::Max)),
            _ => Err(config(format!(
                "unknown feature mode {s:?}; expected global, spatial, both-sum or both-max"
            ))),
        }
    }
}

/// Normalised feature matrices of a set of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    /// `[n, d]`
    pub global: Tensor,
    /// `[n, 4d]`: the spatial map max-pooled to 2×2, flattened channel-major.
    pub spatial: Tensor,
}

fn normalize_rows(mut t: Tensor) -> Tensor {
    let d = t.shape()[1];
    for row in t.data_mut().chunks_mut(d) {
        let n = row
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(scl_autodiff::NORM_EPS);
        for v in row {
            *v /= n;
        }
    }
    t
}

/// Adaptive max-pools `[B, HW, d]` spatial features to 2×2 and flattens them.
pub fn pooled_spatial(pack: &FeaturePack) -> Tensor {
    let s = pack.spatial.shape();
    let (b, hw, d) = (s[0], s[1], s[2]);
    let side = (hw as f64).sqrt().round() as usize;
    assert_eq!(side * side, hw, "spatial map must be square");
    let mut out = Vec::with_capacity(b * 4 * d);
    for i in 0..b {
        for c in 0..d {
            for oy in 0..2 {
                let (y0, y1) = adaptive_window(oy, side, 2);
                for ox in 0..2 {
                    let (x0, x1) = adaptive_window(ox, side, 2);
                    let mut m = f64::NEG_INFINITY;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            m = m.max(pack.spatial.at(&[i, y * side + x, c]));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(vec![b, 4 * d], out).expect("sizes")
}

pub fn extract_features(backbone: &Backbone, images: &Tensor) -> Result<Features> {
    let pack = backbone.embed(images)?;
    Ok(Features {
        global: normalize_rows(pack.global.clone()),
        spatial: normalize_rows(pooled_spatial(&pack)),
    })
}

/// Combines two `[n, C]` score matrices elementwise.
pub fn combine_scores(a: &Tensor, b: &Tensor, how: BothAggregation) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match how {
            BothAggregation::Sum => x + y,
            BothAggregation::Max => x.max(y),
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Fraction of rows whose first maximal score is at the true label.
pub fn accuracy(scores: &Tensor, labels: &[usize]) -> f64 {
    let c = scores.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &scores.data()[i * c..(i + 1) * c];
            let best = (1..c).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub mode: FeatureMode,
    pub l2_penalty: f64,
    /// Start each fit from imprinted weights instead of zero.
    pub imprint: bool,
    pub seed: u64,
    /// Worker threads for episodes; results do not depend on it.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: FeatureMode::Global,
            l2_penalty: 1.0,
            imprint: false,
            seed: 0,
            threads: 1,
        }
    }
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), d], data).expect("sizes")
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(vec![a.shape()[0] + b.shape()[0], a.shape()[1]], data).expect("same width")
}

fn fit_and_score(
    x: &Tensor,
    y: &[usize],
    q: &Tensor,
    ways: usize,
    cfg: &EvalConfig,
) -> Result<Tensor> {
    let init = if cfg.imprint {
        Some(imprint_weights(x, y, ways, cfg.l2_penalty)?)
    } else {
        None
    };
    Ok(fit_linear(x, y, ways, cfg.l2_penalty, init)?.scores(q))
}

struct Cached<'a> {
    ds: &'a MetaDataset,
    backbone: &'a Backbone,
    /// Unaugmented features of every image, by dataset index.
    features: Features,
}

fn pick_global(f: &Features) -> &Tensor {
    &f.global
}

fn pick_spatial(f: &Features) -> &Tensor {
    &f.spatial
}

/// Accuracy of episode `e` of run `run`.
fn run_episode(
    c: &Cached,
    split: Split,
    spec: &EpisodeSpec,
    cfg: &EvalConfig,
    run: usize,
    e: usize,
) -> Result<f64> {
    let ep = sample_episode(
        c.ds,
        split,
        spec,
        &mut stream(cfg.seed, "episode", &[run as u64, e as u64]),
    )?;
    let mut copies = Vec::with_capacity(ep.support.len() * spec.support_aug_copies);
    let mut copy_labels = Vec::with_capacity(copies.capacity());
    for (k, (&img, &label)) in ep.support.iter().zip(&ep.support_labels).enumerate() {
        let pixels = c.ds.images[img].to_f64();
        for a in 0..spec.support_aug_copies {
            let mut rng = stream(
                cfg.seed,
                "support-aug",
                &[run as u64, e as u64, k as u64, a as u64],
            );
            copies.push(simclr_aug(&pixels, c.ds.shape, &mut rng));
            copy_labels.push(label);
        }
    }
    let mut labels = ep.support_labels.clone();
    labels.extend_from_slice(&copy_labels);
    let support = |pick: fn(&Features) -> &Tensor, extra: Option<&Features>| -> Tensor {
        let base = select_rows(pick(&c.features), &ep.support);
        match extra {
            Some(f) => concat_rows(&base, pick(f)),
            None => base,
        }
    };
    let extra = if copies.is_empty() {
        None
    } else {
        Some(extract_features(c.backbone, &stack(&copies, c.ds.shape))?)
    };
    let score = |pick: fn(&Features) -> &Tensor| -> Result<Tensor> {
        let x = support(pick, extra.as_ref());
        let q = select_rows(pick(&c.features), &ep.query);
        fit_and_score(&x, &labels, &q, spec.ways, cfg)
    };
    let scores = match cfg.mode {
        FeatureMode::Global => score(pick_global)?,
        FeatureMode::Spatial => score(pick_spatial)?,
        FeatureMode::Both(how) => combine_scores(&score(pick_global)?, &score(pick_spatial)?, how),
    };
    Ok(accuracy(&scores, &ep.query_labels))
}

/// Runs `spec.n_runs × spec.n_episodes` episodes on `split` and summarises them.
pub fn evaluate(
    backbone: &Backbone,
    ds: &MetaDataset,
    split: Split,
    spec: &EpisodeSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    spec.validate()?;
    if cfg.l2_penalty.is_nan() || cfg.l2_penalty < 0.0 {
        return Err(config("penalty must be nonnegative"));
    }
    let pool: Vec<usize> = ds.classes(split).to_vec();
    let indices: Vec<usize> = (0..ds.images.len())
        .filter(|&i| pool.contains(&ds.images[i].label))
        .collect();
    // Features for every image of the split, stored at its dataset index.
    let d = backbone.config().feature_dim;
    let mut global = Tensor::zeros(&[ds.images.len(), d]);
    let mut spatial = Tensor::zeros(&[ds.images.len(), 4 * d]);
    for chunk in indices.chunks(128) {
        let views: Vec<Vec<f64>> = chunk.iter().map(|&i| ds.images[i].to_f64()).collect();
        let f = extract_features(backbone, &stack(&views, ds.shape))?;
        for (k, &i) in chunk.iter().enumerate() {
            global.data_mut()[i * d..(i + 1) * d].copy_from_slice(f.global.row(k));
            spatial.data_mut()[i * 4 * d..(i + 1) * 4 * d].copy_from_slice(f.spatial.row(k));
        }
    }
    let cached = Cached {
        ds,
        backbone,
        features: Features { global, spatial },
    };
    let mut runs = Vec::with_capacity(spec.n_runs);
    for run in 0..spec.n_runs {
        let accs = parallel_map(spec.n_episodes, cfg.threads.max(1), |e| {
            run_episode(&cached, split, spec, cfg, run, e)
        })?;
        runs.push(accs);
    }
    Ok(EvalReport::from_runs(runs, spec, cfg))
}

/// Evaluates `f(0..n)` on up to `threads` workers and returns the results in
/// index order.
fn parallel_map<T: Send, F: Fn(usize) -> Result<T> + Sync>(
    n: usize,
    threads: usize,
    f: F,
) -> Result<Vec<T>> {
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let f = &f;
                s.spawn(move || {
                    (start..(start + chunk).min(n))
                        .map(f)
                        .collect::<Result<Vec<T>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("episode worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
