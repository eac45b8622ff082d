use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use scl_core::analysis::{
    curve_csv, davies_bouldin, explained_variance, knn, singular_values, EmbeddingMatrix,
};
use scl_core::autodiff::Tensor;
use scl_core::checkpoint::Checkpoint;
use scl_core::data::{stack, synth_generate, ImageShape, MetaDataset, Split, SynthConfig};
use scl_core::fewshot::{evaluate, EpisodeSpec, EvalConfig, EvalReport};
use scl_core::kv::KvMap;
use scl_core::losses::{DistillConfig, LossConfig};
use scl_core::model::{Backbone, ModelConfig};
use scl_core::pretrain::{
    distill, pretrain, DistillOptions, EpochStats, Objective, StudentInit, TrainConfig,
};
use scl_core::protonet::{proto_train, ProtoConfig};
use scl_core::{Error, Result};

use crate::config::{self, get, get_named, get_opt, join, list, path, Common, Flags, Preset};

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!(
            "unknown split {s:?}; expected train, val or test"
        ))),
    }
}

fn parse_init(s: &str) -> Result<StudentInit> {
    match s {
        "fresh" => Ok(StudentInit::Fresh),
        "copy" => Ok(StudentInit::CopyTeacher),
        _ => Err(Error::Config(format!(
            "unknown init {s:?}; expected fresh or copy"
        ))),
    }
}

/// Files a command writes together once all work has succeeded.
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn new() -> Self {
        Self { files: Vec::new() }
    }

    fn add(&mut self, path: PathBuf, bytes: impl Into<Vec<u8>>) {
        self.files.push((path, bytes.into()));
    }

    fn commit(self) -> Result<()> {
        for (p, bytes) in &self.files {
            config::write(p, bytes)?;
        }
        Ok(())
    }
}

fn ensure_free(paths: &[PathBuf], force: bool) -> Result<()> {
    config::check_writable(
        &paths.iter().map(PathBuf::as_path).collect::<Vec<_>>(),
        force,
    )
}

fn load_data(kv: &KvMap) -> Result<MetaDataset> {
    let p = path(kv, "data")?;
    let ds = MetaDataset::load(&p)?;
    ds.validate()?;
    log::info!(
        "loaded {} images of {} classes from {}",
        ds.images.len(),
        ds.n_classes,
        p.display()
    );
    Ok(ds)
}

fn load_checkpoint(kv: &KvMap, key: &str) -> Result<Checkpoint> {
    Checkpoint::load(&path(kv, key)?)
}

// ---- synth -------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn synth_preset(p: Preset) -> (SynthConfig, bool) {
    match p {
        Preset::Desk => (SynthConfig::new(24, 40, 16, 7), false),
        Preset::PaperMini | Preset::PaperCifar => {
            let side = if p == Preset::PaperMini { 84 } else { 32 };
            (
                SynthConfig {
                    n_train: 64,
                    n_val: 16,
                    n_test: 20,
                    ..SynthConfig::new(100, 600, side, 0)
                },
                true,
            )
        }
    }
}

fn synth_defaults(p: Preset) -> KvMap {
    let (c, explicit_splits) = synth_preset(p);
    let mut kv = KvMap::new();
    kv.set("out", "");
    kv.set("n_classes", c.n_classes);
    kv.set("per_class", c.per_class);
    kv.set("image_size", c.image_size);
    kv.set("channels", c.channels);
    kv.set("seed", c.seed);
    kv.set("noise", c.noise);
    kv.set("jitter", c.jitter);
    for (k, v) in [
        ("n_train", c.n_train),
        ("n_val", c.n_val),
        ("n_test", c.n_test),
    ] {
        kv.set(
            k,
            if explicit_splits {
                v.to_string()
            } else {
                String::new()
            },
        );
    }
    kv
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let flags = Flags::default()
        .path("out", &a.out)
        .opt("n_classes", &a.n_classes)
        .opt("per_class", &a.per_class)
        .opt("image_size", &a.image_size)
        .opt("seed", &a.seed)
        .take();
    let kv = config::resolve("synth", synth_defaults(a.common.preset), &a.common, flags)?;
    let auto = SynthConfig::new(
        get(&kv, "n_classes")?,
        get(&kv, "per_class")?,
        get(&kv, "image_size")?,
        get(&kv, "seed")?,
    );
    let cfg = SynthConfig {
        channels: get(&kv, "channels")?,
        noise: get(&kv, "noise")?,
        jitter: get(&kv, "jitter")?,
        n_train: get_opt(&kv, "n_train")?.unwrap_or(auto.n_train),
        n_val: get_opt(&kv, "n_val")?.unwrap_or(auto.n_val),
        n_test: get_opt(&kv, "n_test")?.unwrap_or(auto.n_test),
        ..auto
    };
    let out = path(&kv, "out")?;
    let manifest = config::manifest_path(&out);
    ensure_free(&[out.clone(), manifest.clone()], a.common.force)?;
    let ds = synth_generate(&cfg)?;
    let derived = [
        ("n_train", cfg.n_train.to_string()),
        ("n_val", cfg.n_val.to_string()),
        ("n_test", cfg.n_test.to_string()),
    ];
    let mut o = Outputs::new();
    o.add(out.clone(), ds.to_bytes());
    o.add(
        manifest,
        config::manifest_text("synth", a.common.preset, &kv, &derived),
    );
    o.commit()?;
    println!(
        "wrote {} images ({}/{}/{} train/val/test classes) to {}",
        ds.images.len(),
        ds.train_classes.len(),
        ds.val_classes.len(),
        ds.test_classes.len(),
        out.display()
    );
    Ok(())
}

// ---- shared model, loss and schedule keys ------------------------------

fn model_preset(p: Preset) -> ModelConfig {
    match p {
        Preset::Desk => ModelConfig::desk(),
        Preset::PaperMini | Preset::PaperCifar => ModelConfig::paper(),
    }
}

fn set_model_keys(kv: &mut KvMap, m: Option<ModelConfig>) {
    let v = |f: fn(&ModelConfig) -> String| m.as_ref().map(f).unwrap_or_default();
    kv.set("feature_dim", v(|m| m.feature_dim.to_string()));
    kv.set("head_dim", v(|m| m.head_dim.to_string()));
    kv.set("pool_target", v(|m| m.pool_target.to_string()));
    kv.set("conv_channels", v(|m| join(&m.conv_channels)));
}

/// Model keys over `base`, with input geometry taken from the data.
fn model_from(kv: &KvMap, base: ModelConfig, shape: ImageShape) -> Result<ModelConfig> {
    if shape.height != shape.width {
        return Err(Error::Config(format!(
            "images must be square, got {}x{}",
            shape.height, shape.width
        )));
    }
    let conv_channels = match list::<usize>(kv, "conv_channels")?.as_slice() {
        [] => base.conv_channels,
        &[a, b] => [a, b],
        other => {
            return Err(Error::Config(format!(
                "conv_channels needs two values, got {other:?}"
            )))
        }
    };
    Ok(ModelConfig {
        input_channels: shape.channels,
        input_size: shape.height,
        feature_dim: get_opt(kv, "feature_dim")?.unwrap_or(base.feature_dim),
        head_dim: get_opt(kv, "head_dim")?.unwrap_or(base.head_dim),
        pool_target: get_opt(kv, "pool_target")?.unwrap_or(base.pool_target),
        conv_channels,
    })
}

fn set_loss_keys(kv: &mut KvMap, l: &LossConfig) {
    kv.set("tau", l.tau);
    kv.set("tau_prime", l.tau_prime);
    kv.set("aggregation", l.aggregation.name());
    kv.set("anchor_norm", l.anchor_normalization.name());
    kv.set("renormalize", l.renormalize_aligned);
}

fn loss_from(kv: &KvMap, base: LossConfig) -> Result<LossConfig> {
    Ok(LossConfig {
        tau: get(kv, "tau")?,
        tau_prime: get(kv, "tau_prime")?,
        aggregation: get_named(kv, "aggregation")?,
        anchor_normalization: get_named(kv, "anchor_norm")?,
        renormalize_aligned: get(kv, "renormalize")?,
        ..base
    })
}

fn set_schedule_keys(kv: &mut KvMap, t: &TrainConfig) {
    kv.set("lr", t.lr);
    kv.set("momentum", t.momentum);
    kv.set("weight_decay", t.weight_decay);
    kv.set("batch_size", t.batch_size);
    kv.set("epochs", t.epochs);
    kv.set("decay_epochs", join(&t.decay_epochs));
    kv.set("seed", t.seed);
}

fn schedule_from(kv: &KvMap, base: TrainConfig) -> Result<TrainConfig> {
    Ok(TrainConfig {
        lr: get(kv, "lr")?,
        momentum: get(kv, "momentum")?,
        weight_decay: get(kv, "weight_decay")?,
        batch_size: get(kv, "batch_size")?,
        epochs: get(kv, "epochs")?,
        decay_epochs: list(kv, "decay_epochs")?,
        seed: get(kv, "seed")?,
        ..base
    })
}

/// Flags shared by the training commands.
#[derive(Args, Debug)]
pub struct ScheduleFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ScheduleFlags {
    fn apply(&self, f: &mut Flags) {
        f.opt("lr", &self.lr)
            .opt("epochs", &self.epochs)
            .opt("batch_size", &self.batch_size)
            .opt("seed", &self.seed);
    }
}

fn history_csv(rows: &[(usize, &EpochStats)]) -> String {
    let mut s = String::from("generation,epoch,lr,ce,gc,sc,kl,cd,total\n");
    for (g, e) in rows {
        s.push_str(&format!(
            "{g},{},{},{},{},{},{},{},{}\n",
            e.epoch, e.lr, e.ce, e.gc, e.sc, e.kl, e.cd, e.total
        ));
    }
    s
}

// ---- pretrain ----------------------------------------------------------

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// ce, ce+gc, ce+sc, ce+gc+sc, ce+ssgc or ce+sssc.
    #[arg(long)]
    pub objective: Option<String>,
    /// Weight of each enabled contrastive term.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
}

fn train_preset(p: Preset) -> TrainConfig {
    match p {
        Preset::Desk => TrainConfig::desk(),
        Preset::PaperMini => TrainConfig::paper_mini(),
        Preset::PaperCifar => TrainConfig::paper_cifar(),
    }
}

fn pretrain_defaults(p: Preset) -> KvMap {
    let t = train_preset(p);
    let mut kv = KvMap::new();
    kv.set("data", "");
    kv.set("out", "");
    kv.set("objective", Objective::CeSc.name());
    kv.set("lambda", t.weights.lambda_sc);
    set_schedule_keys(&mut kv, &t);
    set_loss_keys(&mut kv, &t.loss_cfg);
    set_model_keys(&mut kv, Some(model_preset(p)));
    kv
}

pub fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let mut f = Flags::default();
    f.path("data", &a.data)
        .path("out", &a.out)
        .opt("objective", &a.objective)
        .opt("lambda", &a.lambda);
    a.schedule.apply(&mut f);
    let kv = config::resolve(
        "pretrain",
        pretrain_defaults(a.common.preset),
        &a.common,
        f.take(),
    )?;
    let objective: Objective = get_named(&kv, "objective")?;
    let base = train_preset(a.common.preset);
    let mut cfg = schedule_from(&kv, base.clone())?;
    cfg.loss_cfg = loss_from(&kv, base.loss_cfg)?;
    let cfg = cfg.with_objective(objective, get(&kv, "lambda")?);
    cfg.validate()?;
    let out = path(&kv, "out")?;
    let (manifest, history) = (
        config::manifest_path(&out),
        config::sibling(&out, ".history.csv"),
    );
    ensure_free(
        &[out.clone(), manifest.clone(), history.clone()],
        a.common.force,
    )?;
    let ds = load_data(&kv)?;
    let model = model_from(&kv, model_preset(a.common.preset), ds.shape)?;
    let p = pretrain(&ds.merged_train(), model, &cfg)?;

    let w = cfg.weights;
    let derived = [
        ("lambda_ce", w.lambda_ce.to_string()),
        ("lambda_gc", w.lambda_gc.to_string()),
        ("lambda_sc", w.lambda_sc.to_string()),
        ("supervised", cfg.loss_cfg.supervised.to_string()),
    ];
    let text = config::manifest_text("pretrain", a.common.preset, &kv, &derived);
    let ck = Checkpoint::new(p.backbone, Some(p.classifier), KvMap::parse(&text)?);
    let rows: Vec<(usize, &EpochStats)> = p.history.iter().map(|e| (0, e)).collect();
    let mut o = Outputs::new();
    o.add(out.clone(), ck.to_bytes());
    o.add(manifest, text);
    o.add(history, history_csv(&rows));
    o.commit()?;
    if let Some(last) = p.history.last() {
        println!(
            "{}: epoch {} ce {:.4} gc {:.4} sc {:.4} total {:.4}; wrote {}",
            objective.name(),
            last.epoch,
            last.ce,
            last.gc,
            last.sc,
            last.total,
            out.display()
        );
    }
    Ok(())
}

// ---- distill -----------------------------------------------------------

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub common: Common,
    /// Teacher checkpoint.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Student checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lambda_cd: Option<f64>,
    #[arg(long)]
    pub lambda_kl: Option<f64>,
    /// KL temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Weight of the global feature-matching term.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the spatial feature-matching term.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub generations: Option<usize>,
    /// fresh or copy.
    #[arg(long)]
    pub init: Option<String>,
    #[command(flatten)]
    pub schedule: ScheduleFlags,
}

fn distill_train_preset(p: Preset) -> TrainConfig {
    TrainConfig {
        lr: TrainConfig::desk_distill().lr,
        ..train_preset(p)
    }
}

fn distill_defaults(p: Preset) -> KvMap {
    let d = DistillConfig::default();
    let mut kv = KvMap::new();
    kv.set("teacher", "");
    kv.set("data", "");
    kv.set("out", "");
    set_schedule_keys(&mut kv, &distill_train_preset(p));
    kv.set("lambda_cd", d.lambda_cd);
    kv.set("lambda_kl", d.lambda_kl);
    kv.set("temperature", d.kl_temperature);
    kv.set("alpha", d.alpha);
    kv.set("beta", d.beta);
    kv.set("generations", 1);
    kv.set("init", "fresh");
    set_model_keys(&mut kv, None);
    kv
}

pub fn distill_cmd(a: &DistillArgs) -> Result<()> {
    let mut f = Flags::default();
    f.path("teacher", &a.teacher)
        .path("data", &a.data)
        .path("out", &a.out)
        .opt("lambda_cd", &a.lambda_cd)
        .opt("lambda_kl", &a.lambda_kl)
        .opt("temperature", &a.temperature)
        .opt("alpha", &a.alpha)
        .opt("beta", &a.beta)
        .opt("generations", &a.generations)
        .opt("init", &a.init);
    a.schedule.apply(&mut f);
    let kv = config::resolve(
        "distill",
        distill_defaults(a.common.preset),
        &a.common,
        f.take(),
    )?;
    let opts = DistillOptions {
        train: schedule_from(&kv, distill_train_preset(a.common.preset))?,
        distill: DistillConfig {
            lambda_cd: get(&kv, "lambda_cd")?,
            lambda_kl: get(&kv, "lambda_kl")?,
            kl_temperature: get(&kv, "temperature")?,
            alpha: get(&kv, "alpha")?,
            beta: get(&kv, "beta")?,
        },
        generations: get(&kv, "generations")?,
        init: parse_init(kv.get("init").unwrap_or_default())?,
    };
    if opts.generations == 0 {
        return Err(Error::Config("generations must be at least 1".into()));
    }
    opts.distill.validate()?;
    opts.train.validate()?;
    let (teacher_path, out) = (path(&kv, "teacher")?, path(&kv, "out")?);
    if same_file(&teacher_path, &out) {
        return Err(Error::Config(
            "the student must be written to a different file from the teacher".into(),
        ));
    }
    let (manifest, history) = (
        config::manifest_path(&out),
        config::sibling(&out, ".history.csv"),
    );
    ensure_free(
        &[out.clone(), manifest.clone(), history.clone()],
        a.common.force,
    )?;
    let teacher = Checkpoint::load(&teacher_path)?;
    let classifier = teacher.classifier.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "{} has no classifier to distil from",
            teacher_path.display()
        ))
    })?;
    let ds = load_data(&kv)?;
    let model = model_from(&kv, *teacher.backbone.config(), ds.shape)?;
    let d = distill(
        (&teacher.backbone, classifier),
        model,
        &ds.merged_train(),
        &opts,
    )?;

    let derived = [
        ("distance_before", d.distance_before.to_string()),
        ("distance_after", d.distance_after.to_string()),
    ];
    let text = config::manifest_text("distill", a.common.preset, &kv, &derived);
    let ck = Checkpoint::new(d.backbone, Some(d.classifier), KvMap::parse(&text)?);
    let rows: Vec<(usize, &EpochStats)> = d
        .history
        .iter()
        .enumerate()
        .flat_map(|(g, h)| h.iter().map(move |e| (g, e)))
        .collect();
    let mut o = Outputs::new();
    o.add(out.clone(), ck.to_bytes());
    o.add(manifest, text);
    o.add(history, history_csv(&rows));
    o.commit()?;
    println!(
        "feature distance to teacher {:.4} -> {:.4}; wrote {}",
        d.distance_before,
        d.distance_after,
        out.display()
    );
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

// ---- eval --------------------------------------------------------------

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Metrics file; CSV when it ends in `.csv`, JSON lines otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ways: Option<usize>,
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// global, spatial or both.
    #[arg(long)]
    pub mode: Option<String>,
    /// How `both` combines its scores: sum or max.
    #[arg(long)]
    pub aggregation: Option<String>,
    /// Start each fit from imprinted prototype weights.
    #[arg(long)]
    pub imprint: Option<bool>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn spec_preset(p: Preset) -> EpisodeSpec {
    match p {
        Preset::Desk => EpisodeSpec {
            n_episodes: 200,
            n_runs: 1,
            ..EpisodeSpec::paper(1)
        },
        Preset::PaperMini | Preset::PaperCifar => EpisodeSpec::paper(1),
    }
}

fn set_eval_keys(kv: &mut KvMap, prefix: &str, s: &EpisodeSpec) {
    let c = EvalConfig::default();
    kv.set(&format!("{prefix}split"), "test");
    kv.set(&format!("{prefix}ways"), s.ways);
    kv.set(&format!("{prefix}shots"), s.shots);
    kv.set(&format!("{prefix}queries"), s.queries);
    kv.set(&format!("{prefix}episodes"), s.n_episodes);
    kv.set(&format!("{prefix}runs"), s.n_runs);
    kv.set(&format!("{prefix}support_aug"), s.support_aug_copies);
    kv.set(&format!("{prefix}mode"), "global");
    kv.set(&format!("{prefix}aggregation"), "sum");
    kv.set(&format!("{prefix}imprint"), c.imprint);
    kv.set(&format!("{prefix}l2_penalty"), c.l2_penalty);
    kv.set(&format!("{prefix}seed"), c.seed);
    kv.set(&format!("{prefix}threads"), c.threads);
}

fn eval_from(kv: &KvMap, prefix: &str) -> Result<(Split, EpisodeSpec, EvalConfig)> {
    let k = |s: &str| format!("{prefix}{s}");
    let spec = EpisodeSpec {
        ways: get(kv, &k("ways"))?,
        shots: get(kv, &k("shots"))?,
        queries: get(kv, &k("queries"))?,
        n_episodes: get(kv, &k("episodes"))?,
        n_runs: get(kv, &k("runs"))?,
        support_aug_copies: get(kv, &k("support_aug"))?,
    };
    spec.validate()?;
    let mode: String = get(kv, &k("mode"))?;
    let agg: String = get(kv, &k("aggregation"))?;
    if agg != "sum" && agg != "max" {
        return Err(Error::Config(format!(
            "unknown aggregation {agg:?}; expected sum or max"
        )));
    }
    let mode = if mode == "both" {
        format!("both-{agg}")
    } else {
        mode
    };
    let cfg = EvalConfig {
        mode: mode.parse()?,
        l2_penalty: get(kv, &k("l2_penalty"))?,
        imprint: get(kv, &k("imprint"))?,
        seed: get(kv, &k("seed"))?,
        threads: get(kv, &k("threads"))?,
    };
    Ok((
        parse_split(kv.get(&k("split")).unwrap_or_default())?,
        spec,
        cfg,
    ))
}

fn eval_defaults(p: Preset) -> KvMap {
    let mut kv = KvMap::new();
    kv.set("checkpoint", "");
    kv.set("data", "");
    kv.set("out", "");
    set_eval_keys(&mut kv, "", &spec_preset(p));
    kv
}

fn metrics_bytes(report: &EvalReport, out: &Path) -> String {
    if out.extension().is_some_and(|e| e == "csv") {
        report.to_csv()
    } else {
        report.to_jsonl()
    }
}

fn print_report(report: &EvalReport) {
    for r in &report.records {
        println!(
            "run {}: {}-way {}-shot {} mean {:.4} +- {:.4} over {} episodes",
            r.run, r.ways, r.shots, r.mode, r.mean, r.ci95, r.episodes
        );
    }
    println!("median of run means {:.4}", report.median);
}

pub fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let flags = Flags::default()
        .path("checkpoint", &a.checkpoint)
        .path("data", &a.data)
        .path("out", &a.out)
        .opt("ways", &a.ways)
        .opt("shots", &a.shots)
        .opt("queries", &a.queries)
        .opt("episodes", &a.episodes)
        .opt("runs", &a.runs)
        .opt("mode", &a.mode)
        .opt("aggregation", &a.aggregation)
        .opt("imprint", &a.imprint)
        .opt("threads", &a.threads)
        .opt("seed", &a.seed)
        .take();
    let kv = config::resolve("eval", eval_defaults(a.common.preset), &a.common, flags)?;
    let (split, spec, cfg) = eval_from(&kv, "")?;
    let out = path(&kv, "out")?;
    let manifest = config::manifest_path(&out);
    ensure_free(&[out.clone(), manifest.clone()], a.common.force)?;
    let ck = load_checkpoint(&kv, "checkpoint")?;
    let ds = load_data(&kv)?;
    let report = evaluate(&ck.backbone, &ds, split, &spec, &cfg)?;
    let mut o = Outputs::new();
    o.add(out, metrics_bytes(&report, &path(&kv, "out")?));
    o.add(
        manifest,
        config::manifest_text("eval", a.common.preset, &kv, &[]),
    );
    o.commit()?;
    print_report(&report);
    Ok(())
}

// ---- proto -------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ProtoArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics file; defaults to the checkpoint path plus `.metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub lambda_gc: Option<f64>,
    #[arg(long)]
    pub lambda_sc: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation episodes per run.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
}

fn proto_preset(p: Preset) -> ProtoConfig {
    match p {
        Preset::Desk => ProtoConfig::desk(),
        Preset::PaperMini | Preset::PaperCifar => ProtoConfig::paper(),
    }
}

fn proto_defaults(p: Preset) -> KvMap {
    let c = proto_preset(p);
    let mut kv = KvMap::new();
    kv.set("data", "");
    kv.set("out", "");
    kv.set("metrics", "");
    kv.set("ways", c.ways);
    kv.set("shots", c.shots);
    kv.set("queries", c.queries);
    kv.set("episodes", c.n_episodes);
    kv.set("lambda_ce", c.weights.lambda_ce);
    kv.set("lambda_gc", c.weights.lambda_gc);
    kv.set("lambda_sc", c.weights.lambda_sc);
    kv.set("lr", c.lr);
    kv.set("seed", c.seed);
    set_loss_keys(&mut kv, &c.loss_cfg);
    set_model_keys(&mut kv, Some(model_preset(p)));
    set_eval_keys(&mut kv, "eval_", &spec_preset(p));
    kv
}

pub fn proto_cmd(a: &ProtoArgs) -> Result<()> {
    let flags = Flags::default()
        .path("data", &a.data)
        .path("out", &a.out)
        .path("metrics", &a.metrics)
        .opt("episodes", &a.episodes)
        .opt("lambda_gc", &a.lambda_gc)
        .opt("lambda_sc", &a.lambda_sc)
        .opt("lr", &a.lr)
        .opt("seed", &a.seed)
        .opt("eval_episodes", &a.eval_episodes)
        .take();
    let kv = config::resolve("proto", proto_defaults(a.common.preset), &a.common, flags)?;
    let base = proto_preset(a.common.preset);
    let cfg = ProtoConfig {
        ways: get(&kv, "ways")?,
        shots: get(&kv, "shots")?,
        queries: get(&kv, "queries")?,
        n_episodes: get(&kv, "episodes")?,
        weights: scl_core::losses::ObjectiveWeights {
            lambda_ce: get(&kv, "lambda_ce")?,
            lambda_gc: get(&kv, "lambda_gc")?,
            lambda_sc: get(&kv, "lambda_sc")?,
        },
        loss_cfg: loss_from(&kv, base.loss_cfg)?,
        lr: get(&kv, "lr")?,
        seed: get(&kv, "seed")?,
    };
    cfg.validate()?;
    let (split, spec, ecfg) = eval_from(&kv, "eval_")?;
    let out = path(&kv, "out")?;
    let metrics = get_opt::<PathBuf>(&kv, "metrics")?
        .unwrap_or_else(|| config::sibling(&out, ".metrics.jsonl"));
    let (manifest, history) = (
        config::manifest_path(&out),
        config::sibling(&out, ".history.csv"),
    );
    ensure_free(
        &[
            out.clone(),
            metrics.clone(),
            manifest.clone(),
            history.clone(),
        ],
        a.common.force,
    )?;
    let ds = load_data(&kv)?;
    let model = model_from(&kv, model_preset(a.common.preset), ds.shape)?;
    let t = proto_train(&ds, model, &cfg)?;
    let report = evaluate(&t.backbone, &ds, split, &spec, &ecfg)?;

    let text = config::manifest_text("proto", a.common.preset, &kv, &[]);
    let ck = Checkpoint::new(t.backbone, None, KvMap::parse(&text)?);
    let mut hist = String::from("episode,ce,gc,sc,total\n");
    for (e, l) in t.history.iter().enumerate() {
        hist.push_str(&format!("{e},{},{},{},{}\n", l.ce, l.gc, l.sc, l.total));
    }
    let mut o = Outputs::new();
    o.add(out.clone(), ck.to_bytes());
    o.add(metrics.clone(), metrics_bytes(&report, &metrics));
    o.add(manifest, text);
    o.add(history, hist);
    o.commit()?;
    print_report(&report);
    println!("wrote {} and {}", out.display(), metrics.display());
    Ok(())
}

// ---- analyze -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    /// Nearest neighbours of one image by cosine similarity.
    Knn,
    /// Cumulative explained variance of the principal components.
    Variance,
    /// Singular values normalised by the largest.
    Singular,
    /// Davies-Bouldin index on raw and unit-normalised features.
    Db,
}

impl Analysis {
    fn name(self) -> &'static str {
        match self {
            Self::Knn => "knn",
            Self::Variance => "variance",
            Self::Singular => "singular",
            Self::Db => "db",
        }
    }
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    pub kind: Analysis,
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// CSV file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Neighbours to list.
    #[arg(long)]
    pub k: Option<usize>,
    /// Position of the query image within the split.
    #[arg(long)]
    pub query: Option<usize>,
    /// Unit-normalise features before computing spectra.
    #[arg(long)]
    pub normalize: Option<bool>,
}

fn analyze_defaults() -> KvMap {
    let mut kv = KvMap::new();
    kv.set("checkpoint", "");
    kv.set("data", "");
    kv.set("out", "");
    kv.set("split", "test");
    kv.set("k", 10);
    kv.set("query", 0);
    kv.set("normalize", true);
    kv
}

/// Raw global features of every image in `split`, with labels and dataset
/// indices.
fn split_features(
    net: &Backbone,
    ds: &MetaDataset,
    split: Split,
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let classes = ds.classes(split);
    let sources: Vec<usize> = (0..ds.images.len())
        .filter(|&i| classes.contains(&ds.images[i].label))
        .collect();
    if sources.is_empty() {
        return Err(Error::Config("the chosen split has no images".into()));
    }
    let d = net.config().feature_dim;
    let mut rows = Vec::with_capacity(sources.len() * d);
    for chunk in sources.chunks(128) {
        let views: Vec<Vec<f64>> = chunk.iter().map(|&i| ds.images[i].to_f64()).collect();
        rows.extend_from_slice(net.embed(&stack(&views, ds.shape))?.global.data());
    }
    let labels = sources.iter().map(|&i| ds.images[i].label).collect();
    Ok((Tensor::new(vec![sources.len(), d], rows)?, labels, sources))
}

pub fn analyze_cmd(a: &AnalyzeArgs) -> Result<()> {
    let flags = Flags::default()
        .path("checkpoint", &a.checkpoint)
        .path("data", &a.data)
        .path("out", &a.out)
        .opt("split", &a.split)
        .opt("k", &a.k)
        .opt("query", &a.query)
        .opt("normalize", &a.normalize)
        .take();
    let command = format!("analyze-{}", a.kind.name());
    let kv = config::resolve(&command, analyze_defaults(), &a.common, flags)?;
    let split = parse_split(kv.get("split").unwrap_or_default())?;
    let normalize: bool = get(&kv, "normalize")?;
    let out = path(&kv, "out")?;
    let manifest = config::manifest_path(&out);
    ensure_free(&[out.clone(), manifest.clone()], a.common.force)?;
    let ck = load_checkpoint(&kv, "checkpoint")?;
    let ds = load_data(&kv)?;
    let (raw, labels, sources) = split_features(&ck.backbone, &ds, split)?;
    let m = EmbeddingMatrix::new(&raw, labels.clone(), sources)?;
    let features = if normalize { &m.rows } else { &raw };
    let csv = match a.kind {
        Analysis::Knn => {
            let (q, k): (usize, usize) = (get(&kv, "query")?, get(&kv, "k")?);
            let hits = knn(&raw, q, k)?;
            let mut s = String::from("rank,index,label,similarity\n");
            for (r, &i) in hits.iter().enumerate() {
                let sim: f64 = m
                    .rows
                    .row(i)
                    .iter()
                    .zip(m.rows.row(q))
                    .map(|(x, y)| x * y)
                    .sum();
                s.push_str(&format!(
                    "{},{},{},{sim}\n",
                    r + 1,
                    m.sources[i],
                    m.labels[i]
                ));
            }
            println!(
                "query image {} (label {}): {} neighbours share its label",
                m.sources[q],
                m.labels[q],
                hits.iter().filter(|&&i| m.labels[i] == m.labels[q]).count()
            );
            s
        }
        Analysis::Variance => {
            let curve = explained_variance(features)?;
            println!("first component explains {:.4} of the variance", curve[0]);
            curve_csv(&curve)
        }
        Analysis::Singular => {
            let values = singular_values(features)?;
            println!(
                "{} singular values, smallest {:.4e}",
                values.len(),
                values.last().copied().unwrap_or(0.0)
            );
            curve_csv(&values)
        }
        Analysis::Db => {
            let (r, n) = (
                davies_bouldin(&raw, &labels, false)?,
                davies_bouldin(&raw, &labels, true)?,
            );
            println!("davies-bouldin raw {r:.4} normalized {n:.4}");
            format!("features,value\nraw,{r}\nnormalized,{n}\n")
        }
    };
    let mut o = Outputs::new();
    o.add(out, csv);
    o.add(
        manifest,
        config::manifest_text(&command, a.common.preset, &kv, &[]),
    );
    o.commit()
}
