//! Layered run configuration: preset defaults, then a key=value file, then
//! command-line flags.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use scl_core::kv::KvMap;
use scl_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    PaperMini,
    PaperCifar,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::PaperMini => "paper-mini",
            Self::PaperCifar => "paper-cifar",
        }
    }
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper-mini" => Ok(Self::PaperMini),
            "paper-cifar" => Ok(Self::PaperCifar),
            _ => Err(format!(
                "unknown preset {s:?}; expected desk, paper-mini or paper-cifar"
            )),
        }
    }
}

/// Options shared by every command.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Defaults to start from: desk, paper-mini or paper-cifar.
    #[arg(long, default_value = "desk")]
    pub preset: Preset,
    /// A key=value file; a manifest written by an earlier run works here.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Sets any configuration key. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

fn reject_unknown(defaults: &KvMap, layer: &KvMap, origin: &str) -> Result<()> {
    match layer.iter().find(|(k, _)| defaults.get(k).is_none()) {
        Some((k, _)) => {
            let known: Vec<&str> = defaults.iter().map(|(k, _)| k).collect();
            Err(Error::Config(format!(
                "unknown key {k:?} in {origin}; known keys: {}",
                known.join(", ")
            )))
        }
        None => Ok(()),
    }
}

/// Merges `defaults`, the config file, `--set` pairs and `flags` in that
/// order. Every key must already appear in `defaults`.
pub fn resolve(command: &str, defaults: KvMap, common: &Common, flags: KvMap) -> Result<KvMap> {
    let mut kv = defaults.clone();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut file = KvMap::parse(&text)?;
        if let Some(c) = file.remove("command") {
            if c != command {
                return Err(Error::Config(format!(
                    "{} configures {c:?}, not {command:?}",
                    path.display()
                )));
            }
        }
        reject_unknown(&defaults, &file, &path.display().to_string())?;
        kv.merge(&file);
    }
    let mut set = KvMap::new();
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        set.set(k.trim(), v.trim());
    }
    reject_unknown(&defaults, &set, "--set")?;
    kv.merge(&set);
    reject_unknown(&defaults, &flags, "flags")?;
    kv.merge(&flags);
    Ok(kv)
}

/// Collects the flags that were given into a key=value layer.
#[derive(Default)]
pub struct Flags(pub KvMap);

impl Flags {
    pub fn opt<T: Display>(&mut self, key: &str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.set(key, v);
        }
        self
    }

    pub fn path(&mut self, key: &str, v: &Option<PathBuf>) -> &mut Self {
        if let Some(v) = v {
            self.0.set(key, v.display());
        }
        self
    }

    pub fn take(&mut self) -> KvMap {
        std::mem::take(&mut self.0)
    }
}

pub fn get<T: FromStr>(kv: &KvMap, key: &str) -> Result<T> {
    kv.parse_value(key)?
        .ok_or_else(|| Error::Config(format!("missing key {key}")))
}

/// Like [`get`] but keeps the parser's own message.
pub fn get_named<T: FromStr<Err = Error>>(kv: &KvMap, key: &str) -> Result<T> {
    kv.get(key)
        .ok_or_else(|| Error::Config(format!("missing key {key}")))?
        .parse()
}

/// `None` for an empty value.
pub fn get_opt<T: FromStr>(kv: &KvMap, key: &str) -> Result<Option<T>> {
    match kv.get(key) {
        Some("") | None => Ok(None),
        Some(_) => kv.parse_value(key),
    }
}

/// A comma-separated list; empty means no items.
pub fn list<T: FromStr>(kv: &KvMap, key: &str) -> Result<Vec<T>> {
    let raw = kv.get(key).unwrap_or("");
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("invalid item {s:?} in {key}")))
        })
        .collect()
}

pub fn join<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn path(kv: &KvMap, key: &str) -> Result<PathBuf> {
    match kv.get(key) {
        Some(p) if !p.is_empty() => Ok(PathBuf::from(p)),
        _ => Err(Error::Config(format!(
            "{key} is required (use --{} or --set {key}=PATH)",
            key.replace('_', "-")
        ))),
    }
}

pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, ".manifest")
}

/// Fails if any output exists and `force` is off.
pub fn check_writable(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            p.display()
        ))),
        None => Ok(()),
    }
}

/// Manifest text: the command, every resolved key, then `# `-prefixed
/// derived values that reruns ignore.
pub fn manifest_text(
    command: &str,
    preset: Preset,
    kv: &KvMap,
    derived: &[(&str, String)],
) -> String {
    let mut text = format!("command={command}\n");
    text.push_str(&kv.to_text());
    text.push_str(&format!("# preset {}\n", preset.name()));
    for (k, v) in derived {
        text.push_str(&format!("# {k}={v}\n"));
    }
    text
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}
