//! Experiment configuration (TOML, or JSON by extension) plus flag overrides.

use std::path::{Path, PathBuf};

use alignlite::select::SimilarityMetric;
use alignlite::train::{ModelKind, TrainConfig};
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_a: Option<PathBuf>,
    pub train_b: Option<PathBuf>,
    /// Optional in-domain pairs appended to the training set.
    pub extra_a: Option<PathBuf>,
    pub extra_b: Option<PathBuf>,
    /// Keep only this many training pairs (seeded subsample).
    pub train_count: Option<usize>,
    pub val_a: Option<PathBuf>,
    pub val_b: Option<PathBuf>,
    pub test_a: Option<PathBuf>,
    pub test_b: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayersConfig {
    pub bank_a: Option<PathBuf>,
    pub bank_b: Option<PathBuf>,
    /// `lo:hi` for both banks, or `lo:hi,lo:hi` for bank a and bank b.
    pub window: Option<String>,
    pub metric: String,
    /// Defaults to min(5000, N).
    pub sample_count: Option<usize>,
    pub repeats: usize,
}

impl Default for LayersConfig {
    fn default() -> Self {
        Self {
            bank_a: None,
            bank_b: None,
            window: None,
            metric: "mutual_knn_rice".into(),
            sample_count: None,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Linear,
            k: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Neighborhood size for trustworthiness and continuity.
    pub neighbors: usize,
    /// Zero-shot inputs: raw image embeddings, one integer label per line,
    /// raw class prototypes and optional class names.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub prototypes: Option<PathBuf>,
    pub class_names: Option<PathBuf>,
    pub confidence: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5],
            neighbors: 10,
            images: None,
            labels: None,
            prototypes: None,
            class_names: None,
            confidence: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub repeats: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![50, 100, 200],
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub layers: LayersConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

/// Flags shared by every experiment command.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub levels: Option<usize>,
    pub tau: Option<f64>,
    pub epochs: Option<usize>,
    pub metric: Option<String>,
    pub k: Option<usize>,
    pub sizes: Option<Vec<usize>>,
    pub repeats: Option<usize>,
    pub window: Option<String>,
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(text).context("parsing JSON config")
        } else {
            toml::from_str(text).context("parsing TOML config")
        }
    }

    /// Read a config file; relative paths inside are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let json = path.extension().is_some_and(|e| e == "json");
        let mut cfg = Self::parse(&text, json).with_context(|| format!("in {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let d = &mut cfg.data;
        for p in [
            &mut d.train_a,
            &mut d.train_b,
            &mut d.extra_a,
            &mut d.extra_b,
            &mut d.val_a,
            &mut d.val_b,
            &mut d.test_a,
            &mut d.test_b,
            &mut cfg.layers.bank_a,
            &mut cfg.layers.bank_b,
            &mut cfg.eval.images,
            &mut cfg.eval.labels,
            &mut cfg.eval.prototypes,
            &mut cfg.eval.class_names,
            &mut cfg.out,
        ] {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = Some(s);
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(l) = o.levels {
            self.train.reg.levels = l;
        }
        if let Some(t) = o.tau {
            self.train.reg.tau = t;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(m) = &o.metric {
            self.layers.metric = m.clone();
        }
        if let Some(k) = o.k {
            self.eval.neighbors = k;
            if self.layers.metric.starts_with("mutual_knn") {
                self.layers.metric = format!("mutual_knn_k{k}");
            }
        }
        if let Some(s) = &o.sizes {
            self.sweep.sizes = s.clone();
        }
        if let Some(r) = o.repeats {
            self.sweep.repeats = r;
            self.layers.repeats = r;
        }
        if let Some(w) = &o.window {
            self.layers.window = Some(w.clone());
        }
        if let Some(seed) = self.seed {
            self.train.seed = seed;
        }
    }

    /// Seed is mandatory, either in the file or via `--seed`.
    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| anyhow!("no seed given (set `seed` in the config or pass --seed)"))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| anyhow!("no output directory (set `out` in the config or pass --out)"))
    }

    pub fn metric(&self) -> Result<SimilarityMetric> {
        self.layers.metric.parse().map_err(|e| anyhow!("{e}"))
    }

    /// Every configured input path must exist.
    pub fn check_paths(&self) -> Result<()> {
        let d = &self.data;
        let all = [
            &d.train_a,
            &d.train_b,
            &d.extra_a,
            &d.extra_b,
            &d.val_a,
            &d.val_b,
            &d.test_a,
            &d.test_b,
            &self.layers.bank_a,
            &self.layers.bank_b,
            &self.eval.images,
            &self.eval.labels,
            &self.eval.prototypes,
            &self.eval.class_names,
        ];
        for p in all.into_iter().flatten() {
            if !p.exists() {
                bail!("path does not exist: {}", p.display());
            }
        }
        for (name, a, b) in [
            ("train", &d.train_a, &d.train_b),
            ("extra", &d.extra_a, &d.extra_b),
            ("val", &d.val_a, &d.val_b),
            ("test", &d.test_a, &d.test_b),
        ] {
            if a.is_some() != b.is_some() {
                bail!("data.{name}_a and data.{name}_b must be given together");
            }
        }
        Ok(())
    }
}

/// Parse `lo:hi` into an inclusive range.
pub fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| anyhow!("layer window {s:?} is not of the form lo:hi"))?;
    let lo: usize = lo.trim().parse().with_context(|| format!("bad window start in {s:?}"))?;
    let hi: usize = hi.trim().parse().with_context(|| format!("bad window end in {s:?}"))?;
    if lo > hi {
        bail!("layer window {s:?} is empty");
    }
    Ok((lo, hi))
}

/// Windows for bank a and bank b.
pub fn parse_window(s: &str) -> Result<((usize, usize), (usize, usize))> {
    match s.split_once(',') {
        Some((a, b)) => Ok((parse_range(a)?, parse_range(b)?)),
        None => {
            let r = parse_range(s)?;
            Ok((r, r))
        }
    }
}
