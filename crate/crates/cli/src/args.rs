use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "alignlite", version, about = "Align frozen unimodal embeddings with few paired samples")]
pub struct Cli {
    /// Worker threads for sweeps.
    #[arg(long, global = true, env = "ALIGNLITE_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Experiment config (TOML, or JSON with a .json extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Layer similarity metric: mutual_knn_rice, mutual_knn_k<k>, cka, unbiased_cka.
    #[arg(long)]
    pub metric: Option<String>,
    /// Neighborhood size for mutual kNN and trustworthiness/continuity.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Comma-separated training sizes for sweeps.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// `lo:hi` for both banks, or `lo:hi,lo:hi`.
    #[arg(long)]
    pub layer_window: Option<String>,
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            lambda: self.lambda,
            levels: self.levels,
            tau: self.tau,
            epochs: self.epochs,
            metric: self.metric.clone(),
            k: self.k,
            sizes: self.sizes.clone(),
            repeats: self.repeats,
            window: self.layer_window.clone(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub n_train: usize,
    #[arg(long, default_value_t = 64)]
    pub n_val: usize,
    #[arg(long, default_value_t = 256)]
    pub n_test: usize,
    #[arg(long, default_value_t = 8)]
    pub latent: usize,
    #[arg(long, default_value_t = 32)]
    pub d1: usize,
    #[arg(long, default_value_t = 48)]
    pub d2: usize,
    /// Noise standard deviation relative to the signal RMS.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Also write layer banks with this many layers per modality.
    #[arg(long, default_value_t = 0)]
    pub layers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Summarize an EMB1 file or a layer-bank manifest.
    Inspect { path: PathBuf },
    /// Score all layer pairs of two banks and pick the most similar one.
    LayerSelect(Common),
    /// Train alignment functions and write a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on held-out pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train at several sizes, with and without the regularizer.
    Sweep(Common),
    /// Render plots and a summary for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write a synthetic paired dataset and a matching config.
    Synth(SynthArgs),
}
