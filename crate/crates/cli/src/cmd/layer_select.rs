use std::collections::BTreeMap;

use alignlite::select::{self, SelectionResult, SimilarityGrid};
use alignlite::store::{self, LayerBank};
use anyhow::{anyhow, Context};
use serde::Serialize;

use crate::config::{parse_window, ExperimentConfig};
use crate::output::{ensure_dir, write_csv, write_json};
use crate::{CmdResult, Failure};

const DEFAULT_SAMPLE_CAP: usize = 5000;

#[derive(Debug, Serialize)]
struct GridRow<'a> {
    layer_a: usize,
    layer_b: usize,
    score: f64,
    metric: &'a str,
    n: usize,
    seed: u64,
}

#[derive(Debug, Serialize)]
pub struct SelectionSummary {
    pub metric: String,
    pub sample_count: usize,
    pub seed: u64,
    pub window_a: Option<(usize, usize)>,
    pub window_b: Option<(usize, usize)>,
    #[serde(flatten)]
    pub result: SelectionResult,
}

#[derive(Debug, Serialize)]
struct ConsistencyEntry {
    layer_a: usize,
    layer_b: usize,
    count: usize,
}

#[derive(Debug, Serialize)]
struct Consistency {
    repeats: usize,
    sample_count: usize,
    counts: Vec<ConsistencyEntry>,
}

fn load_bank(path: &Option<std::path::PathBuf>, name: &str) -> CmdResult<LayerBank> {
    let path = path
        .as_ref()
        .ok_or_else(|| anyhow!("layers.{name} (a layer-bank manifest) is required"))?;
    Ok(store::load_layer_bank(path).with_context(|| format!("loading {}", path.display()))?)
}

/// Both banks after applying the configured window.
pub fn banks(cfg: &ExperimentConfig) -> CmdResult<(LayerBank, LayerBank, Option<((usize, usize), (usize, usize))>)> {
    let mut a = load_bank(&cfg.layers.bank_a, "bank_a")?;
    let mut b = load_bank(&cfg.layers.bank_b, "bank_b")?;
    let window = cfg.layers.window.as_deref().map(parse_window).transpose()?;
    if let Some(((alo, ahi), (blo, bhi))) = window {
        a = a.window(alo, ahi);
        b = b.window(blo, bhi);
    }
    if a.layers().is_empty() || b.layers().is_empty() {
        return Err(Failure::input(format!(
            "layer window {:?} leaves an empty bank",
            cfg.layers.window.as_deref().unwrap_or("")
        )));
    }
    Ok((a, b, window))
}

pub fn run(cfg: &ExperimentConfig) -> CmdResult<()> {
    let seed = cfg.seed()?;
    let out = cfg.out_dir()?;
    let metric = cfg.metric()?;
    let (a, b, window) = banks(cfg)?;
    let sample_count = cfg.layers.sample_count.unwrap_or(a.len().min(DEFAULT_SAMPLE_CAP));
    let grid: SimilarityGrid = select::build_grid(&a, &b, metric, sample_count, seed)?;
    let result = select::select(&grid)?;
    ensure_dir(out)?;
    let rows: Vec<GridRow> = grid
        .cells
        .iter()
        .map(|c| GridRow {
            layer_a: c.layer_a,
            layer_b: c.layer_b,
            score: c.score,
            metric: &grid.metric,
            n: sample_count,
            seed,
        })
        .collect();
    write_csv(&out.join("grid.csv"), &rows)?;
    log::info!(
        "best pair ({}, {}) with {} = {:.6}",
        result.best_pair.0,
        result.best_pair.1,
        grid.metric,
        result.score
    );
    let summary = SelectionSummary {
        metric: grid.metric.clone(),
        sample_count,
        seed,
        window_a: window.map(|w| w.0),
        window_b: window.map(|w| w.1),
        result,
    };
    write_json(&out.join("selection.json"), &summary)?;
    if cfg.layers.repeats > 1 {
        let hist: BTreeMap<(usize, usize), usize> =
            select::selection_consistency(&a, &b, metric, sample_count, cfg.layers.repeats, seed)?;
        let counts = hist
            .into_iter()
            .map(|((layer_a, layer_b), count)| ConsistencyEntry { layer_a, layer_b, count })
            .collect();
        write_json(
            &out.join("consistency.json"),
            &Consistency {
                repeats: cfg.layers.repeats,
                sample_count,
                counts,
            },
        )?;
    }
    Ok(())
}
