use std::path::Path;

use alignlite::eval::{self, ClassPrototypes, RetrievalReport};
use alignlite::store::{self, PairedDataset};
use alignlite::train::{checkpoint, AlignmentModel};
use anyhow::{anyhow, Context};
use serde::Serialize;

use super::test_set;
use crate::config::ExperimentConfig;
use crate::output::{ensure_dir, write_json};
use crate::{eval_failure, CmdResult, Failure};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PerModality {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Serialize)]
pub struct ZeroShotSummary {
    pub n: usize,
    pub classes: usize,
    pub top1: f64,
    pub top5: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Metrics {
    pub n: usize,
    pub retrieval: Vec<RetrievalReport>,
    pub mean_r1: f64,
    pub modality_gap: f64,
    /// Neighborhoods use cosine distance in both spaces.
    pub neighbor_k: usize,
    pub trustworthiness: PerModality,
    pub continuity: PerModality,
    pub zero_shot: Option<ZeroShotSummary>,
}

fn check_dims(model: &AlignmentModel, ds: &PairedDataset) -> CmdResult<()> {
    let (d1, d2, _) = model.dims();
    if ds.dims() != (d1, d2) {
        return Err(Failure::input(format!(
            "checkpoint expects dims ({d1}, {d2}), data has {:?}",
            ds.dims()
        )));
    }
    Ok(())
}

fn read_labels(path: &Path) -> CmdResult<Vec<usize>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.parse()
                .map_err(|_| Failure::input(format!("{}: line {}: bad label {l:?}", path.display(), i + 1)))
        })
        .collect()
}

fn zero_shot(cfg: &ExperimentConfig, model: &AlignmentModel) -> CmdResult<Option<ZeroShotSummary>> {
    let e = &cfg.eval;
    let (images, labels, protos) = match (&e.images, &e.labels, &e.prototypes) {
        (None, None, None) => return Ok(None),
        (Some(i), Some(l), Some(p)) => (i, l, p),
        _ => {
            return Err(Failure::input(
                "zero-shot needs eval.images, eval.labels and eval.prototypes together",
            ))
        }
    };
    let (d1, d2, _) = model.dims();
    let images = store::load_embeddings(images).with_context(|| format!("loading {}", images.display()))?;
    let proto_file = store::load_embedding_file(protos).with_context(|| format!("loading {}", protos.display()))?;
    if images.cols() != d1 || proto_file.matrix.cols() != d2 {
        return Err(Failure::input(format!(
            "zero-shot inputs have dims ({}, {}), checkpoint expects ({d1}, {d2})",
            images.cols(),
            proto_file.matrix.cols()
        )));
    }
    let labels = read_labels(labels)?;
    let names = match (&e.class_names, proto_file.ids) {
        (Some(p), _) => store::read_id_list(p)?,
        (None, Some(ids)) => ids,
        (None, None) => (0..proto_file.matrix.rows()).map(|i| i.to_string()).collect(),
    };
    let raw = ClassPrototypes::new(names, proto_file.matrix).map_err(eval_failure)?;
    let mapped = raw.map(|p| model.embed_b(p)).map_err(eval_failure)?;
    let z = model.embed_a(images.data().view());
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Failure::Numeric(anyhow!("aligned image embeddings are not finite")));
    }
    let report = eval::zero_shot_classify(z.view(), &mapped, &labels).map_err(eval_failure)?;
    Ok(Some(ZeroShotSummary {
        n: labels.len(),
        classes: mapped.len(),
        top1: report.top1,
        top5: report.top5,
    }))
}

/// All configured metrics for `model` on `ds`.
pub fn metrics(cfg: &ExperimentConfig, model: &AlignmentModel, ds: &PairedDataset) -> CmdResult<Metrics> {
    check_dims(model, ds)?;
    let (xa, xb) = (ds.a().data().view(), ds.b().data().view());
    let za = model.embed_a(xa);
    let zb = model.embed_b(xb);
    if !(za.iter().all(|v| v.is_finite()) && zb.iter().all(|v| v.is_finite())) {
        return Err(Failure::Numeric(anyhow!("aligned embeddings are not finite")));
    }
    let [i2t, t2i] = eval::cross_modal_retrieval(za.view(), zb.view(), &cfg.eval.ks).map_err(eval_failure)?;
    let k = cfg.eval.neighbors;
    let trust = PerModality {
        a: eval::trustworthiness(xa, za.view(), k).map_err(eval_failure)?,
        b: eval::trustworthiness(xb, zb.view(), k).map_err(eval_failure)?,
    };
    let cont = PerModality {
        a: eval::continuity(xa, za.view(), k).map_err(eval_failure)?,
        b: eval::continuity(xb, zb.view(), k).map_err(eval_failure)?,
    };
    Ok(Metrics {
        n: ds.len(),
        mean_r1: eval::mean_r1(za.view(), zb.view()).map_err(eval_failure)?,
        retrieval: vec![i2t, t2i],
        modality_gap: eval::modality_gap(za.view(), zb.view()).map_err(eval_failure)?,
        neighbor_k: k,
        trustworthiness: trust,
        continuity: cont,
        zero_shot: zero_shot(cfg, model)?,
    })
}

pub fn run(cfg: &ExperimentConfig, ckpt: &Path) -> CmdResult<Metrics> {
    let out = cfg.out_dir()?;
    let (model, _) = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let ds = test_set(cfg)?;
    let m = metrics(cfg, &model, &ds)?;
    ensure_dir(out)?;
    write_json(&out.join("metrics.json"), &m)?;
    println!(
        "N={} mean R@1={:.4} gap={:.4} trust(a,b)=({:.4}, {:.4}) continuity(a,b)=({:.4}, {:.4})",
        m.n, m.mean_r1, m.modality_gap, m.trustworthiness.a, m.trustworthiness.b, m.continuity.a, m.continuity.b
    );
    Ok(m)
}
