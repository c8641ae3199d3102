use std::path::Path;

use alignlite::store::{self, EmbeddingFile, Manifest};
use anyhow::Context;

use crate::CmdResult;

const ID_SAMPLE: usize = 3;

fn id_sample(ids: Option<&[String]>) -> String {
    match ids {
        None => "(none)".into(),
        Some(ids) => {
            let head: Vec<&str> = ids.iter().take(ID_SAMPLE).map(String::as_str).collect();
            let more = if ids.len() > ID_SAMPLE { ", ..." } else { "" };
            format!("{}{more}", head.join(", "))
        }
    }
}

/// A decoded file is always finite; decoding rejects NaN and infinities.
fn describe(file: &EmbeddingFile) -> String {
    let m = &file.matrix;
    format!(
        "N={} d={} dtype={:?} ids=[{}] finite=ok",
        m.rows(),
        m.cols(),
        m.dtype(),
        id_sample(file.ids.as_deref())
    )
}

pub fn summary(path: &Path) -> CmdResult<String> {
    if path.extension().is_some_and(|e| e == "json") {
        let manifest = Manifest::read(path)?;
        let bank = store::load_layer_bank(path).with_context(|| format!("loading bank {}", path.display()))?;
        let mut out = format!(
            "manifest {} layers={} N={} ids=[{}]\nlayer\tN\td\tdtype\tpath\n",
            path.display(),
            bank.layers().len(),
            bank.len(),
            id_sample(Some(bank.sample_ids()))
        );
        for (entry, (_, m)) in manifest.layers.iter().zip(bank.layers()) {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:?}\t{}\n",
                entry.layer,
                m.rows(),
                m.cols(),
                m.dtype(),
                entry.path
            ));
        }
        Ok(out)
    } else {
        let file = store::load_embedding_file(path).with_context(|| format!("loading {}", path.display()))?;
        Ok(format!("{} {}\n", path.display(), describe(&file)))
    }
}

pub fn run(path: &Path) -> CmdResult<()> {
    print!("{}", summary(path)?);
    Ok(())
}
