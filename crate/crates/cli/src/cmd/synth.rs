use std::path::PathBuf;

use alignlite::rng::child_seed;
use alignlite::store::{self, Manifest, ManifestLayer, PairedDataset};
use alignlite::synth::LatentPairGenerator;
use anyhow::Context;

use crate::args::SynthArgs;
use crate::config::{ExperimentConfig, SweepConfig};
use crate::output::{ensure_dir, write_json};
use crate::{CmdResult, Failure};

fn save_pair(dir: &std::path::Path, name: &str, ds: &PairedDataset) -> CmdResult<(PathBuf, PathBuf)> {
    let a = PathBuf::from(format!("{name}_a.emb"));
    let b = PathBuf::from(format!("{name}_b.emb"));
    store::save_embeddings(dir.join(&a), ds.a(), Some(ds.ids()))?;
    store::save_embeddings(dir.join(&b), ds.b(), Some(ds.ids()))?;
    Ok((a, b))
}

/// Layer `i` of both banks sees the same latent samples with noise that
/// grows with the distance from the middle layer, so the middle pair is the
/// most similar one.
fn write_banks(args: &SynthArgs, dir: &std::path::Path) -> CmdResult<(PathBuf, PathBuf)> {
    let peak = args.layers / 2;
    let ids: Vec<String> = (0..args.n_train).map(|i| format!("bank{i}")).collect();
    store::write_id_list(dir.join("bank_ids.txt"), &ids)?;
    let mut entries_a = Vec::new();
    let mut entries_b = Vec::new();
    for layer in 0..args.layers {
        let noise = args.noise * (1.0 + 4.0 * layer.abs_diff(peak) as f64);
        let generator = LatentPairGenerator::new(args.latent, args.d1, args.d2, noise, child_seed(args.seed, 100 + layer as u64));
        let ds = generator.sample(args.n_train, child_seed(args.seed, 99), "bank")?;
        for (side, m, entries) in [("a", ds.a(), &mut entries_a), ("b", ds.b(), &mut entries_b)] {
            let path = format!("bank_{side}_layer{layer}.emb");
            store::save_embeddings(dir.join(&path), m, Some(&ids))?;
            entries.push(ManifestLayer { layer, path });
        }
    }
    for (side, layers) in [("a", entries_a), ("b", entries_b)] {
        let manifest = Manifest {
            layers,
            sample_ids_path: "bank_ids.txt".into(),
        };
        write_json(&dir.join(format!("bank_{side}.json")), &manifest)?;
    }
    Ok(("bank_a.json".into(), "bank_b.json".into()))
}

pub fn run(args: &SynthArgs) -> CmdResult<()> {
    if args.n_train < 2 || args.n_val < 2 || args.n_test < 2 {
        return Err(Failure::input("every split needs at least 2 pairs"));
    }
    let dir = &args.out;
    ensure_dir(dir)?;
    let generator = LatentPairGenerator::new(args.latent, args.d1, args.d2, args.noise, args.seed);
    let mut cfg = ExperimentConfig {
        seed: Some(args.seed),
        out: Some("runs".into()),
        ..Default::default()
    };
    let splits = [("train", args.n_train, 0u64), ("val", args.n_val, 1), ("test", args.n_test, 2)];
    for (name, n, i) in splits {
        let ds = generator.sample(n, child_seed(args.seed, i), name)?;
        let (a, b) = save_pair(dir, name, &ds)?;
        let d = &mut cfg.data;
        let (sa, sb) = match name {
            "train" => (&mut d.train_a, &mut d.train_b),
            "val" => (&mut d.val_a, &mut d.val_b),
            _ => (&mut d.test_a, &mut d.test_b),
        };
        *sa = Some(a);
        *sb = Some(b);
    }
    if args.layers > 0 {
        let (a, b) = write_banks(args, dir)?;
        cfg.layers.bank_a = Some(a);
        cfg.layers.bank_b = Some(b);
    }
    cfg.model.k = 16.min(args.d1).min(args.d2);
    cfg.train.epochs = 500;
    cfg.train.seed = args.seed;
    cfg.sweep = SweepConfig {
        sizes: [32, 64, 128].into_iter().filter(|&s| s <= args.n_train).collect(),
        repeats: 3,
    };
    let text = toml::to_string_pretty(&cfg).context("serializing config")?;
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
