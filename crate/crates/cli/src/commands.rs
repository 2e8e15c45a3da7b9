use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use shefu_core::bench::{benchmark, SceneQuery, Scorer};
use shefu_core::checkpoint::{self, CheckpointMeta};
use shefu_core::dataset::records::ImageRecord;
use shefu_core::dataset::{generate_synthetic, io, Dataset, RegionFeature, Split};
use shefu_core::model::Model;
use shefu_core::train::{evaluate, prepare_split, train as run_training};
use shefu_core::{Result, ShefuError};

use crate::config::{sha256_hex, Overrides, RunConfig};
use crate::Common;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";

fn io_fail(what: String) -> impl FnOnce(std::io::Error) -> ShefuError {
    move |source| ShefuError::Io { context: what, source }
}

/// Defaults, then `--config`, then `--set`, then the named flags.
fn resolve(c: &Common, flags: Vec<(&str, Value)>) -> Result<RunConfig> {
    let mut o = Overrides::defaults();
    if let Some(p) = &c.config {
        o.load_file(p)?;
    }
    for pair in &c.set {
        o.set_pair(pair)?;
    }
    if let Some(s) = c.seed {
        o.set("seed", json!(s))?;
    }
    for (k, v) in flags {
        o.set(k, v)?;
    }
    o.resolve()
}

fn out_dir(c: &Common) -> Result<&Path> {
    c.out
        .as_deref()
        .ok_or_else(|| ShefuError::Config("--out is required for this command".into()))
}

/// Refuses to write over anything already at `path` unless forced.
fn claim(path: &Path, force: bool) -> Result<()> {
    let occupied = if path.is_dir() {
        fs::read_dir(path)
            .map_err(io_fail(format!("listing {}", path.display())))?
            .next()
            .is_some()
    } else {
        path.exists()
    };
    if occupied && !force {
        return Err(ShefuError::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_fail(format!("creating {}", parent.display())))?;
    }
    fs::write(path, text).map_err(io_fail(format!("writing {}", path.display())))
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json values serialize") + "\n"
}

/// Fingerprint of every file in a dataset directory.
fn dataset_hash(dir: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_fail(format!("listing {}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut buf = Vec::new();
    for p in names {
        buf.extend_from_slice(p.file_name().unwrap_or_default().as_encoded_bytes());
        buf.push(0);
        buf.extend(fs::read(&p).map_err(io_fail(format!("reading {}", p.display())))?);
    }
    Ok(sha256_hex(&buf))
}

pub fn gen_data(c: &Common, vocab: Option<PathBuf>) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(v) = vocab {
        flags.push(("data.vocab", json!(v.display().to_string())));
    }
    let cfg = resolve(c, flags)?;
    let out = out_dir(c)?;
    claim(out, c.force)?;
    let vocab = cfg.vocab()?;
    let mut data = generate_synthetic(&cfg.synth(), vocab.as_ref())?;
    let hash = cfg.hash();
    data.manifest.config_hash = Some(hash.clone());
    io::save(out, &data)?;
    let flat: serde_json::Map<String, Value> = cfg.flat().into_iter().collect();
    write(&out.join("config.json"), &pretty(&json!({ "config_hash": hash, "config": flat })))?;
    for split in Split::ALL {
        let recs = data.split(split);
        let pos = recs.iter().filter(|r| r.joint_label()).count();
        println!("{:<5} {:>5} samples ({pos} positive)", split.name(), recs.len());
    }
    println!("wrote {} (config_hash {hash})", out.display());
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn train(
    c: &Common,
    data_dir: &Path,
    variant: Option<String>,
    steps: Option<usize>,
    eval_every: Option<usize>,
    seeds: usize,
) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(v) = variant {
        flags.push(("model.variant", json!(v)));
    }
    if let Some(s) = steps {
        flags.push(("train.steps", json!(s)));
    }
    if let Some(e) = eval_every {
        flags.push(("train.eval_every", json!(e)));
    }
    let cfg = resolve(c, flags)?;
    if seeds == 0 {
        return Err(ShefuError::Config("--seeds must be at least 1".into()));
    }
    let out = out_dir(c)?;
    claim(out, c.force)?;
    let data = io::load(data_dir)?;
    let data_hash = dataset_hash(data_dir)?;
    let (d_f, k, v) = (data.manifest.d_f, data.manifest.context_slots, data.vocab.len());

    let first = cfg.train_config(d_f, k, v, cfg.seed)?;
    for w in first.warnings() {
        eprintln!("warning: {w}");
    }
    let splits = Split::ALL
        .iter()
        .map(|&s| prepare_split(&data, s, &first.model))
        .collect::<Result<Vec<_>>>()?;

    let mut accs = Vec::new();
    let mut runs = Vec::new();
    for seed in (0..seeds as u64).map(|i| cfg.seed + i) {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        let hash = run_cfg.hash();
        let tc = run_cfg.train_config(d_f, k, v, seed)?;
        let trained = run_training(&tc, &splits[0], &splits[1], &splits[2])?;
        let mut report = trained.report;
        report.config_hash = hash.clone();

        let dir = if seeds == 1 { out.to_path_buf() } else { out.join(format!("seed_{seed}")) };
        fs::create_dir_all(&dir).map_err(io_fail(format!("creating {}", dir.display())))?;
        let flat: serde_json::Map<String, Value> = run_cfg.flat().into_iter().collect();
        let meta = CheckpointMeta {
            model: tc.model.clone(),
            config_hash: hash.clone(),
            vocab: data.vocab.tokens().to_vec(),
            run: json!({ "config": flat, "dataset_hash": data_hash, "train_config_hash": tc.hash() }),
        };
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &meta, &trained.model.params)?;
        write(&dir.join(METRICS_FILE), &format!("# config_hash {hash}\n{}", report.metrics_csv()))?;
        let mut rep = serde_json::to_value(&report)?;
        rep["dataset_hash"] = json!(data_hash);
        write(&dir.join(REPORT_FILE), &pretty(&rep))?;

        for p in &report.curve {
            println!("seed {seed} step {:>6} val accuracy {:.4} loss {:.4}", p.step, p.accuracy, p.loss);
        }
        println!(
            "seed {seed} best step {} val {:.4} test {:.4} checksum {} -> {}",
            report.best_step,
            report.val_accuracy,
            report.test_accuracy,
            report.param_checksum,
            dir.display()
        );
        accs.push(report.test_accuracy);
        runs.push(json!({ "seed": seed, "config_hash": hash, "test_accuracy": report.test_accuracy }));
    }
    if seeds > 1 {
        let (mean, std) = mean_std(&accs);
        println!("test accuracy over {seeds} seeds: {:.2} ± {:.2} %", 100.0 * mean, 100.0 * std);
        let agg = json!({ "config_hash": cfg.hash(), "dataset_hash": data_hash, "runs": runs, "mean": mean, "std": std });
        write(&out.join("aggregate.json"), &pretty(&agg))?;
    }
    Ok(())
}

/// The checkpoint must have been trained on data shaped like `data`.
fn check_compatible(meta: &CheckpointMeta, data: &Dataset) -> Result<()> {
    let m = &meta.model;
    let mf = &data.manifest;
    if m.d_f != mf.d_f || m.context_slots != mf.context_slots {
        return Err(ShefuError::ArtifactMismatch(format!(
            "checkpoint expects D_f = {}, K = {} but the dataset has D_f = {}, K = {}",
            m.d_f, m.context_slots, mf.d_f, mf.context_slots
        )));
    }
    if meta.vocab.as_slice() != data.vocab.tokens() {
        return Err(ShefuError::ArtifactMismatch(
            "checkpoint vocabulary differs from the dataset vocabulary".into(),
        ));
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s).ok_or_else(|| ShefuError::Config(format!("unknown split {s:?}; expected train, val or test")))
}

fn load_pair(ckpt: &Path, data_dir: &Path) -> Result<(CheckpointMeta, Model<f32>, Dataset)> {
    let (meta, model) = checkpoint::load(ckpt)?;
    let data = io::load(data_dir)?;
    check_compatible(&meta, &data)?;
    Ok((meta, model, data))
}

pub fn eval(c: &Common, ckpt: &Path, data_dir: &Path, splits: &[String]) -> Result<()> {
    let splits = splits.iter().map(|s| parse_split(s)).collect::<Result<Vec<_>>>()?;
    let (meta, model, data) = load_pair(ckpt, data_dir)?;
    if let Some(out) = &c.out {
        claim(&out.join("eval.json"), c.force)?;
    }
    let mut rows = Vec::new();
    for split in splits {
        let samples = prepare_split(&data, split, &model.config)?;
        if samples.is_empty() {
            return Err(ShefuError::ArtifactMismatch(format!("{} split is empty", split.name())));
        }
        let e = evaluate(&model, &samples)?;
        println!(
            "{:<5} accuracy {:.6} ({}/{}) loss {:.6} config_hash {}",
            split.name(),
            e.accuracy,
            e.correct,
            e.total,
            e.loss,
            meta.config_hash
        );
        rows.push(json!({
            "split": split.name(),
            "accuracy": e.accuracy,
            "correct": e.correct,
            "total": e.total,
            "loss": e.loss,
        }));
    }
    if let Some(out) = &c.out {
        write(&out.join("eval.json"), &pretty(&json!({ "config_hash": meta.config_hash, "rows": rows })))?;
    }
    Ok(())
}

/// Regions of one image, highest detector confidence first.
fn ranked_regions(data: &Dataset, image: &ImageRecord) -> Result<Vec<(u64, RegionFeature)>> {
    let mut ids = image.region_ids.clone();
    ids.sort_by(|a, b| {
        let conf = |id: &u64| data.regions.get(id).map_or(0.0, |r| r.confidence);
        conf(b).total_cmp(&conf(a)).then(a.cmp(b))
    });
    ids.into_iter().map(|id| Ok((id, data.region_feature(id)?))).collect()
}

fn ground_truth(image: &ImageRecord, ids: &[(u64, RegionFeature)]) -> Vec<usize> {
    ids.iter()
        .enumerate()
        .filter(|(_, (id, _))| {
            image
                .region_ids
                .iter()
                .position(|r| r == id)
                .is_some_and(|k| image.region_objects[k] == image.gt_object)
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn score(c: &Common, ckpt: &Path, data_dir: &Path, split: &str, scene: Option<u64>, brute: bool) -> Result<()> {
    let split = parse_split(split)?;
    let (meta, model, data) = load_pair(ckpt, data_dir)?;
    let rec = data
        .scenes
        .iter()
        .find(|s| match scene {
            Some(id) => s.id == id,
            None => s.split == split,
        })
        .ok_or_else(|| ShefuError::Config(match scene {
            Some(id) => format!("no scene {id} in the dataset"),
            None => format!("no scenes in the {} split", split.name()),
        }))?;
    let targets = ranked_regions(&data, &rec.target_image)?;
    let dests = ranked_regions(&data, &rec.dest_image)?;
    let k = model.config.context_slots;
    let q = SceneQuery {
        instruction: rec.instruction.clone(),
        targets: targets.iter().map(|r| r.1.clone()).collect(),
        dests: dests.iter().map(|r| r.1.clone()).collect(),
        target_context: targets.iter().take(k).map(|r| r.1.clone()).collect(),
        dest_context: dests.iter().take(k).map(|r| r.1.clone()).collect(),
    };
    let scorer = Scorer::new(&model, &data.vocab);
    let decision = if model.variant().is_factorized() {
        scorer.score_candidates(&q)?
    } else {
        scorer.brute_force_pairs(&q)?
    };
    let mut out = json!({
        "config_hash": meta.config_hash,
        "scene": rec.id,
        "instruction": rec.instruction,
        "target_regions": targets.iter().map(|r| r.0).collect::<Vec<_>>(),
        "dest_regions": dests.iter().map(|r| r.0).collect::<Vec<_>>(),
        "ground_truth_targets": ground_truth(&rec.target_image, &targets),
        "ground_truth_dests": ground_truth(&rec.dest_image, &dests),
        "decision": decision,
    });
    if brute && model.variant().is_factorized() {
        out["brute_force"] = serde_json::to_value(scorer.brute_force_pairs(&q)?)?;
    }
    let text = pretty(&out);
    print!("{text}");
    if let Some(dir) = &c.out {
        claim(&dir.join("score.json"), c.force)?;
        write(&dir.join("score.json"), &text)?;
    }
    Ok(())
}

pub fn bench(c: &Common, ckpt: &Path, m: Option<usize>, n: Option<usize>, repeats: Option<usize>) -> Result<()> {
    let mut flags = Vec::new();
    for (k, v) in [("bench.M", m), ("bench.N", n), ("bench.repeats", repeats)] {
        if let Some(v) = v {
            flags.push((k, json!(v)));
        }
    }
    let cfg = resolve(c, flags)?;
    let (meta, model) = checkpoint::load(ckpt)?;
    let vocab = meta.vocab()?;
    if let Some(dir) = &c.out {
        claim(&dir.join("bench.json"), c.force)?;
    }
    let b = &cfg.bench;
    let report = benchmark(&model, &vocab, b.m, b.n, b.repeats, cfg.seed)?;
    let mut v = serde_json::to_value(&report)?;
    v["config_hash"] = json!(meta.config_hash);
    let text = pretty(&v);
    print!("{text}");
    if let Some(dir) = &c.out {
        write(&dir.join("bench.json"), &text)?;
    }
    Ok(())
}
