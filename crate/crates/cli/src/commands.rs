//! Command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use shardmax::checkpoint::{load_encoder, load_shards, save_encoder, save_shards, EncoderManifest};
use shardmax::data::{generate_synthetic, read_bundle, read_json, write_bundle, BundleMeta, InstanceDataset, SemanticLabels};
use shardmax::encoder::{init_random, BNMode, Encoder, EncoderConfig};
use shardmax::eval::{
    embed_dataset, instance_accuracy, knn_eval, linear_probe, CorrelationPoint, CorrelationReport, ProbeConfig,
    Representation,
};
use shardmax::memory::{cost_report, sweep_classes_csv, sweep_workers_csv, CostScenario, GIB};
use shardmax::prior::{extract_prior_features, random_retrieval_probe, similarity_report};
use shardmax::trainer::{ClassMode, InitMode, LabelMode, TrainConfig, Trainer};
use shardmax::{DType, Error, Scalar};

use crate::manifest::{hash_inputs, hash_outputs, with_out, ExperimentManifest, MANIFEST_FILE};
use crate::{
    DTypeArg, Failure, GenDataArgs, InitArg, LabelModeArg, ReplayArgs, ReportCommand, RepresentationArg, TrainArgs,
};

type CmdResult = Result<(), Failure>;

fn usage(message: String) -> Failure {
    Failure { code: 2, message }
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure { code: 3, message: format!("io error on {}: {e}", path.display()) })
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    write_text(path, &(text + "\n"))
}

fn create_out(out: &Path) -> CmdResult {
    fs::create_dir_all(out).map_err(|e| Failure { code: 3, message: format!("cannot create {}: {e}", out.display()) })
}

/// Config files are user input: parse failures are configuration errors.
fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    read_json(path).map_err(|e| match e {
        Error::Json { .. } => usage(e.to_string()),
        other => other.into(),
    })
}

fn bundle_files(dir: &Path) -> Vec<PathBuf> {
    ["features.ltf", "labels.ltf", "meta.json"].iter().map(|f| dir.join(f)).collect()
}

fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files = Vec::new();
    for sub in ["encoder", "classifier"] {
        let d = dir.join(sub);
        if d.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&d)
                .map_err(|e| Failure { code: 3, message: format!("cannot read {}: {e}", d.display()) })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            files.extend(entries);
        }
    }
    Ok(files)
}

struct Record<'a> {
    command: &'a str,
    argv: &'a [String],
    config_path: Option<&'a Path>,
    config: Option<serde_json::Value>,
    out: &'a Path,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
}

fn finish(r: Record<'_>) -> CmdResult {
    let m = ExperimentManifest {
        command: r.command.to_string(),
        argv: r.argv.to_vec(),
        cwd: std::env::current_dir().map_err(|e| Failure { code: 3, message: format!("cannot read working directory: {e}") })?,
        config_path: r.config_path.map(Path::to_path_buf),
        config: r.config,
        out_dir: r.out.to_path_buf(),
        seed: r.seed,
        inputs: hash_inputs(&r.inputs)?,
        outputs: hash_outputs(r.out)?,
    };
    m.write()
}

pub fn gen_data(a: &GenDataArgs, argv: &[String]) -> CmdResult {
    if a.classes == 0 || a.per_class == 0 || a.dim == 0 {
        return Err(usage("--classes, --per-class and --dim must be at least 1".into()));
    }
    if !(a.spread >= 0.0) || !a.spread.is_finite() {
        return Err(usage(format!("--spread must be a finite nonnegative number, got {}", a.spread)));
    }
    create_out(&a.out)?;
    match a.dtype {
        DTypeArg::F32 => gen_typed::<f32>(a)?,
        DTypeArg::F64 => gen_typed::<f64>(a)?,
    }
    println!("wrote {} instances ({} classes × {}) to {}", a.classes * a.per_class, a.classes, a.per_class, a.out.display());
    finish(Record { command: "gen-data", argv, config_path: None, config: None, out: &a.out, seed: Some(a.seed), inputs: vec![] })
}

fn gen_typed<S: Scalar>(a: &GenDataArgs) -> CmdResult {
    let ld = generate_synthetic::<S>(a.classes, a.per_class, a.dim, a.spread, a.seed)?;
    write_bundle(&a.out, &ld.instances, Some(&ld.semantic))?;
    Ok(())
}

fn resolve_train_config(a: &TrainArgs, input_dim: usize) -> Result<TrainConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => read_config::<TrainConfig>(p)?,
        None => TrainConfig {
            encoder: EncoderConfig { input_dim, ..Default::default() },
            ..Default::default()
        },
    };
    if let Some(v) = a.workers {
        cfg.workers = v;
    }
    if let Some(v) = a.init {
        cfg.init_mode = match v {
            InitArg::Random => InitMode::Random,
            InitArg::PriorFixed => InitMode::PriorFixedBn,
            InitArg::PriorRunning => InitMode::PriorRunningBn,
        };
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.topk {
        cfg.k = v;
    }
    if let Some(v) = a.tau {
        cfg.tau = v;
    }
    if let Some(m) = a.sampled_classes {
        cfg.class_mode = ClassMode::Sampled { m };
    }
    if let Some(v) = a.label_mode {
        cfg.label_mode = match v {
            LabelModeArg::Onehot => LabelMode::Onehot,
            LabelModeArg::Smoothed => LabelMode::Smoothed,
        };
    }
    if let Some(v) = a.epochs {
        cfg.total_epochs = v;
    }
    if let Some(v) = a.warmup_epochs {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.dtype {
        cfg.dtype = match v {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        };
    }
    cfg.validate()?;
    if cfg.encoder.input_dim != input_dim {
        return Err(usage(format!("encoder input_dim {} does not match the data dimension {input_dim}", cfg.encoder.input_dim)));
    }
    Ok(cfg)
}

pub fn train(a: &TrainArgs, argv: &[String]) -> CmdResult {
    let meta: BundleMeta = read_json(a.data.join("meta.json"))?;
    let cfg = resolve_train_config(a, meta.input_dim)?;
    let ipb = cfg.instances_per_step();
    if meta.n_instances < ipb {
        return Err(usage(format!("{} instances cannot fill a step of {ipb} instances", meta.n_instances)));
    }
    create_out(&a.out)?;
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(&cfg, a)?,
        DType::F64 => train_typed::<f64>(&cfg, a)?,
    }
    let mut inputs = bundle_files(&a.data);
    inputs.extend(a.config.clone());
    finish(Record {
        command: "train",
        argv,
        config_path: a.config.as_deref(),
        config: Some(serde_json::to_value(&cfg).expect("config serializes")),
        out: &a.out,
        seed: Some(cfg.seed),
        inputs,
    })
}

fn train_typed<S: Scalar>(cfg: &TrainConfig, a: &TrainArgs) -> CmdResult {
    // Semantic labels stay on disk: training never reads them.
    let (data, _) = read_bundle::<S>(&a.data)?;
    write_pretty(&a.out.join("config.json"), cfg)?;
    let mut tr = Trainer::new(cfg.clone(), &data)?;
    let ckpt_root = a.out.join("checkpoints");
    let mut summary = String::from("epoch  mean_loss      lr        comm_bytes\n");
    for _ in 0..cfg.total_epochs {
        let rec = tr.run_epoch()?;
        summary += &format!("{:>5}  {:<13.8} {:<9.6} {}\n", rec.epoch, rec.mean_loss, rec.lr, rec.comm_bytes);
        let due = cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0;
        if due || rec.epoch == cfg.total_epochs {
            let name = format!("epoch_{:04}", rec.epoch);
            let dir = ckpt_root.join(&name);
            save_encoder(dir.join("encoder"), tr.encoder())?;
            save_shards(dir.join("classifier"), tr.plan(), tr.shards())?;
            tr.log_mut().checkpoints.push(name);
        }
    }
    write_text(&a.out.join("train_log.jsonl"), &tr.log().to_jsonl())?;
    write_text(&a.out.join("timings.jsonl"), &tr.log().timings_jsonl())?;
    write_text(&a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn checkpoint_dtype(ckpt: &Path) -> Result<DType, Failure> {
    let m: EncoderManifest = read_json(ckpt.join("encoder").join("manifest.json"))?;
    Ok(m.dtype)
}

fn representation(r: RepresentationArg) -> Representation {
    match r {
        RepresentationArg::Embedding => Representation::Embedding,
        RepresentationArg::Backbone => Representation::Backbone,
    }
}

fn require_labels(labels: Option<SemanticLabels>, dir: &Path) -> Result<SemanticLabels, Failure> {
    labels.ok_or_else(|| Failure { code: 3, message: format!("bundle {} has no semantic labels", dir.display()) })
}

/// Encoder and augmentation settings for random-encoder reports.
fn report_config(config: Option<&Path>, input_dim: usize) -> Result<TrainConfig, Failure> {
    let cfg = match config {
        Some(p) => read_config::<TrainConfig>(p)?,
        None => TrainConfig { encoder: EncoderConfig { input_dim, ..Default::default() }, ..Default::default() },
    };
    cfg.validate()?;
    if cfg.encoder.input_dim != input_dim {
        return Err(usage(format!("encoder input_dim {} does not match the data dimension {input_dim}", cfg.encoder.input_dim)));
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct ProbeReport<'a> {
    checkpoint: &'a Path,
    representation: Representation,
    #[serde(flatten)]
    result: shardmax::eval::ProbeResult,
}

#[derive(Serialize)]
struct KnnReport<'a> {
    checkpoint: &'a Path,
    representation: Representation,
    k: usize,
    top1: f64,
}

#[derive(Serialize)]
struct SimilarityOut {
    checkpoint: Option<shardmax::prior::SimilarityReport>,
    fixed_bn: Option<shardmax::prior::SimilarityReport>,
    running_bn: Option<shardmax::prior::SimilarityReport>,
}

#[derive(Serialize)]
struct RetrievalOut {
    fixed_bn: shardmax::prior::RetrievalResult,
    running_bn: shardmax::prior::RetrievalResult,
}

pub fn report(r: &ReportCommand, argv: &[String]) -> CmdResult {
    match r {
        ReportCommand::Probe(a) => {
            create_out(&a.out)?;
            let (text, _) = match checkpoint_dtype(&a.checkpoint)? {
                DType::F32 => probe_typed::<f32>(a)?,
                DType::F64 => probe_typed::<f64>(a)?,
            };
            print!("{text}");
            let mut inputs = bundle_files(&a.data);
            inputs.extend(checkpoint_files(&a.checkpoint)?);
            finish(Record { command: "report probe", argv, config_path: None, config: None, out: &a.out, seed: Some(a.seed), inputs })
        }
        ReportCommand::Knn(a) => {
            create_out(&a.out)?;
            let text = match checkpoint_dtype(&a.checkpoint)? {
                DType::F32 => knn_typed::<f32>(a)?,
                DType::F64 => knn_typed::<f64>(a)?,
            };
            print!("{text}");
            let mut inputs = bundle_files(&a.data);
            inputs.extend(checkpoint_files(&a.checkpoint)?);
            finish(Record { command: "report knn", argv, config_path: None, config: None, out: &a.out, seed: None, inputs })
        }
        ReportCommand::Similarity(a) => {
            create_out(&a.out)?;
            let dtype = match &a.checkpoint {
                Some(c) => checkpoint_dtype(c)?,
                None => DType::F64,
            };
            let text = match dtype {
                DType::F32 => similarity_typed::<f32>(a)?,
                DType::F64 => similarity_typed::<f64>(a)?,
            };
            print!("{text}");
            let mut inputs = bundle_files(&a.data);
            inputs.extend(a.config.clone());
            if let Some(c) = &a.checkpoint {
                inputs.extend(checkpoint_files(c)?);
            }
            finish(Record {
                command: "report similarity",
                argv,
                config_path: a.config.as_deref(),
                config: None,
                out: &a.out,
                seed: Some(a.seed),
                inputs,
            })
        }
        ReportCommand::Correlation(a) => {
            create_out(&a.out)?;
            let ckpts = list_checkpoints(&a.run)?;
            let Some(first) = ckpts.first() else {
                return Err(Failure { code: 3, message: format!("no checkpoints under {}", a.run.join("checkpoints").display()) });
            };
            let text = match checkpoint_dtype(first)? {
                DType::F32 => correlation_typed::<f32>(a, &ckpts)?,
                DType::F64 => correlation_typed::<f64>(a, &ckpts)?,
            };
            print!("{text}");
            let mut inputs = bundle_files(&a.data);
            for c in &ckpts {
                inputs.extend(checkpoint_files(c)?);
            }
            finish(Record { command: "report correlation", argv, config_path: None, config: None, out: &a.out, seed: Some(a.seed), inputs })
        }
        ReportCommand::Memory(a) => {
            create_out(&a.out)?;
            let mut s = match &a.scenario {
                Some(p) => read_config::<CostScenario>(p)?,
                None => CostScenario::default(),
            };
            if let Some(v) = a.classes {
                s.n_classes = v;
            }
            if let Some(v) = a.workers {
                s.workers = v;
            }
            if let Some(v) = a.embed_dim {
                s.embed_dim = v;
            }
            if let Some(v) = a.batch {
                s.batch = v;
            }
            if let Some(v) = a.bytes {
                s.bytes_per_scalar = v;
            }
            if let Some(v) = a.budget_gib {
                s.budget_bytes = v * GIB;
            }
            if a.no_activations {
                s.include_activations = false;
            }
            let report = cost_report(&s)?;
            write_pretty(&a.out.join("memory.json"), &report)?;
            let table = report.to_table();
            write_text(&a.out.join("memory.txt"), &table)?;
            write_text(&a.out.join("sweep_workers.csv"), &sweep_workers_csv(&s, &a.sweep_workers)?)?;
            write_text(&a.out.join("sweep_classes.csv"), &sweep_classes_csv(&s, &a.sweep_classes)?)?;
            print!("{table}");
            finish(Record {
                command: "report memory",
                argv,
                config_path: a.scenario.as_deref(),
                config: Some(serde_json::to_value(&s).expect("scenario serializes")),
                out: &a.out,
                seed: None,
                inputs: a.scenario.iter().cloned().collect(),
            })
        }
        ReportCommand::Retrieval(a) => {
            create_out(&a.out)?;
            let (data, labels) = read_bundle::<f64>(&a.data)?;
            let labels = require_labels(labels, &a.data)?;
            let cfg = report_config(a.config.as_deref(), data.input_dim())?;
            let fresh = init_random::<f64>(&cfg.encoder, a.seed)?;
            let fixed = random_retrieval_probe(&fresh, &data, &labels)?;
            let mut running = fresh;
            extract_prior_features(&mut running, &data, BNMode::PriorExtract, cfg.extract_batch_size, a.seed, None)?;
            let running = random_retrieval_probe(&running, &data, &labels)?;
            let text = format!(
                "nearest-neighbor semantic retrieval, random encoder (chance {:.4})\n  fixed BN:   {:.4}\n  running BN: {:.4}\n",
                fixed.chance, fixed.top1, running.top1
            );
            write_pretty(&a.out.join("retrieval.json"), &RetrievalOut { fixed_bn: fixed, running_bn: running })?;
            write_text(&a.out.join("retrieval.txt"), &text)?;
            print!("{text}");
            let mut inputs = bundle_files(&a.data);
            inputs.extend(a.config.clone());
            finish(Record {
                command: "report retrieval",
                argv,
                config_path: a.config.as_deref(),
                config: None,
                out: &a.out,
                seed: Some(a.seed),
                inputs,
            })
        }
    }
}

fn probe_typed<S: Scalar>(a: &crate::ProbeArgs) -> Result<(String, f64), Failure> {
    let (data, labels) = read_bundle::<S>(&a.data)?;
    let labels = require_labels(labels, &a.data)?;
    let enc: Encoder<S> = load_encoder(a.checkpoint.join("encoder"))?;
    let rep = representation(a.representation);
    let emb = embed_dataset(&enc, &data, rep)?;
    let mut cfg = ProbeConfig { seed: a.seed, ..Default::default() };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let result = linear_probe(&emb, &labels, &cfg)?;
    let text = format!(
        "linear probe ({rep:?}): top-1 {:.4} on {} held-out, train top-1 {:.4} on {}\n",
        result.top1, result.n_test, result.train_top1, result.n_train
    );
    let top1 = result.top1;
    write_pretty(&a.out.join("probe.json"), &ProbeReport { checkpoint: &a.checkpoint, representation: rep, result })?;
    write_text(&a.out.join("probe.txt"), &text)?;
    Ok((text, top1))
}

fn knn_typed<S: Scalar>(a: &crate::KnnArgs) -> Result<String, Failure> {
    let (data, labels) = read_bundle::<S>(&a.data)?;
    let labels = require_labels(labels, &a.data)?;
    let enc: Encoder<S> = load_encoder(a.checkpoint.join("encoder"))?;
    let rep = representation(a.representation);
    let top1 = knn_eval(&embed_dataset(&enc, &data, rep)?, &labels, a.k)?;
    let text = format!("kNN (k = {}, {rep:?}): top-1 {top1:.4}\n", a.k);
    write_pretty(&a.out.join("knn.json"), &KnnReport { checkpoint: &a.checkpoint, representation: rep, k: a.k, top1 })?;
    write_text(&a.out.join("knn.txt"), &text)?;
    Ok(text)
}

fn similarity_typed<S: Scalar>(a: &crate::SimilarityArgs) -> Result<String, Failure> {
    let (data, _) = read_bundle::<S>(&a.data)?;
    let cfg = report_config(a.config.as_deref(), data.input_dim())?;
    let aug = &cfg.augmentation;
    let out = match &a.checkpoint {
        Some(c) => {
            let enc: Encoder<S> = load_encoder(c.join("encoder"))?;
            SimilarityOut { checkpoint: Some(similarity_report(&enc, &data, aug, a.sample, a.seed)?), fixed_bn: None, running_bn: None }
        }
        None => {
            let mut enc = init_random::<S>(&cfg.encoder, a.seed)?;
            let fixed = similarity_report(&enc, &data, aug, a.sample, a.seed)?;
            extract_prior_features(&mut enc, &data, BNMode::PriorExtract, cfg.extract_batch_size, a.seed, None)?;
            let running = similarity_report(&enc, &data, aug, a.sample, a.seed)?;
            SimilarityOut { checkpoint: None, fixed_bn: Some(fixed), running_bn: Some(running) }
        }
    };
    let mut text = String::from("encoder        mean_intra  mean_inter  gap\n");
    for (name, r) in [("checkpoint", &out.checkpoint), ("fixed BN", &out.fixed_bn), ("running BN", &out.running_bn)] {
        if let Some(r) = r {
            text += &format!("{name:<14} {:<11.6} {:<11.6} {:.6}\n", r.mean_intra, r.mean_inter, r.gap);
        }
    }
    write_pretty(&a.out.join("similarity.json"), &out)?;
    write_text(&a.out.join("similarity.txt"), &text)?;
    Ok(text)
}

fn list_checkpoints(run: &Path) -> Result<Vec<PathBuf>, Failure> {
    let root = run.join("checkpoints");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| Failure { code: 3, message: format!("cannot read {}: {e}", root.display()) })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("epoch_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn correlation_typed<S: Scalar>(a: &crate::CorrelationArgs, ckpts: &[PathBuf]) -> Result<String, Failure> {
    let (data, labels) = read_bundle::<S>(&a.data)?;
    let labels = require_labels(labels, &a.data)?;
    let data: InstanceDataset<S> = data;
    let mut points = Vec::with_capacity(ckpts.len());
    for c in ckpts {
        let name = c.file_name().expect("listed dir").to_string_lossy().to_string();
        let epoch: usize = name
            .trim_start_matches("epoch_")
            .parse()
            .map_err(|_| Failure { code: 3, message: format!("bad checkpoint name {name}") })?;
        let enc: Encoder<S> = load_encoder(c.join("encoder"))?;
        let (_, shards) = load_shards::<S>(c.join("classifier"))?;
        let instance_top1 = instance_accuracy(&enc, &shards, &data, a.instance_sample.map(|m| (m, a.seed)))?;
        let emb = embed_dataset(&enc, &data, Representation::Embedding)?;
        let semantic_top1 = linear_probe(&emb, &labels, &ProbeConfig { seed: a.seed, ..Default::default() })?.top1;
        points.push(CorrelationPoint { checkpoint: name, epoch, instance_top1, semantic_top1 });
    }
    let report = CorrelationReport::new(points)?;
    write_text(&a.out.join("correlation.csv"), &report.to_csv()?)?;
    write_pretty(&a.out.join("correlation.json"), &report)?;
    let text = format!("{} checkpoints, Spearman rank correlation {:.4}\n", report.points.len(), report.spearman);
    write_text(&a.out.join("correlation.txt"), &text)?;
    Ok(text)
}

pub fn replay(a: &ReplayArgs) -> CmdResult {
    let original = ExperimentManifest::read(&a.manifest)?;
    let requested = match &a.out {
        Some(o) => Some(std::path::absolute(o).map_err(|e| usage(format!("bad --out: {e}")))?),
        None => None,
    };
    std::env::set_current_dir(&original.cwd).map_err(|e| Failure {
        code: 3,
        message: format!("cannot enter the original working directory {}: {e}", original.cwd.display()),
    })?;
    let out = requested.unwrap_or_else(|| {
        let mut s = original.out_dir.clone().into_os_string();
        s.push("_replay");
        PathBuf::from(s)
    });
    if out == original.out_dir {
        return Err(usage("replay output must differ from the original output directory".into()));
    }
    let mut argv = with_out(&original.argv, &out);
    // A missing config file is restored from the resolved copy.
    if let (Some(path), Some(cfg)) = (&original.config_path, &original.config) {
        if !path.is_file() {
            create_out(&out)?;
            let restored = out.with_extension("config.json");
            write_pretty(&restored, cfg)?;
            let (flag, old) = if original.command == "report memory" { ("--scenario", path) } else { ("--config", path) };
            for i in 0..argv.len().saturating_sub(1) {
                if argv[i] == flag && Path::new(&argv[i + 1]) == old.as_path() {
                    argv[i + 1] = restored.display().to_string();
                }
            }
        }
    }
    let restored_inputs: Vec<PathBuf> = original.inputs.keys().map(PathBuf::from).filter(|p| p.is_file()).collect();
    let now = hash_inputs(&restored_inputs)?;
    for (path, hash) in &now {
        if original.inputs.get(path) != Some(hash) {
            return Err(Failure { code: 3, message: format!("input {path} changed since the original run") });
        }
    }
    crate::run(argv)?;
    let replayed = ExperimentManifest::read(&out.join(MANIFEST_FILE))?;
    let mut mismatches = Vec::new();
    for (file, hash) in &original.outputs {
        match replayed.outputs.get(file) {
            Some(h) if h == hash => {}
            Some(_) => mismatches.push(format!("{file}: content differs")),
            None => mismatches.push(format!("{file}: missing from replay")),
        }
    }
    for file in replayed.outputs.keys().filter(|f| !original.outputs.contains_key(*f)) {
        mismatches.push(format!("{file}: not in the original run"));
    }
    if mismatches.is_empty() {
        println!("replay of {} matches: {} output files bit-identical", original.command, original.outputs.len());
        Ok(())
    } else {
        Err(Failure { code: 4, message: format!("replay differs from the original:\n  {}", mismatches.join("\n  ")) })
    }
}
