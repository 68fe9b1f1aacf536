mod args;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use args::{Cli, Command, Config, CorpusKind, PoolingArg, Preset, SplitArg, Workers};
use dove::analysis::{
    budget_sweep, complexity_correlation, hstack, length_distribution, linear_probe, pca_semantics, probe_features,
    AnalysisError, PcaSource, Pooling, ProbeConfig,
};
use dove::corpus::{build_manifest, load_image, save_image, vocab, CorpusError, CorpusParams, DatasetManifest, Image, Split};
use dove::nn::{check_all_ops, TensorError};
use dove::par::{with_workers, Exec};
use dove::trainloop::{
    check_composite, eval_samples, manifest_samples, Checkpoint, CheckpointError, MetricsLog, Sample, Stage,
    TrainConfig, TrainError, Trainer,
};
use output::OutDir;

const OP_TOLERANCE: f64 = 1e-4;
const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Data(other.to_string()),
        }
    }
}

macro_rules! data_failure {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Data(e.to_string())
            }
        }
    )*};
}

data_failure!(CorpusError, CheckpointError, TensorError, AnalysisError, std::io::Error);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenCorpus(a) => parallel(&a.workers.clone(), |exec| gen_corpus(a, exec)),
        Command::PretrainCodec(a) => parallel(&a.workers.clone(), |exec| train(Stage::Codec, a, exec)),
        Command::Train(a) => parallel(&a.workers.clone(), |exec| train(Stage::Dove, a, exec)),
        Command::TrainQ(a) => parallel(&a.workers.clone(), |exec| train(Stage::Qdove, a, exec)),
        Command::Encode(a) => encode(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Sweep(a) => parallel(&a.data.workers.clone(), |exec| sweep(a, exec)),
        Command::Probe(a) => parallel(&a.workers.clone(), |exec| probe(a, exec)),
        Command::Pca(a) => pca(a),
        Command::AnalyzeLength(a) => parallel(&a.workers.clone(), |exec| analyze_length(a, exec)),
        Command::Correlate(a) => parallel(&a.workers.clone(), |exec| correlate(a, exec)),
        Command::GradCheck(a) => grad_check(a),
        Command::InspectCkpt(a) => inspect(&a.ckpt),
    }
}

fn parallel(w: &Workers, f: impl FnOnce(Exec) -> Result<(), Failure> + Send) -> Result<(), Failure> {
    let exec = if w.workers == 1 { Exec::Sequential } else { Exec::Parallel };
    with_workers(w.workers, || f(exec))
}

fn training_config(c: &Config, seed: u64) -> Result<TrainConfig, Failure> {
    let base = match (&c.config, c.preset) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Preset::Default) => TrainConfig::default(),
        (None, Preset::Smoke) => TrainConfig::smoke(),
    };
    let mut cfg = base.with_overrides(&c.overrides)?;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_query(text: &str) -> Result<Vec<usize>, Failure> {
    vocab::parse(text).ok_or_else(|| {
        Failure::Usage(format!("query `{text}` must be 1 to {} known words (or `null`)", vocab::MAX_PREFIX))
    })
}

fn parse_budgets(budgets: &[usize], k: usize) -> Result<Vec<usize>, Failure> {
    let mut b = budgets.to_vec();
    b.sort_unstable();
    b.dedup();
    if b.is_empty() || b[0] == 0 || b[b.len() - 1] > k {
        return Err(Failure::Data(format!("budgets {budgets:?} must lie in 1..={k} for this checkpoint")));
    }
    Ok(b)
}

fn load_trainer(path: &Path) -> Result<Trainer, Failure> {
    let ck = Checkpoint::load(path)?;
    Ok(Trainer::resume(ck.meta.config.clone(), &ck)?)
}

fn load_input(t: &Trainer, path: &Path) -> Result<Image, Failure> {
    let c = &t.cfg.model.codec;
    let img = load_image(path, c.patch)?;
    if img.height() != c.image_size || img.width() != c.image_size {
        return Err(Failure::Data(format!(
            "{} is {}x{}; this model takes {}x{} images",
            path.display(),
            img.height(),
            img.width(),
            c.image_size,
            c.image_size
        )));
    }
    Ok(img)
}

fn dataset(t: &Trainer, src: &args::Source, exec: Exec) -> Result<Vec<Sample>, Failure> {
    let samples = match (&src.manifest, src.seed) {
        (Some(path), _) => {
            let m = DatasetManifest::load(path)?;
            let root = path.parent().unwrap_or(Path::new("."));
            manifest_samples(&m, root, t.cfg.model.codec.patch, exec)?
        }
        (None, Some(seed)) => eval_samples(&t.cfg.corpus, seed, src.count, exec)?,
        (None, None) => return Err(Failure::Usage("either --seed or --manifest is required".into())),
    };
    if samples.is_empty() {
        return Err(Failure::Data("dataset is empty".into()));
    }
    let size = t.cfg.model.codec.image_size;
    if let Some(s) = samples.iter().find(|s| s.image.height() != size || s.image.width() != size) {
        return Err(Failure::Data(format!("image of seed {} is not {size}x{size}", s.seed)));
    }
    Ok(samples)
}

fn gen_corpus(a: args::GenCorpus, exec: Exec) -> Result<(), Failure> {
    let cfg = training_config(&a.config, a.seed)?;
    let params = match a.kind {
        CorpusKind::Scenes => cfg.corpus.clone(),
        CorpusKind::Shapes => shape_params(cfg.corpus.canvas_size),
    };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let manifest = build_manifest(&params, split, a.count, a.seed)?;
    let mut out = OutDir::create(&a.out.out)?;
    if a.png {
        let dir = out.dir("images")?;
        let results = exec.range(manifest.len(), |i| -> Result<(), CorpusError> {
            let img = manifest.image(i, &dir, 1)?;
            save_image(&img, dir.join(format!("{i:06}.png")))
        });
        results.into_iter().collect::<Result<Vec<_>, _>>()?;
        out.record_tree("images");
    }
    manifest.save(out.file("dataset.json"))?;
    println!("{} images, {} classes -> {}", manifest.len(), manifest.classes, a.out.out.join("dataset.json").display());
    out.finish("gen-corpus", Some(a.seed), Some(cfg.hash()))
}

/// Single-object shape scenes scaled to the canvas.
fn shape_params(canvas: usize) -> CorpusParams {
    let base = CorpusParams::shape_probe();
    let scale = |v: usize| (v * canvas / base.canvas_size).max(3);
    CorpusParams { canvas_size: canvas, min_size: scale(base.min_size), max_size: scale(base.max_size), ..base }
}

fn expect_stage(ck: &Checkpoint, want: Stage, flag: &str) -> Result<(), Failure> {
    if ck.meta.stage != want {
        return Err(Failure::Data(format!("{flag} expects a {} checkpoint, got {}", want.name(), ck.meta.stage.name())));
    }
    Ok(())
}

fn train(stage: Stage, a: args::Train, exec: Exec) -> Result<(), Failure> {
    let cfg = training_config(&a.config, a.seed)?;
    let mut out = OutDir::create(&a.out.out)?;
    let mut trainer = match (&a.resume, &a.init, stage) {
        (Some(path), _, _) => {
            let ck = Checkpoint::load(path)?;
            expect_stage(&ck, stage, "--resume")?;
            Trainer::resume(cfg.clone(), &ck)?
        }
        (None, None, Stage::Codec) => Trainer::new(cfg.clone())?,
        (None, None, Stage::Dove) => {
            let codec = run_stage(Trainer::new(cfg.clone())?, &mut out, exec)?;
            Trainer::from_checkpoint(cfg.clone(), &codec, Stage::Dove)?
        }
        (None, None, Stage::Qdove) => {
            return Err(Failure::Usage("train-q needs --init with a trained dove checkpoint, or --resume".into()))
        }
        (None, Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            let prev = match stage {
                Stage::Qdove => Stage::Dove,
                _ => Stage::Codec,
            };
            if stage == Stage::Codec {
                return Err(Failure::Usage("pretrain-codec starts from scratch; use --resume to continue".into()));
            }
            expect_stage(&ck, prev, "--init")?;
            Trainer::from_checkpoint(cfg.clone(), &ck, stage)?
        }
    };
    trainer.exec = exec;
    run_stage(trainer, &mut out, exec)?;
    let command = match stage {
        Stage::Codec => "pretrain-codec",
        Stage::Dove => "train",
        Stage::Qdove => "train-q",
    };
    out.finish(command, Some(cfg.seed), Some(cfg.hash()))
}

/// Trains the trainer's stage to the end and writes its checkpoint, logs
/// and held-out summary.
fn run_stage(mut t: Trainer, out: &mut OutDir, exec: Exec) -> Result<Checkpoint, Failure> {
    t.exec = exec;
    let name = t.stage.name();
    let mut log = MetricsLog::to_dir(out.dir(name)?)?;
    t.run(&mut log)?;
    let ck = t.checkpoint();
    ck.save(out.file(&format!("{name}.ckpt")))?;
    let summary = t.summary()?;
    out.write_json(&format!("{name}-summary.json"), &serde_json::to_value(&summary).expect("summary serializes"))?;
    out.record_tree(name);
    let eos = summary.heldout_eos_mean.map_or(String::new(), |m| format!(", mean length {m:.2}"));
    println!("{name}: {} steps, held-out MSE {:.5} ({:.2} dB){eos}", summary.steps, summary.heldout_mse, summary.heldout_psnr);
    Ok(ck)
}

fn encode(a: args::Encode) -> Result<(), Failure> {
    let query = parse_query(&a.query)?;
    let t = load_trainer(&a.ckpt)?;
    let img = load_input(&t, &a.image)?;
    let seq = t.model.tokens(&t.store, &img, &query)?;
    let record = json!({ "eos_pos": seq.eos_pos, "length": seq.len(), "p_eos": seq.p_eos, "slots": serde_json::to_value(&seq).expect("tokens serialize")["slots"] });
    println!("{}", serde_json::to_string(&record).expect("json value serializes"));
    if let Some(dir) = &a.out {
        let mut out = OutDir::create(dir)?;
        out.write_json("tokens.json", &record)?;
        out.finish("encode", None, Some(t.cfg.hash()))?;
    }
    Ok(())
}

fn reconstruct(a: args::Reconstruct) -> Result<(), Failure> {
    let query = parse_query(&a.query)?;
    let t = load_trainer(&a.ckpt)?;
    let budgets = parse_budgets(&a.budgets, t.model.k())?;
    let img = load_input(&t, &a.image)?;
    let mut columns = Vec::with_capacity(budgets.len());
    for &b in &budgets {
        let (_, r) = t.model.reconstruct(&t.store, &img, &query, Some(b))?;
        columns.push(r);
    }
    let mut out = OutDir::create(&a.out.out)?;
    save_image(&hstack(&columns), out.file("reconstruction.png"))?;
    let csv: String = std::iter::once("column,budget\n".to_string())
        .chain(budgets.iter().enumerate().map(|(i, b)| format!("{i},{b}\n")))
        .collect();
    out.write("reconstruction.csv", &csv)?;
    println!("budgets {budgets:?} -> {}", a.out.out.join("reconstruction.png").display());
    out.finish("reconstruct", None, Some(t.cfg.hash()))
}

fn sweep(a: args::Sweep, exec: Exec) -> Result<(), Failure> {
    let query = parse_query(&a.data.query)?;
    let t = load_trainer(&a.data.ckpt)?;
    let budgets = parse_budgets(&a.budgets, t.model.k())?;
    let samples = dataset(&t, &a.data.source, exec)?;
    let report = budget_sweep(&t.model, &t.store, &samples, &query, &budgets, exec)?;
    if report.rows.iter().any(|r| !r.mean_mse.is_finite()) {
        return Err(Failure::Numeric("non-finite reconstruction error in sweep".into()));
    }
    let mut out = OutDir::create(&a.data.out.out)?;
    out.write("sweep.csv", &report.to_csv())?;
    for r in &report.rows {
        println!("budget {:>3}: median MSE {:.5}, mean PSNR {:.2} dB", r.budget, r.median_mse, r.mean_psnr);
    }
    out.finish("sweep", a.data.source.seed, Some(t.cfg.hash()))
}

fn probe(a: args::Probe, exec: Exec) -> Result<(), Failure> {
    let query = parse_query(&a.query)?;
    let t = load_trainer(&a.ckpt)?;
    let patch = t.cfg.model.codec.patch;
    let (train, val, classes) = match (&a.train_manifest, &a.val_manifest) {
        (Some(tp), Some(vp)) => {
            let (tm, vm) = (DatasetManifest::load(tp)?, DatasetManifest::load(vp)?);
            let root = |p: &PathBuf| p.parent().unwrap_or(Path::new(".")).to_path_buf();
            let classes = tm.classes.max(vm.classes);
            (manifest_samples(&tm, &root(tp), patch, exec)?, manifest_samples(&vm, &root(vp), patch, exec)?, classes)
        }
        _ => {
            let params = shape_params(t.cfg.model.codec.image_size);
            let tm = build_manifest(&params, Split::Train, a.train, a.seed)?;
            let vm = build_manifest(&params, Split::Val, a.val, a.seed)?;
            let here = Path::new(".");
            (manifest_samples(&tm, here, patch, exec)?, manifest_samples(&vm, here, patch, exec)?, tm.classes)
        }
    };
    let pooling = match a.pooling {
        PoolingArg::Mean => Pooling::Mean,
        PoolingArg::Max => Pooling::Max,
    };
    let ft = probe_features(&t.model, &t.store, &train, &query, a.layer, pooling, exec)?;
    let fv = probe_features(&t.model, &t.store, &val, &query, a.layer, pooling, exec)?;
    let yt: Vec<usize> = train.iter().map(|s| s.label).collect();
    let yv: Vec<usize> = val.iter().map(|s| s.label).collect();
    let cfg = ProbeConfig { epochs: a.epochs, hidden: a.hidden, seed: a.seed, ..ProbeConfig::default() };
    let mut result = linear_probe((&ft, &yt), (&fv, &yv), classes, &cfg)?;
    result.pooling = Some(pooling);
    result.layer = Some(a.layer);
    let mut out = OutDir::create(&a.out.out)?;
    out.write_json("probe.json", &serde_json::to_value(&result).expect("probe result serializes"))?;
    println!(
        "{classes} classes: train accuracy {:.3}, val accuracy {:.3}",
        result.train_accuracy, result.val_accuracy
    );
    out.finish("probe", Some(a.seed), Some(t.cfg.hash()))
}

fn pca(a: args::Pca) -> Result<(), Failure> {
    let query = parse_query(&a.query)?;
    let source = match a.source.as_str() {
        "decoder-grid" => PcaSource::DecoderGrid,
        s => match s.strip_prefix("layer:").and_then(|n| n.parse().ok()) {
            Some(l) => PcaSource::GeneratorLayer(l),
            None => return Err(Failure::Usage(format!("--source `{s}`: expected decoder-grid or layer:N"))),
        },
    };
    let t = load_trainer(&a.ckpt)?;
    let img = load_input(&t, &a.image)?;
    let map = pca_semantics(&t.model, &t.store, &img, &query, source)?;
    let mut out = OutDir::create(&a.out.out)?;
    save_image(&hstack(&[img, map]), out.file("pca.png"))?;
    println!("{}", a.out.out.join("pca.png").display());
    out.finish("pca", None, Some(t.cfg.hash()))
}

fn analyze_length(a: args::Dataset, exec: Exec) -> Result<(), Failure> {
    let query = parse_query(&a.query)?;
    let t = load_trainer(&a.ckpt)?;
    let samples = dataset(&t, &a.source, exec)?;
    let h = length_distribution(&t.model, &t.store, &samples, &query, exec)?;
    let mut out = OutDir::create(&a.out.out)?;
    out.write("lengths.csv", &h.to_csv())?;
    let summary = json!({
        "images": h.lengths.len(), "k": h.k, "mean": h.mean, "std": h.std,
        "min": h.min, "max": h.max, "distinct": h.distinct,
    });
    out.write_json("lengths-summary.json", &summary)?;
    println!("mean length {:.2} (std {:.2}), range {}..={}, {} distinct", h.mean, h.std, h.min, h.max, h.distinct);
    out.finish("analyze-length", a.source.seed, Some(t.cfg.hash()))
}

fn correlate(a: args::Dataset, exec: Exec) -> Result<(), Failure> {
    let query = parse_query(&a.query)?;
    let t = load_trainer(&a.ckpt)?;
    let samples = dataset(&t, &a.source, exec)?;
    let report = complexity_correlation(&t.model, &t.store, &samples, &query, exec)?;
    let mut out = OutDir::create(&a.out.out)?;
    out.write("correlation.csv", &report.to_csv())?;
    out.write_json("correlation.json", &json!({ "pearson_r": report.r, "images": report.lengths.len() }))?;
    println!("pearson r = {:.3} over {} images", report.r, report.lengths.len());
    out.finish("correlate", a.source.seed, Some(t.cfg.hash()))
}

fn grad_check(a: args::GradCheck) -> Result<(), Failure> {
    let mut csv = String::from("seed,target,max_rel_error,worst_param,coords,pass\n");
    let mut failures = 0;
    let mut row = |seed: u64, target: &str, r: &dove::nn::GradCheckReport, tol: f64| {
        let pass = r.max_rel_error < tol;
        failures += usize::from(!pass);
        csv += &format!("{seed},{target},{:e},{},{},{pass}\n", r.max_rel_error, r.worst_param, r.coords_checked);
    };
    for seed in a.seed..a.seed + a.fixtures {
        for (op, r) in check_all_ops(seed)? {
            row(seed, op, &r, OP_TOLERANCE);
        }
        let r = check_composite(seed, a.coords)?;
        row(seed, "total_loss", &r, COMPOSITE_TOLERANCE);
    }
    let mut out = OutDir::create(&a.out.out)?;
    out.write("gradcheck.csv", &csv)?;
    out.finish("grad-check", Some(a.seed), None)?;
    let total = csv.lines().count() - 1;
    println!("{} of {total} checks within tolerance", total - failures);
    if failures > 0 {
        return Err(Failure::Numeric(format!("{failures} gradient checks exceeded tolerance")));
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let ck = Checkpoint::load(path)?;
    let params: usize = ck.tensors.iter().filter(|(n, _)| !n.contains('/')).map(|(_, t)| t.len()).sum();
    let info = json!({
        "stage": ck.meta.stage,
        "step": ck.meta.step,
        "total_steps": ck.meta.config.steps(ck.meta.stage),
        "seed": ck.meta.config.seed,
        "config_hash": ck.meta.config_hash,
        "model_hash": ck.meta.model_hash,
        "tensors": ck.tensors.len(),
        "parameters": params,
        "thresholds": {
            "rec": ck.meta.thresholds.rec.mean(),
            "rel": ck.meta.thresholds.rel.mean(),
            "irr": ck.meta.thresholds.irr.mean(),
        },
        "config": ck.meta.config,
    });
    println!("{}", serde_json::to_string_pretty(&info).expect("json value serializes"));
    Ok(())
}
