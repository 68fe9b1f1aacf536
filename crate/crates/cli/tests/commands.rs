use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dove::corpus::{load_image, vocab};
use dove::par::Exec;
use dove::trainloop::{eval_samples, Checkpoint, TrainConfig, Trainer};
use serde_json::Value;

const SMOKE: [&str; 4] = ["--preset", "smoke", "--set", "model.dygen.max_tokens=16"];

fn dove(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dove")).args(args).env_remove("DOVE_OUT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = dove(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    dove(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let p = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&p);
    p
}

/// A smoke-scale pipeline trained once: codec, tokenizer, query stage and a
/// few rendered images.
struct Fixture {
    dir: PathBuf,
}

impl Fixture {
    fn ckpt(&self, stage: &str) -> PathBuf {
        self.dir.join(format!("{stage}.ckpt"))
    }

    fn image(&self, i: usize) -> PathBuf {
        self.dir.join(format!("corpus/images/{i:06}.png"))
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = scratch("fixture");
        let d = s(&dir);
        ok(&[&["train", "--seed", "5", "--out", d][..], &SMOKE].concat());
        let dove = dir.join("dove.ckpt");
        ok(&[&["train-q", "--seed", "5", "--init", s(&dove), "--out", d][..], &SMOKE].concat());
        let corpus = dir.join("corpus");
        ok(&["gen-corpus", "--seed", "1", "--count", "4", "--png", "--preset", "smoke", "--out", s(&corpus)]);
        Fixture { dir }
    })
}

fn manifest_runs(dir: &Path) -> Vec<Value> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    v["runs"].as_array().unwrap().clone()
}

#[test]
fn training_stages_record_their_artifacts() {
    let f = fixture();
    let runs = manifest_runs(&f.dir);
    let commands: Vec<&str> = runs.iter().map(|r| r["command"].as_str().unwrap()).collect();
    assert_eq!(commands, ["train", "train-q"]);
    let cfg = TrainConfig { seed: 5, ..TrainConfig::smoke() }.with_overrides(&["model.dygen.max_tokens=16".into()]).unwrap();
    for r in &runs {
        assert_eq!(r["seed"], 5);
        assert_eq!(r["config_hash"], cfg.hash());
        for file in r["files"].as_array().unwrap() {
            assert!(f.dir.join(file.as_str().unwrap()).is_file(), "{file} listed but missing");
        }
    }
    let files = runs[0]["files"].as_array().unwrap();
    for want in ["codec.ckpt", "dove.ckpt", "codec/metrics.csv", "dove/metrics.csv", "dove-summary.json"] {
        assert!(files.iter().any(|v| v == want), "train manifest lacks {want}");
    }
}

#[test]
fn encode_prints_a_token_record() {
    let f = fixture();
    let text = ok(&["encode", "--ckpt", s(&f.ckpt("dove")), "--image", s(&f.image(0)), "--query", "null"]);
    let v: Value = serde_json::from_str(text.trim()).unwrap();
    let k = 16;
    assert!(v.get("eos_pos").is_some());
    assert_eq!(v["p_eos"].as_array().unwrap().len(), k);
    let slots = v["slots"].as_array().unwrap();
    assert_eq!(slots.len(), k);
    let len = v["length"].as_u64().unwrap() as usize;
    assert_eq!(v["eos_pos"].as_u64().map_or(k, |m| m as usize), len);
    for row in &slots[len..] {
        assert!(row.as_array().unwrap().iter().all(|x| x.as_f64() == Some(0.0)));
    }
    let again = ok(&["encode", "--ckpt", s(&f.ckpt("dove")), "--image", s(&f.image(0))]);
    assert_eq!(text, again);
}

#[test]
fn encode_accepts_queries_and_writes_when_asked() {
    let f = fixture();
    let out = scratch("encode");
    let word = vocab::word(vocab::SHAPE_BASE).unwrap();
    ok(&["encode", "--ckpt", s(&f.ckpt("qdove")), "--image", s(&f.image(1)), "--query", word, "--out", s(&out)]);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("tokens.json")).unwrap()).unwrap();
    assert!(v.get("eos_pos").is_some());
    assert_eq!(manifest_runs(&out)[0]["files"][0], "tokens.json");
}

#[test]
fn sweep_writes_one_row_per_budget_ascending() {
    let f = fixture();
    let out = scratch("sweep");
    ok(&["sweep", "--ckpt", s(&f.ckpt("dove")), "--budgets", "16,1,4,2,8", "--seed", "3", "--count", "6", "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let budgets: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(budgets, [1, 2, 4, 8, 16]);
    let run = &manifest_runs(&out)[0];
    assert_eq!(run["seed"], 3);
    assert_eq!(run["files"][0], "sweep.csv");
}

#[test]
fn reconstruction_grid_runs_left_to_right_by_budget() {
    let f = fixture();
    let out = scratch("reconstruct");
    ok(&["reconstruct", "--ckpt", s(&f.ckpt("dove")), "--image", s(&f.image(2)), "--budgets", "2,4,8,16", "--out", s(&out)]);
    let grid = load_image(out.join("reconstruction.png"), 1).unwrap();
    let ck = Checkpoint::load(f.ckpt("dove")).unwrap();
    let t = Trainer::resume(ck.meta.config.clone(), &ck).unwrap();
    let img = load_image(f.image(2), 1).unwrap();
    let n = img.width();
    assert_eq!((grid.height(), grid.width()), (n, 4 * n));
    for (col, b) in [2, 4, 8, 16].into_iter().enumerate() {
        let (seq, want) = t.model.reconstruct(&t.store, &img, &[vocab::NULL], Some(b)).unwrap();
        assert_eq!(seq.len(), b);
        for y in 0..n {
            for x in 0..n {
                let (g, w) = (grid.pixel(y, col * n + x), want.pixel(y, x));
                for c in 0..3 {
                    assert!((g[c] - w[c].clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-6, "budget {b} at ({y},{x})");
                }
            }
        }
    }
}

#[test]
fn analyses_write_their_reports() {
    let f = fixture();
    let ck = f.ckpt("dove");
    let out = scratch("analyses");
    let o = s(&out);
    ok(&["analyze-length", "--ckpt", s(&ck), "--seed", "2", "--count", "8", "--out", o]);
    let lengths = std::fs::read_to_string(out.join("lengths.csv")).unwrap();
    assert_eq!(lengths.lines().count(), 1 + 16);
    let counted: usize = lengths.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counted, 8);

    let manifest = f.dir.join("corpus/dataset.json");
    let flat = dove(&["correlate", "--ckpt", s(&ck), "--manifest", s(&manifest), "--out", o]);
    assert_eq!(flat.status.code(), Some(2), "a briefly trained model emits one length everywhere");
    assert!(String::from_utf8_lossy(&flat.stderr).contains("zero variance"));
    let varied = calibrated_eos(&ck, &out, 2, 24);
    ok(&["correlate", "--ckpt", s(&varied), "--seed", "2", "--count", "24", "--out", o]);
    let corr = std::fs::read_to_string(out.join("correlation.csv")).unwrap();
    assert_eq!(corr.lines().count(), 1 + 24);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(out.join("correlation.json")).unwrap()).unwrap();
    assert!(r["pearson_r"].as_f64().unwrap().abs() <= 1.0);

    ok(&["pca", "--ckpt", s(&ck), "--image", s(&f.image(3)), "--out", o]);
    let map = load_image(out.join("pca.png"), 1).unwrap();
    assert_eq!((map.height(), map.width()), (16, 32));

    ok(&["probe", "--ckpt", s(&ck), "--seed", "4", "--train", "24", "--val", "12", "--epochs", "5", "--pooling", "max", "--out", o]);
    let probe: Value = serde_json::from_str(&std::fs::read_to_string(out.join("probe.json")).unwrap()).unwrap();
    assert_eq!(probe["classes"], 4);
    assert_eq!(probe["pooling"], "max");
    assert!((0.0..=1.0).contains(&probe["val_accuracy"].as_f64().unwrap()));

    let commands: Vec<Value> = manifest_runs(&out).iter().map(|r| r["command"].clone()).collect();
    assert_eq!(commands, ["analyze-length", "correlate", "pca", "probe"]);
}

/// Copy of `ck` whose EOS bias is shifted so the first slot fires on about
/// half of the `count` held-out images drawn from `seed`.
fn calibrated_eos(ck: &Path, dir: &Path, seed: u64, count: usize) -> PathBuf {
    let c = Checkpoint::load(ck).unwrap();
    let mut t = Trainer::resume(c.meta.config.clone(), &c).unwrap();
    let [w, b] = t.model.gen.eos_params();
    let mut state = 0x9e37_79b9_u32;
    for v in t.store.get_mut(w).data_mut() {
        state ^= state << 13;
        state ^= state >> 17;
        state ^= state << 5;
        *v = (state as f32 / u32::MAX as f32 - 0.5) * 4.0;
    }
    let samples = eval_samples(&t.cfg.corpus, seed, count, Exec::Sequential).unwrap();
    let mut first: Vec<f64> = samples
        .iter()
        .map(|s| {
            let p = t.model.tokens(&t.store, &s.image, &[vocab::NULL]).unwrap().p_eos[0] as f64;
            (p / (1.0 - p)).ln()
        })
        .collect();
    first.sort_by(f64::total_cmp);
    let gate = t.cfg.model.dygen.gate;
    let shift = (gate / (1.0 - gate)).ln() - (first[count / 2 - 1] + first[count / 2]) / 2.0;
    t.store.get_mut(b).data_mut().iter_mut().for_each(|v| *v += shift as f32);
    let path = dir.join("calibrated.ckpt");
    t.checkpoint().save(&path).unwrap();
    path
}

#[test]
fn inspect_reports_stage_and_step() {
    let f = fixture();
    let v: Value = serde_json::from_str(&ok(&["inspect-ckpt", "--ckpt", s(&f.ckpt("qdove"))])).unwrap();
    assert_eq!(v["stage"], "qdove");
    assert_eq!(v["step"], v["total_steps"]);
    assert_eq!(v["seed"], 5);
}

#[test]
fn grad_check_passes_and_logs_every_target() {
    let out = scratch("gradcheck");
    ok(&["grad-check", "--seed", "7", "--fixtures", "1", "--coords", "2", "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("gradcheck.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(csv.contains(",total_loss,"));
    assert_eq!(csv.lines().count(), 1 + dove::nn::op_names().len() + 1);
}

#[test]
fn seeded_runs_repeat_exactly_and_resume_matches() {
    let (a, b, c) = (scratch("repeat-a"), scratch("repeat-b"), scratch("repeat-c"));
    let args = |d: &Path| [&["pretrain-codec", "--seed", "9", "--set", "checkpoint_every=3"][..], &SMOKE, &["--out", s(d)]].concat().iter().map(|v| v.to_string()).collect::<Vec<_>>();
    let run = |d: &Path| ok(&args(d).iter().map(String::as_str).collect::<Vec<_>>());
    run(&a);
    run(&b);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "codec/metrics.csv"), read(&b, "codec/metrics.csv"));
    assert_eq!(read(&a, "codec.ckpt"), read(&b, "codec.ckpt"));

    let mid = a.join("codec/codec-000003.ckpt");
    let mut resume = args(&c);
    resume.extend(["--resume".to_string(), s(&mid).to_string()]);
    ok(&resume.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(read(&c, "codec.ckpt"), read(&a, "codec.ckpt"));
    let tail: Vec<String> = String::from_utf8(read(&a, "codec/metrics.csv")).unwrap().lines().skip(4).map(String::from).collect();
    let resumed: Vec<String> = String::from_utf8(read(&c, "codec/metrics.csv")).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(resumed, tail);
}

#[test]
fn output_root_falls_back_to_the_environment() {
    let out = scratch("env-out");
    let status = Command::new(env!("CARGO_BIN_EXE_dove"))
        .args(["gen-corpus", "--seed", "2", "--count", "3", "--preset", "smoke"])
        .env("DOVE_OUT", &out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("dataset.json").is_file());
    assert_eq!(manifest_runs(&out)[0]["seed"], 2);
}

#[test]
fn usage_errors_exit_with_one() {
    let f = fixture();
    let ck_path = f.ckpt("dove");
    let ck = s(&ck_path);
    assert_eq!(code(&["bogus"]), 1);
    assert_eq!(code(&["sweep", "--ckpt", ck, "--out", "x", "--frobnicate"]), 1);
    assert_eq!(code(&["pretrain-codec", "--preset", "smoke", "--out", "x"]), 1, "missing --seed");
    assert_eq!(code(&["sweep", "--ckpt", ck, "--out", "x"]), 1, "sweep without --seed or --manifest");
    assert_eq!(code(&["gen-corpus", "--seed", "1"]), 1, "missing --out");
    assert_eq!(code(&["encode", "--ckpt", ck, "--image", s(&f.image(0)), "--query", "purple"]), 1);
    assert_eq!(code(&["pca", "--ckpt", ck, "--image", s(&f.image(0)), "--source", "layer:x", "--out", "x"]), 1);
    assert_eq!(code(&["train-q", "--seed", "5", "--preset", "smoke", "--out", "x"]), 1);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let f = fixture();
    let out = scratch("data-errors");
    let o = s(&out);
    let ck_path = f.ckpt("dove");
    let ck = s(&ck_path);
    assert_eq!(code(&["encode", "--ckpt", s(&out.join("missing.ckpt")), "--image", s(&f.image(0))]), 2);
    assert_eq!(code(&["sweep", "--ckpt", ck, "--budgets", "1,17", "--seed", "1", "--out", o]), 2);
    assert_eq!(code(&["train", "--seed", "6", "--init", s(&f.ckpt("codec")), "--out", o]), 2, "config mismatch");
    assert_eq!(code(&[&["train-q", "--seed", "5", "--init", s(&f.ckpt("codec")), "--out", o][..], &SMOKE].concat()), 2);
    assert_eq!(code(&["pretrain-codec", "--seed", "1", "--set", "nonsense=1", "--out", o]), 2);

    std::fs::create_dir_all(&out).unwrap();
    let mut bytes = std::fs::read(f.ckpt("dove")).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 1;
    let bad = out.join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(code(&["inspect-ckpt", "--ckpt", s(&bad)]), 2);
    let big = Command::new(env!("CARGO_BIN_EXE_dove"))
        .args(["gen-corpus", "--seed", "1", "--count", "1", "--png", "--out", s(&out.join("big"))])
        .output()
        .unwrap();
    assert!(big.status.success());
    assert_eq!(code(&["encode", "--ckpt", ck, "--image", s(&out.join("big/images/000000.png"))]), 2, "32px image into 16px model");
}

#[test]
fn non_finite_training_exits_with_three() {
    let out = scratch("nan");
    std::fs::create_dir_all(&out).unwrap();
    let cfg = TrainConfig { seed: 2, ..TrainConfig::smoke() }.with_overrides(&["model.dygen.max_tokens=16".into()]).unwrap();
    let mut t = Trainer::new(cfg).unwrap();
    let id = t.model.codec.encoder[0].w;
    t.store.get_mut(id).data_mut()[0] = f32::NAN;
    let ck = out.join("nan.ckpt");
    t.checkpoint().save(&ck).unwrap();
    let args = [&["pretrain-codec", "--seed", "2", "--resume", s(&ck), "--out", s(&out)][..], &SMOKE].concat();
    let o = dove(&args);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}
