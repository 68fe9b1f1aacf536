use std::path::PathBuf;
use std::process::Command;

const COMMANDS: [&str; 13] = [
    "gen-corpus",
    "pretrain-codec",
    "train",
    "train-q",
    "encode",
    "reconstruct",
    "sweep",
    "probe",
    "pca",
    "analyze-length",
    "correlate",
    "grad-check",
    "inspect-ckpt",
];

fn help(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_dove")).args(args).arg("--help").env_remove("DOVE_OUT").output().unwrap();
    assert!(out.status.success(), "{args:?} --help failed");
    String::from_utf8(out.stdout).unwrap()
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.txt"))
}

fn check(name: &str, text: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, text).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(text, want, "help for `{name}` changed; rerun with UPDATE_GOLDEN=1 to accept");
}

#[test]
fn top_level_help_matches_golden() {
    let text = help(&[]);
    for c in COMMANDS {
        assert!(text.contains(c), "top-level help misses {c}");
    }
    check("dove", &text);
}

#[test]
fn every_command_help_matches_golden() {
    for c in COMMANDS {
        check(c, &help(&[c]));
    }
}

#[test]
fn every_declared_flag_is_documented() {
    for c in COMMANDS {
        let text = help(&[c]);
        let lines: Vec<&str> = text.lines().map(str::trim).collect();
        for (i, line) in lines.iter().enumerate().filter(|(_, l)| l.starts_with("--")) {
            let flag = line.split_whitespace().next().unwrap();
            if flag == "--help" || flag == "--version" {
                continue;
            }
            let inline = line.split_once("  ").map_or("", |(_, d)| d.trim());
            let below = lines[i + 1..].iter().take_while(|l| !l.starts_with('-')).any(|l| !l.is_empty());
            assert!(!inline.is_empty() || below, "{c}: {flag} has no description");
        }
    }
}
