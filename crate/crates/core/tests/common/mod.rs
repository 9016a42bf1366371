#![allow(dead_code)]

pub mod oracles;
pub mod prompts;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use mapl::backbones::fixtures::MANIFEST_FILE;
use mapl::backbones::{build_fixtures, FixtureConfig};

/// Default toy fixtures, built on first use and kept under the cargo target
/// directory so later test runs skip the LM pre-training.
pub fn default_fixtures() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| cached_fixtures("default", &FixtureConfig::default()))
}

/// Small fixtures with a barely trained LM, for plumbing tests.
pub fn quick_config() -> FixtureConfig {
    let mut cfg = FixtureConfig {
        n_train: 120,
        n_eval: 12,
        ..FixtureConfig::default()
    };
    cfg.pretrain.steps = 5;
    cfg
}

pub fn quick_fixtures() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| cached_fixtures("quick", &quick_config()))
}

fn cached_fixtures(name: &str, cfg: &FixtureConfig) -> PathBuf {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("fixtures");
    let dir = root.join(name);
    let expected: Vec<String> = cfg.to_pairs().iter().map(|(k, v)| format!("{k} = {v}")).collect();
    if let Ok(text) = std::fs::read_to_string(dir.join(MANIFEST_FILE)) {
        if expected.iter().all(|line| text.lines().any(|l| l == line)) {
            return dir;
        }
    }
    let started = std::time::Instant::now();
    let fx = build_fixtures(cfg).expect("fixtures build");
    let staging = root.join(format!("{name}.tmp-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&staging);
    fx.write(&staging).expect("fixtures write");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::rename(&staging, &dir).expect("fixtures rename");
    eprintln!(
        "built {name} fixtures in {:.1}s (qualification {:.3})",
        started.elapsed().as_secs_f64(),
        fx.qualification
    );
    dir
}

pub fn mapl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapl"))
        .args(args)
        .env_remove("MAPL_SEED")
        .output()
        .expect("mapl binary runs")
}

pub fn mapl_ok(args: &[&str]) -> String {
    let out = mapl(args);
    assert!(
        out.status.success(),
        "mapl {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}
