#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn sara(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sara"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

/// Runs and insists on exit code 0, returning stdout.
pub fn sara_ok(args: &[&str], cwd: &Path) -> String {
    let out = sara(args, cwd);
    assert!(
        out.status.success(),
        "sara {} failed ({:?}): {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

/// A quickly pretrained base checkpoint at `dir/base.stc`.
pub fn small_base(dir: &Path, steps: usize) -> String {
    let steps = steps.to_string();
    sara_ok(
        &["pretrain", "--out", "base.stc", "--steps", &steps, "--size", "256", "--eval-size", "32"],
        dir,
    );
    "base.stc".into()
}

/// `example,position,token,value` rows into a flat vector of values.
pub fn read_logits(path: &Path) -> Vec<f64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}
