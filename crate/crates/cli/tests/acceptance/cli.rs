//! Running the `magnet` binary from the acceptance criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

pub fn magnet(args: &[&str], env: &[(&str, &str)]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_magnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .envs(env.iter().copied())
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("magnet {args:?} exited with {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("magnet {args:?}: {e}"))
}

pub fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn read_json(p: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
}

pub fn jsonl(p: &Path) -> Result<Vec<Value>, String> {
    let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    text.lines().map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect()
}

/// Synthesizes the planted dataset and prepares it with default settings.
pub fn planted(root: &Path) -> Result<PathBuf, String> {
    let syn = root.join("syn");
    let prep = root.join("prep");
    magnet(&["synth", "--seed", "7", "--out", s(&syn)], &[])?;
    magnet(&["prepare", "--from", s(&syn), "--out", s(&prep)], &[])?;
    Ok(prep)
}

pub fn train(prep: &Path, out: &Path, extra: &[&str], env: &[(&str, &str)]) -> Result<Value, String> {
    let mut args = vec!["train", "--data", s(prep), "--out", s(out)];
    args.extend(extra);
    magnet(&args, env)
}

pub fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten() {
            let p = e.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).expect("readable file");
                out.push((p.strip_prefix(dir).expect("inside dir").to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}
