#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_langsep");

pub fn langsep(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(cwd)
        .args(args)
        .env_remove("LANGSEP_THREADS")
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn langsep")
}

/// Runs a command that must succeed and returns its JSON summary line.
pub fn ok(cwd: &Path, args: &[&str]) -> serde_json::Value {
    let out = langsep(cwd, args);
    assert!(
        out.status.success(),
        "langsep {args:?} failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).expect("utf8");
    let line = stdout.lines().last().expect("summary line");
    serde_json::from_str(line).expect("summary is JSON")
}

pub fn write(path: &Path, text: &str) {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).unwrap();
    }
    std::fs::write(path, text).unwrap();
}

/// Tiny train job over a dataset directory.
pub fn tiny_train_toml(data: &Path, iterations: usize) -> String {
    format!(
        r#"[data.source]
directory = "{}"

[model]
channels = 8
hidden_dim = 16
recurrent_state_dim = 16
rff_dim = 8
context_frames = 3
mlp_layers = 2

[train]
iterations = {iterations}
batch_size = 2
seq_seconds = 0.02
item_seconds = 0.1
segments_per_file = 2
lr_start = 1e-3
lr_end = 1e-4
val_every = 5
val_items = 4
"#,
        data.display()
    )
}

/// Every regular file under `dir`, relative path and bytes, sorted.
pub fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
