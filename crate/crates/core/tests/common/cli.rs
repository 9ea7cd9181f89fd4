//! Helpers for driving the command-line binary.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

pub fn octnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octnet")).args(args).output().expect("spawn octnet")
}

/// Runs the binary and panics with its stderr unless it exits 0.
pub fn octnet_ok(args: &[&str]) -> String {
    let out = octnet(args);
    assert!(out.status.success(), "octnet {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Names of files that differ between two trees (or exist in only one).
pub fn tree_diff(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
