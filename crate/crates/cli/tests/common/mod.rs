#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Small enough that every command finishes in well under a second.
pub const TINY: &str = "\
vit.embed_dim = 16
vit.num_layers = 2
vit.num_heads = 2
vit.mlp_ratio = 2
backbone.upstream.steps = 20
tasks.source_samples_per_class = 8
tasks.target_samples_per_class = 6
pretrain.steps = 10
tune.steps = 5
tune.k = 4
";

pub fn pvp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvp"))
        .args(args)
        .current_dir(dir)
        .env_remove("PVP_THREADS")
        .output()
        .expect("pvp runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Runs and insists on success.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = pvp(dir, args);
    assert_eq!(code(&out), 0, "pvp {args:?}\n{}", stderr(&out));
    stdout(&out)
}

pub fn tiny_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
    dir
}

/// Tensor table of a PVPC file, read with nothing but the byte layout.
pub fn raw_pvpc_tensors(bytes: &[u8]) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let u32_at = |p: usize| u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap()) as usize;
    let mut p = 4 + 4 + 1 + 5 * 4;
    let count = u32_at(p);
    p += 4;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes([bytes[p], bytes[p + 1]]) as usize;
        p += 2;
        let name = String::from_utf8(bytes[p..p + len].to_vec()).unwrap();
        p += len;
        let rank = bytes[p] as usize;
        p += 1;
        let shape: Vec<usize> = (0..rank).map(|i| u32_at(p + 4 * i)).collect();
        p += 4 * rank;
        let n: usize = shape.iter().product();
        let vals = (0..n)
            .map(|i| f32::from_le_bytes(bytes[p + 4 * i..p + 4 * i + 4].try_into().unwrap()))
            .collect();
        p += 4 * n;
        out.push((name, shape, vals));
    }
    assert_eq!(p + 4, bytes.len(), "trailing crc");
    out
}
