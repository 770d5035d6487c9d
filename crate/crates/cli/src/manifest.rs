use std::path::Path;
use std::process::Command;

use serde::Serialize;

use crate::config::{config_hash, Flat};

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub args: Vec<String>,
    pub config_hash: String,
    pub config: &'a Flat,
    pub seed: Option<u64>,
    pub git_describe: String,
    pub wall_time_s: f64,
    pub threads: usize,
    pub status: String,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, config: &'a Flat, seed: Option<u64>) -> Self {
        Self {
            command,
            args: std::env::args().skip(1).collect(),
            config_hash: config_hash(config),
            config,
            seed,
            git_describe: git_describe(),
            wall_time_s: 0.0,
            threads: scaffold_rf::parallel::threads(),
            status: "ok".into(),
        }
    }

    pub fn write(&self, out: &Path) -> scaffold_rf::Result<()> {
        let path = out.join(format!("manifest-{}.json", self.command));
        scaffold_rf::io::write_atomic(&path, &serde_json::to_vec_pretty(self)?)
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
