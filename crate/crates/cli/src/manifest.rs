use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use alft::synthgym::ExperimentConfig;
use anyhow::{Context, Result};
use serde::Serialize;

/// Record of one invocation, written to `<out>/manifests/<command>.json`
/// before any work starts and rewritten when it ends.
#[derive(Serialize)]
pub struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: ExperimentConfig,
    seed: u64,
    git_describe: String,
    started_unix: u64,
    finished_unix: Option<u64>,
    succeeded: Option<bool>,
    outputs: Vec<String>,
    #[serde(skip)]
    path: PathBuf,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn start(command: &str, cfg: &ExperimentConfig, out: &Path) -> Result<Self> {
        let m = Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config: cfg.clone(),
            seed: cfg.synth.seed,
            git_describe: git_describe(),
            started_unix: now(),
            finished_unix: None,
            succeeded: None,
            outputs: Vec::new(),
            path: out.join("manifests").join(format!("{command}.json")),
        };
        m.write()?;
        Ok(m)
    }

    pub fn finish(&mut self, outputs: &[PathBuf], succeeded: bool) -> Result<()> {
        self.finished_unix = Some(now());
        self.succeeded = Some(succeeded);
        self.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
        self.write()
    }

    fn write(&self) -> Result<()> {
        let dir = self.path.parent().expect("manifest path has a parent");
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(&self.path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", self.path.display()))
    }
}
