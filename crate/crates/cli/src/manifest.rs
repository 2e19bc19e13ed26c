use std::path::{Path, PathBuf};

use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Run record written to the output directory when a subcommand starts and
/// rewritten when it ends.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub exit_code: Option<i32>,
    pub outputs: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(subcommand: &str, config: Option<&Path>, seed: Option<u64>, out_dir: &Path) -> std::io::Result<Self> {
        let m = Self {
            subcommand: subcommand.to_string(),
            config: config.map(Path::to_path_buf),
            seed,
            out_dir: out_dir.to_path_buf(),
            version: format!("hico {}", env!("CARGO_PKG_VERSION")),
            started_at: now(),
            finished_at: None,
            status: "running".into(),
            exit_code: None,
            outputs: Vec::new(),
        };
        std::fs::create_dir_all(out_dir)?;
        m.write()?;
        Ok(m)
    }

    pub fn finish(mut self, exit_code: i32, outputs: Vec<String>) -> std::io::Result<()> {
        self.finished_at = Some(now());
        self.status = if exit_code == 0 { "ok" } else { "failed" }.into();
        self.exit_code = Some(exit_code);
        self.outputs = outputs;
        self.write()
    }

    fn write(&self) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(self.out_dir.join(MANIFEST_FILE), json + "\n")
    }
}
