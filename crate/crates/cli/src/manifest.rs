use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::exit::CliError;

/// Record of one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub scenario: String,
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub wall_clock: Duration,
    pub exit_code: i32,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(
            s,
            "config = {}",
            self.config.as_ref().map_or_else(|| "(defaults)".to_string(), |p| p.display().to_string())
        );
        let _ = writeln!(s, "scenario = {}", self.scenario);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "files = {}", self.files.join(","));
        let _ = writeln!(s, "wall_clock_s = {:.3}", self.wall_clock.as_secs_f64());
        let _ = writeln!(s, "exit_code = {}", self.exit_code);
        let _ = writeln!(s, "fcpbc_core = {}", fcpbc::VERSION);
        let _ = writeln!(s, "fcpbc_cli = {}", env!("CARGO_PKG_VERSION"));
        s
    }

    /// Writes `manifest.txt` and checks that every listed file exists.
    pub fn write(&mut self) -> Result<(), CliError> {
        if !self.files.iter().any(|f| f == "manifest.txt") {
            self.files.push("manifest.txt".into());
        }
        let path = self.out_dir.join("manifest.txt");
        std::fs::write(&path, self.render()).map_err(|e| CliError::io(&path, e))?;
        self.missing_files().map_or(Ok(()), |m| Err(CliError::config(format!("missing output {m}"))))
    }

    pub fn missing_files(&self) -> Option<String> {
        self.files.iter().find(|f| !self.out_dir.join(f).is_file()).cloned()
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
