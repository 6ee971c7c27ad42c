use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use ssd_core::experiment::{ExperimentConfig, ReportFormat};
use ssd_core::train::FORMAT_VERSION;

use crate::error::CliError;

/// Version of the manifest and report layout.
pub const MANIFEST_VERSION: u32 = 1;

/// An output directory that refuses to overwrite files unless forced.
pub struct RunDir {
    dir: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    /// Creates `dir` and checks that none of `files` exist yet (unless `force`).
    pub fn open(dir: &Path, force: bool, files: &[String]) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        if !force {
            if let Some(existing) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
                return Err(CliError::Runtime(format!(
                    "refusing to overwrite {}; pass --force to replace existing outputs",
                    existing.display()
                )));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(p, text)?;
        Ok(())
    }

    pub fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_csv<S: Serialize>(&mut self, name: &str, rows: &[S]) -> Result<(), CliError> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(p)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// A CSV with an explicit header and pre-rendered records.
    pub fn write_records(&mut self, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv` and/or `<stem>.json` per the configured formats.
    pub fn write_report<R: Serialize, S: Serialize>(
        &mut self,
        stem: &str,
        formats: &[ReportFormat],
        rows: &[R],
        full: &S,
    ) -> Result<(), CliError> {
        for f in formats {
            match f {
                ReportFormat::Csv => self.write_csv(&format!("{stem}.csv"), rows)?,
                ReportFormat::Json => self.write_json(&format!("{stem}.json"), full)?,
            }
        }
        Ok(())
    }

    /// The resolved configuration and a manifest listing every file written so far.
    pub fn finish(
        mut self,
        prefix: &str,
        command: &str,
        cfg: &ExperimentConfig,
        inputs: BTreeMap<String, String>,
    ) -> Result<(), CliError> {
        let config_name = format!("{prefix}config.toml");
        self.write_text(&config_name, &toml::to_string(cfg)?)?;
        let manifest = Manifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            checkpoint_format_version: FORMAT_VERSION,
            seeds: Seeds::of(cfg),
            inputs,
            outputs: self.written.clone(),
            config: cfg,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(self.dir.join(format!("{prefix}manifest.json")), text)?;
        Ok(())
    }
}

/// File names a command will create, for the overwrite check.
pub fn planned(prefix: &str, names: &[&str], report_stem: Option<&str>, formats: &[ReportFormat]) -> Vec<String> {
    let mut out: Vec<String> = names.iter().map(|n| n.to_string()).collect();
    if let Some(stem) = report_stem {
        for f in formats {
            out.push(match f {
                ReportFormat::Csv => format!("{stem}.csv"),
                ReportFormat::Json => format!("{stem}.json"),
            });
        }
    }
    out.push(format!("{prefix}config.toml"));
    out.push(format!("{prefix}manifest.json"));
    out
}

#[derive(Serialize)]
struct Manifest<'a> {
    manifest_version: u32,
    tool_version: &'static str,
    command: &'a str,
    checkpoint_format_version: u32,
    seeds: Seeds,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct Seeds {
    model: u64,
    teacher: u64,
    student: u64,
    split: u64,
    synthetic: u64,
}

impl Seeds {
    fn of(cfg: &ExperimentConfig) -> Self {
        Self {
            model: cfg.model.seed,
            teacher: cfg.teacher.seed,
            student: cfg.student_train_config().seed,
            split: cfg.data.split_seed,
            synthetic: cfg.data.synthetic.seed,
        }
    }
}
