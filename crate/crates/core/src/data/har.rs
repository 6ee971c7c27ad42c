use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{HAR_CHANNELS, HAR_CLASSES, HAR_LENGTH};
use crate::parallel;

/// Inertial-signal file stems in channel order.
pub const HAR_CHANNEL_NAMES: [&str; HAR_CHANNELS] = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
];

/// Row counts of the official archive.
pub const HAR_TRAIN_SAMPLES: usize = 7352;
pub const HAR_TEST_SAMPLES: usize = 2947;

#[derive(Debug, Clone)]
pub struct HarSplits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Loads the raw 9-channel windows of both splits from an extracted
/// `UCI HAR Dataset` directory.
pub fn load_uci_har(root: &Path) -> Result<HarSplits> {
    Ok(HarSplits {
        train: load_split(root, "train")?,
        test: load_split(root, "test")?,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::ingest(path, format!("cannot read file: {e}")))
}

fn parse_matrix(path: &Path, width: usize) -> Result<Vec<Vec<f32>>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            let row = line
                .split_whitespace()
                .map(str::parse::<f32>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::ingest(path, format!("line {}: {e}", i + 1)))?;
            if row.len() != width {
                return Err(Error::ingest(
                    path,
                    format!("line {}: expected {width} values, found {}", i + 1, row.len()),
                ));
            }
            Ok(row)
        })
        .collect()
}

fn load_split(root: &Path, split: &str) -> Result<Dataset> {
    let dir = root.join(split);
    let paths: Vec<PathBuf> = HAR_CHANNEL_NAMES
        .iter()
        .map(|c| dir.join("Inertial Signals").join(format!("{c}_{split}.txt")))
        .collect();
    for p in &paths {
        if !p.is_file() {
            return Err(Error::ingest(p, "missing inertial-signal file"));
        }
    }
    let label_path = dir.join(format!("y_{split}.txt"));
    let labels: Vec<usize> = parse_matrix(&label_path, 1)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let y = r[0];
            if y.fract() != 0.0 || !(1.0..=HAR_CLASSES as f32).contains(&y) {
                return Err(Error::ingest(
                    &label_path,
                    format!("line {}: label {y} outside 1..={HAR_CLASSES}", i + 1),
                ));
            }
            Ok(y as usize - 1)
        })
        .collect::<Result<_>>()?;

    let channels = parallel::map_range(paths.len(), |c| parse_matrix(&paths[c], HAR_LENGTH));
    let channels = channels.into_iter().collect::<Result<Vec<_>>>()?;
    for (c, rows) in channels.iter().enumerate() {
        if rows.len() != labels.len() {
            return Err(Error::ingest(
                &paths[c],
                format!("{} rows, but {} labels", rows.len(), labels.len()),
            ));
        }
    }

    let mut values = Vec::with_capacity(labels.len() * HAR_CHANNELS * HAR_LENGTH);
    for s in 0..labels.len() {
        for rows in &channels {
            values.extend_from_slice(&rows[s]);
        }
    }
    Dataset::new(values, HAR_CHANNELS, HAR_LENGTH, labels, HAR_CLASSES)?
        .with_channel_names(HAR_CHANNEL_NAMES.iter().map(|s| s.to_string()).collect())
}
