use std::collections::BTreeMap;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};

struct RawTable {
    labels: Vec<f64>,
    values: Vec<f32>,
    length: usize,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    let mut table = RawTable {
        labels: Vec::new(),
        values: Vec::new(),
        length: 0,
    };
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::ingest(path, format!("row {row}: {e}")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::ingest(path, format!("row {row}: `{s}`: {e}")))
        };
        let len = record.len().saturating_sub(1);
        if len == 0 {
            return Err(Error::ingest(path, format!("row {row}: no series values")));
        }
        if table.labels.is_empty() {
            table.length = len;
        } else if len != table.length {
            return Err(Error::ingest(
                path,
                format!("row {row}: length {len}, expected {}", table.length),
            ));
        }
        let label = parse(&record[0])?;
        if label.fract() != 0.0 {
            return Err(Error::ingest(path, format!("row {row}: non-integer label {label}")));
        }
        table.labels.push(label);
        for field in record.iter().skip(1) {
            let v = parse(field)?;
            if v.is_nan() {
                return Err(Error::ingest(path, format!("row {row}: missing value")));
            }
            table.values.push(v as f32);
        }
    }
    if table.labels.is_empty() {
        return Err(Error::ingest(path, "file has no rows"));
    }
    Ok(table)
}

fn label_map(labels: &[f64]) -> BTreeMap<i64, usize> {
    let mut keys: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect()
}

fn assemble(path: &Path, table: RawTable, map: &BTreeMap<i64, usize>) -> Result<Dataset> {
    let labels = table
        .labels
        .iter()
        .map(|&l| {
            map.get(&(l as i64))
                .copied()
                .ok_or_else(|| Error::ingest(path, format!("label {l} absent from the training file")))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(table.values, 1, table.length, labels, map.len())
}

/// Loads one `label<TAB>v_1<TAB>…` file; labels map to `0..K` in ascending order.
pub fn load_ucr_tsv(path: &Path) -> Result<Dataset> {
    let table = read_table(path)?;
    let map = label_map(&table.labels);
    assemble(path, table, &map)
}

/// Loads a train/test pair, mapping test labels with the training file's mapping.
pub fn load_ucr_pair(train: &Path, test: &Path) -> Result<(Dataset, Dataset)> {
    let train_table = read_table(train)?;
    let test_table = read_table(test)?;
    if train_table.length != test_table.length {
        return Err(Error::ingest(
            test,
            format!(
                "series length {} differs from training length {}",
                test_table.length, train_table.length
            ),
        ));
    }
    let map = label_map(&train_table.labels);
    Ok((assemble(train, train_table, &map)?, assemble(test, test_table, &map)?))
}
