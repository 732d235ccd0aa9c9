//! The utterance feature table (one CSV row per usable utterance).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::prosody::{Feature, FeatureVector, FEATURE_COUNT};

const ID_COLUMNS: [&str; 3] = ["utterance_id", "speaker_id", "dialect"];

#[derive(Debug, Error)]
pub enum TableError {
    #[error("MissingFile: {0}")]
    MissingFile(String),
    #[error("MissingColumn: {0}")]
    MissingColumn(String),
    #[error("bad value in row {row}, column {column}: `{value}`")]
    BadValue { row: usize, column: String, value: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub utterance_id: String,
    pub speaker_id: String,
    pub dialect: String,
    pub features: FeatureVector,
}

pub fn header() -> String {
    let mut cols: Vec<&str> = ID_COLUMNS.to_vec();
    cols.extend(Feature::ALL.iter().map(|f| f.name()));
    cols.join(",")
}

pub fn write_table<W: Write>(rows: &[FeatureRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", header())?;
    for r in rows {
        write!(out, "{},{},{}", r.utterance_id, r.speaker_id, r.dialect)?;
        for v in r.features.to_array() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn save_table(rows: &[FeatureRow], path: impl AsRef<Path>) -> Result<(), TableError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_table(rows, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Columns are located by name, so extra columns and any order are accepted.
pub fn read_table<R: Read>(input: R) -> Result<Vec<FeatureRow>, TableError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TableError::MissingColumn(name.to_string()))
    };
    let ids = [find(ID_COLUMNS[0])?, find(ID_COLUMNS[1])?, find(ID_COLUMNS[2])?];
    let cols: Vec<usize> = Feature::ALL.iter().map(|f| find(f.name())).collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let mut values = [0.0; FEATURE_COUNT];
        for (j, &c) in cols.iter().enumerate() {
            let raw = record.get(c).unwrap_or("");
            values[j] = raw.parse().map_err(|_| TableError::BadValue {
                row: i + 1,
                column: Feature::ALL[j].name().to_string(),
                value: raw.to_string(),
            })?;
        }
        rows.push(FeatureRow {
            utterance_id: record.get(ids[0]).unwrap_or("").to_string(),
            speaker_id: record.get(ids[1]).unwrap_or("").to_string(),
            dialect: record.get(ids[2]).unwrap_or("").to_string(),
            features: FeatureVector::from_array(values),
        });
    }
    Ok(rows)
}

pub fn load_table(path: impl AsRef<Path>) -> Result<Vec<FeatureRow>, TableError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|_| TableError::MissingFile(path.display().to_string()))?;
    read_table(file)
}
