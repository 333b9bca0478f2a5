//! CSV dataset manifests: one row per image with subject, gender, region and
//! per-AU label columns, either binary presence or 0-5 intensity.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FIXED_COLUMNS: [&str; 4] = ["image_path", "subject_id", "gender", "region"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

impl Gender {
    pub fn as_str(&self) -> &'static str {
        match self {
            Gender::Male => "M",
            Gender::Female => "F",
            Gender::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    Binary,
    Intensity,
}

#[derive(Debug, Clone)]
pub struct SampleRecord {
    /// Image path relative to the manifest's directory.
    pub image_ref: String,
    pub subject_id: String,
    pub gender: Gender,
    pub region: String,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub au_columns: Vec<String>,
    pub label_kind: LabelKind,
    pub records: Vec<SampleRecord>,
    /// Directory image paths are resolved against.
    pub base_dir: PathBuf,
}

/// Binarization rule for intensity-coded labels: positive at intensity 2+.
pub fn binarize_intensity(intensity: u8) -> Result<u8> {
    if intensity > 5 {
        return Err(Error::contract(format!("intensity {intensity} outside 0..=5")));
    }
    Ok(u8::from(intensity >= 2))
}

impl Manifest {
    pub fn label_width(&self) -> usize {
        self.au_columns.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct subject ids in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for r in &self.records {
            if seen.insert(r.subject_id.as_str()) {
                out.push(r.subject_id.clone());
            }
        }
        out
    }

    /// Labels of one record as binary values, applying the intensity
    /// threshold when needed.
    pub fn binary_labels(&self, record: &SampleRecord) -> Result<Vec<u8>> {
        match self.label_kind {
            LabelKind::Binary => Ok(record.labels.clone()),
            LabelKind::Intensity => record.labels.iter().map(|&v| binarize_intensity(v)).collect(),
        }
    }

    pub fn image_path(&self, record: &SampleRecord) -> PathBuf {
        self.base_dir.join(&record.image_ref)
    }

    /// Records at `indices`, emitted in manifest order.
    pub fn subset(&self, indices: &[usize]) -> Manifest {
        let mut sorted: Vec<usize> = indices.to_vec();
        sorted.sort_unstable();
        Manifest {
            au_columns: self.au_columns.clone(),
            label_kind: self.label_kind,
            records: sorted.iter().map(|&i| self.records[i].clone()).collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Keep only the records selected by `keep` (by index), preserving order.
    pub fn filtered(&self, keep: impl Fn(&SampleRecord) -> bool) -> Manifest {
        Manifest {
            au_columns: self.au_columns.clone(),
            label_kind: self.label_kind,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

fn parse_gender(raw: &str, path: &Path, row: usize) -> Result<Gender> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "m" | "male" => Ok(Gender::Male),
        "f" | "female" => Ok(Gender::Female),
        "" | "unknown" | "u" => Ok(Gender::Unknown),
        other => Err(Error::Parse {
            path: path.to_path_buf(),
            row,
            column: "gender".into(),
            message: format!("unrecognized gender {other:?}"),
        }),
    }
}

pub fn load_manifest(path: impl AsRef<Path>, label_kind: LabelKind) -> Result<Manifest> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, "", e.to_string()))?;

    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, "", e.to_string()))?
        .clone();
    if headers.is_empty() || headers.len() < FIXED_COLUMNS.len() + 1 {
        return Err(parse_err(
            path,
            1,
            "",
            format!(
                "header must be {},<AU columns...>; got {} columns",
                FIXED_COLUMNS.join(","),
                headers.len()
            ),
        ));
    }
    for (i, expected) in FIXED_COLUMNS.iter().enumerate() {
        if &headers[i] != *expected {
            return Err(parse_err(
                path,
                1,
                &headers[i],
                format!("column {i} must be named {expected:?}"),
            ));
        }
    }
    let au_columns: Vec<String> = headers.iter().skip(FIXED_COLUMNS.len()).map(str::to_string).collect();
    {
        let mut seen = std::collections::HashSet::new();
        for c in &au_columns {
            if !seen.insert(c.as_str()) {
                return Err(parse_err(path, 1, c, "duplicate AU column".into()));
            }
        }
    }

    let max_label = match label_kind {
        LabelKind::Binary => 1u8,
        LabelKind::Intensity => 5u8,
    };

    let mut records = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let file_row = idx + 2; // 1-based, after the header
        let row = row.map_err(|e| parse_err(path, file_row, "", e.to_string()))?;
        if row.len() != headers.len() {
            return Err(parse_err(
                path,
                file_row,
                "",
                format!("{} fields, header has {}", row.len(), headers.len()),
            ));
        }
        let subject_id = row[1].to_string();
        if subject_id.is_empty() {
            return Err(parse_err(path, file_row, "subject_id", "empty subject id".into()));
        }
        let gender = parse_gender(&row[2], path, file_row)?;
        let mut labels = Vec::with_capacity(au_columns.len());
        for (ci, col) in au_columns.iter().enumerate() {
            let raw = &row[FIXED_COLUMNS.len() + ci];
            let value: u8 = raw
                .parse()
                .map_err(|_| parse_err(path, file_row, col, format!("label {raw:?} is not an integer")))?;
            if value > max_label {
                return Err(parse_err(
                    path,
                    file_row,
                    col,
                    format!("label {value} out of range for {label_kind:?} (max {max_label})"),
                ));
            }
            labels.push(value);
        }
        records.push(SampleRecord {
            image_ref: row[0].to_string(),
            subject_id,
            gender,
            region: row[3].to_string(),
            labels,
        });
    }

    Ok(Manifest {
        au_columns,
        label_kind,
        records,
        base_dir: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
    })
}

/// Write a manifest in the same schema `load_manifest` reads.
pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(manifest.au_columns.iter().map(String::as_str));
    w.write_record(&header)?;
    for r in &manifest.records {
        let mut row = vec![r.image_ref.clone(), r.subject_id.clone(), r.gender.as_str().to_string(), r.region.clone()];
        row.extend(r.labels.iter().map(u8::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => {
                if let csv::ErrorKind::Io(io) = e.into_kind() {
                    Error::Io(io)
                } else {
                    unreachable!()
                }
            }
            _ => Error::Parse {
                path: PathBuf::new(),
                row: e.position().map(|p| p.line() as usize).unwrap_or(0),
                column: String::new(),
                message: e.to_string(),
            },
        }
    }
}

fn parse_err(path: &Path, row: usize, column: &str, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    }
}
