//! Manifest CSV: `Image,PatientId,<Condition1>,...,<ConditionK>`.
//!
//! On load the `Image` and `PatientId` columns are located by name, so the
//! patient column may also come last; every other column is a condition, in
//! header order.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub image_path: String,
    pub patient_id: String,
    pub labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.records.iter().map(|r| r.labels.clone()).collect()
    }

    pub fn with_records(&self, records: Vec<SampleRecord>) -> Manifest {
        Manifest {
            class_names: self.class_names.clone(),
            records,
        }
    }
}

pub fn parse_manifest<R: Read>(input: R) -> Result<Manifest> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("manifest is missing column {name:?}")))
    };
    let image_col = find("Image")?;
    let patient_col = find("PatientId")?;
    let class_cols: Vec<usize> = (0..header.len()).filter(|&i| i != image_col && i != patient_col).collect();
    let class_names = class_cols.iter().map(|&i| header[i].clone()).collect();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        if row.len() != header.len() {
            return Err(Error::Parse {
                row: row_no,
                message: format!("{} cells, header has {}", row.len(), header.len()),
            });
        }
        let labels = class_cols
            .iter()
            .map(|&c| match &row[c] {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::Parse {
                    row: row_no,
                    message: format!("column {:?} has non-binary value {other:?}", header[c]),
                }),
            })
            .collect::<Result<Vec<u8>>>()?;
        let rec = SampleRecord {
            image_path: row[image_col].to_string(),
            patient_id: row[patient_col].to_string(),
            labels,
        };
        if !seen.insert((rec.image_path.clone(), rec.patient_id.clone())) {
            return Err(Error::Parse {
                row: row_no,
                message: format!("duplicate image {:?} for patient {:?}", rec.image_path, rec.patient_id),
            });
        }
        records.push(rec);
    }
    Ok(Manifest { class_names, records })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(file)
}

/// Writes the canonical column order `Image,PatientId,<classes>`.
pub fn write_manifest_to<W: Write>(m: &Manifest, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["Image".to_string(), "PatientId".to_string()];
    header.extend(m.class_names.iter().cloned());
    w.write_record(&header)?;
    for r in &m.records {
        let mut row = vec![r.image_path.clone(), r.patient_id.clone()];
        row.extend(r.labels.iter().map(u8::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<manifest>", e))?;
    Ok(())
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_manifest_to(m, file)
}

/// Image paths in a manifest are relative to the manifest's directory.
pub fn resolve_image(manifest_path: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest_path.parent().unwrap_or(Path::new(".")).join(p)
}
