use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{select_slice, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::io::load_tensor;

/// One manifest line. Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub institution: String,
    pub ct_path: String,
    pub pet_path: String,
    pub mask_path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, root: impl Into<PathBuf>) -> Self {
        Self {
            rows,
            root: root.into(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let rows = reader
            .deserialize()
            .enumerate()
            .map(|(i, r)| r.map_err(|e| Error::Manifest(format!("{}: row {}: {e}", path.display(), i + 1))))
            .collect::<Result<Vec<ManifestRow>>>()?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::new(rows, root);
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Unique ids, binary labels and existing files.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert(row.patient_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate patient_id `{}`", row.patient_id)));
            }
            if row.label > 1 {
                return Err(Error::Manifest(format!(
                    "patient `{}`: label {} is not 0 or 1",
                    row.patient_id, row.label
                )));
            }
            for p in [&row.ct_path, &row.pet_path, &row.mask_path] {
                if !self.resolve(p).is_file() {
                    return Err(Error::Manifest(format!(
                        "patient `{}`: missing file {}",
                        row.patient_id,
                        self.resolve(p).display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Loads the three volumes of `row` and reduces them to the largest-GTV slice.
    pub fn load_sample(&self, row: &ManifestRow) -> Result<Sample> {
        let ct = load_tensor(self.resolve(&row.ct_path))?;
        let pet = load_tensor(self.resolve(&row.pet_path))?;
        let mask = load_tensor(self.resolve(&row.mask_path))?;
        let (ct, pet, mask) = select_slice(&ct, &pet, &mask)
            .map_err(|e| Error::Manifest(format!("patient `{}`: {e}", row.patient_id)))?;
        Ok(Sample {
            patient_id: row.patient_id.clone(),
            institution: row.institution.clone(),
            ct,
            pet,
            mask,
            label: row.label,
            split: row.split,
        })
    }
}
