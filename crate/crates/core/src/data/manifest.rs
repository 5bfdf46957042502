//! Dataset manifests and the grade-stratified patient split.
//!
//! A manifest is a JSON-lines file, one patient per line:
//!
//! ```text
//! {"id":"p001","grade":"HGG","t1":"p001/t1","t1c":"p001/t1c","t2":"p001/t2","flair":"p001/flair","label":"p001/label"}
//! ```
//!
//! Paths name VVOL volumes and are resolved relative to the manifest's
//! directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

use super::volume::{read_header, volume_paths};

/// Modality order used for stream and channel indexing.
pub const MODALITIES: [&str; 4] = ["t1", "t1c", "t2", "flair"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "LGG")]
    Lgg,
    #[serde(rename = "HGG")]
    Hgg,
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grade::Lgg => "LGG",
            Grade::Hgg => "HGG",
        })
    }
}

/// One line of a manifest file, paths as written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub grade: Grade,
    pub t1: String,
    pub t1c: String,
    pub t2: String,
    pub flair: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub id: String,
    pub grade: Grade,
    /// Volume paths in [`MODALITIES`] order.
    pub modalities: [PathBuf; 4],
    pub label: PathBuf,
}

impl PatientRecord {
    /// Record whose files are `<dir>/<modality>` and `<dir>/label`.
    pub fn in_dir(id: &str, grade: Grade, dir: &Path) -> Self {
        PatientRecord {
            id: id.to_string(),
            grade,
            modalities: MODALITIES.map(|m| dir.join(m)),
            label: dir.join("label"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<PatientRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<PatientRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate patient id {:?}", r.id)));
            }
        }
        Ok(DatasetManifest { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(LGG, HGG)` patient counts.
    pub fn grade_counts(&self) -> (usize, usize) {
        let lgg = self.records.iter().filter(|r| r.grade == Grade::Lgg).count();
        (lgg, self.records.len() - lgg)
    }

    pub fn get(&self, id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records for `ids`, in the order given.
    pub fn select(&self, ids: &[String]) -> Result<Vec<PatientRecord>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("patient {id:?} not in manifest")))
            })
            .collect()
    }

    /// Reads a manifest and checks every referenced volume header exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|err| {
                Error::Data(format!("{} line {}: {err}", path.display(), i + 1))
            })?;
            let modalities = [&e.t1, &e.t1c, &e.t2, &e.flair].map(|p| root.join(p));
            let record = PatientRecord {
                id: e.id,
                grade: e.grade,
                modalities,
                label: root.join(&e.label),
            };
            for p in record.modalities.iter().chain(std::iter::once(&record.label)) {
                let (json, _) = volume_paths(p);
                if !json.exists() {
                    return Err(Error::Data(format!(
                        "patient {:?}: missing volume {}",
                        record.id,
                        json.display()
                    )));
                }
                read_header(p)?;
            }
            records.push(record);
        }
        Self::new(records)
    }

    /// Writes the manifest with paths relative to its own directory when possible.
    pub fn save(&self, path: &Path) -> Result<()> {
        let root = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| -> String {
            p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned()
        };
        let mut out = String::new();
        for r in &self.records {
            let e = ManifestEntry {
                id: r.id.clone(),
                grade: r.grade,
                t1: rel(&r.modalities[0]),
                t1c: rel(&r.modalities[1]),
                t2: rel(&r.modalities[2]),
                flair: rel(&r.modalities[3]),
                label: rel(&r.label),
            };
            out.push_str(&serde_json::to_string(&e).expect("entry serialises"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Number of LGG patients in a test set of `test_count`:
/// `round(test_count · lgg / total)`, halves rounding up.
pub fn lgg_quota(test_count: usize, lgg: usize, total: usize) -> usize {
    if total == 0 {
        return 0;
    }
    (2 * test_count * lgg + total) / (2 * total)
}

/// Grade-stratified random split. Test patients are drawn uniformly within
/// each grade; both lists keep manifest order.
pub fn split_patients(manifest: &DatasetManifest, test_count: usize, seed: u64) -> Result<Split> {
    let n = manifest.len();
    if test_count > 0 && test_count >= n {
        return Err(Error::Data(format!(
            "test count {test_count} must be below the patient count {n}"
        )));
    }
    let (lgg, hgg) = manifest.grade_counts();
    let want_lgg = lgg_quota(test_count, lgg, n);
    let want_hgg = test_count - want_lgg;
    if want_lgg > lgg || want_hgg > hgg {
        return Err(Error::Data(format!(
            "test quota {want_lgg} LGG + {want_hgg} HGG exceeds available {lgg} LGG + {hgg} HGG"
        )));
    }
    let mut rng = rng::stream(seed, Stream::Split, &[]);
    let mut in_test = vec![false; n];
    for (grade, quota) in [(Grade::Lgg, want_lgg), (Grade::Hgg, want_hgg)] {
        let members: Vec<usize> = (0..n).filter(|&i| manifest.records[i].grade == grade).collect();
        for k in index::sample(&mut rng, members.len(), quota) {
            in_test[members[k]] = true;
        }
    }
    let mut split = Split {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (r, t) in manifest.records.iter().zip(in_test) {
        if t {
            split.test.push(r.id.clone());
        } else {
            split.train.push(r.id.clone());
        }
    }
    Ok(split)
}
