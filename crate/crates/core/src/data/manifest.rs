use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelVolume, Modality, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cohort {
    #[serde(rename = "HGG")]
    Hgg,
    #[serde(rename = "LGG")]
    Lgg,
}

impl Cohort {
    pub fn name(self) -> &'static str {
        match self {
            Cohort::Hgg => "HGG",
            Cohort::Lgg => "LGG",
        }
    }
}

/// One line of the JSON-lines manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: String,
    pub cohort: Cohort,
    pub flair: PathBuf,
    pub t1c: PathBuf,
    pub labels: PathBuf,
}

impl CaseRecord {
    pub fn volume_path(&self, modality: Modality) -> &Path {
        match modality {
            Modality::Flair => &self.flair,
            Modality::T1c => &self.t1c,
        }
    }

    pub fn load_volume(&self, modality: Modality) -> Result<Volume> {
        Volume::load(self.volume_path(modality), modality)
    }

    pub fn load_labels(&self) -> Result<LabelVolume> {
        LabelVolume::load(&self.labels)
    }
}

/// The set of cases in a dataset. Relative paths are resolved against the
/// manifest's directory on load.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub cases: Vec<CaseRecord>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cases = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: CaseRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?;
            if !seen.insert(rec.case.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate case id {}",
                    rec.case
                )));
            }
            for p in [&mut rec.flair, &mut rec.t1c, &mut rec.labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            cases.push(rec);
        }
        Ok(Self { cases })
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let manifest = Self::parse(&text, base)?;
        let missing: Vec<String> = manifest
            .cases
            .iter()
            .flat_map(|c| [&c.flair, &c.t1c, &c.labels])
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "manifest references missing files: {}",
                missing.join(", ")
            )));
        }
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cases {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, case: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case == case)
    }

    pub fn ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.case.clone()).collect()
    }

    pub fn cohorts(&self) -> Vec<Cohort> {
        let mut c: Vec<Cohort> = self.cases.iter().map(|c| c.cohort).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn ids_in(&self, cohort: Cohort) -> Vec<String> {
        self.cases
            .iter()
            .filter(|c| c.cohort == cohort)
            .map(|c| c.case.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_resolves() {
        let text = r#"{"case":"a","cohort":"HGG","flair":"a_flair.mvol","t1c":"a_t1c.mvol","labels":"a_labels.mvol"}
{"case":"b","cohort":"LGG","flair":"/abs/b.mvol","t1c":"b_t1c.mvol","labels":"b_labels.mvol"}
"#;
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.cases.len(), 2);
        assert_eq!(m.cases[0].flair, PathBuf::from("/data/a_flair.mvol"));
        assert_eq!(m.cases[1].flair, PathBuf::from("/abs/b.mvol"));
        assert_eq!(m.cases[1].cohort, Cohort::Lgg);
        assert_eq!(m.cohorts(), vec![Cohort::Hgg, Cohort::Lgg]);
    }

    #[test]
    fn rejects_duplicates_and_bad_cohort() {
        let dup = r#"{"case":"a","cohort":"HGG","flair":"f","t1c":"t","labels":"l"}
{"case":"a","cohort":"HGG","flair":"f","t1c":"t","labels":"l"}"#;
        assert!(Manifest::parse(dup, Path::new(".")).is_err());
        let bad = r#"{"case":"a","cohort":"XGG","flair":"f","t1c":"t","labels":"l"}"#;
        assert!(Manifest::parse(bad, Path::new(".")).is_err());
    }
}
