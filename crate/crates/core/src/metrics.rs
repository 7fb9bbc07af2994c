//! Tumor regions, overlap metrics and cross-validated reporting.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::{Cohort, Modality};
use crate::error::{Error, Result};

/// Nested evaluation regions derived from intra-tumoral labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    /// Labels 1, 2, 3, 4.
    Complete,
    /// Labels 1, 3, 4 (edema excluded).
    Core,
    /// Label 4.
    Enhancing,
}

impl RegionKind {
    pub const ALL: [RegionKind; 3] = [
        RegionKind::Complete,
        RegionKind::Core,
        RegionKind::Enhancing,
    ];

    pub fn contains(self, label: u8) -> bool {
        match self {
            RegionKind::Complete => matches!(label, 1..=4),
            RegionKind::Core => matches!(label, 1 | 3 | 4),
            RegionKind::Enhancing => label == 4,
        }
    }

    /// Input sequence used to segment this region.
    pub fn modality(self) -> Modality {
        match self {
            RegionKind::Complete | RegionKind::Core => Modality::Flair,
            RegionKind::Enhancing => Modality::T1c,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionKind::Complete => "complete",
            RegionKind::Core => "core",
            RegionKind::Enhancing => "enhancing",
        }
    }
}

impl std::str::FromStr for RegionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "complete" => Ok(RegionKind::Complete),
            "core" => Ok(RegionKind::Core),
            "enhancing" => Ok(RegionKind::Enhancing),
            other => Err(Error::InvalidArgument(format!(
                "unknown region {other:?}; expected complete, core or enhancing"
            ))),
        }
    }
}

impl std::fmt::Display for RegionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Published cross-validated mean DSC (complete, core, enhancing) on the
/// full-size cohorts, kept as the target schema for reports.
pub const REFERENCE_MEAN_DSC: [(&str, [f64; 3]); 3] = [
    ("HGG", [0.88, 0.87, 0.81]),
    ("LGG", [0.84, 0.85, 0.00]),
    ("Combined", [0.86, 0.86, 0.65]),
];

/// Binary mask of `region` over a label map with values in `{0..4}`.
pub fn region_mask(labels: &[u8], region: RegionKind) -> Result<Vec<u8>> {
    labels
        .iter()
        .map(|&l| {
            if l > 4 {
                Err(Error::LabelAlphabet(l))
            } else {
                Ok(u8::from(region.contains(l)))
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Voxelwise confusion counts of two binary masks (nonzero = foreground).
pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "confusion",
            format!(
                "prediction has {} voxels, truth has {}",
                pred.len(),
                truth.len()
            ),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2TP / (FP + 2TP + FN)`; 1 when prediction and truth are both empty.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    let denom = c.fp + 2 * c.tp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// `TP / (TP + FN)`; 1 when the truth is empty.
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub dsc: f64,
    pub sensitivity: f64,
    pub counts: ConfusionCounts,
}

impl RegionScore {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        Self {
            dsc: dsc(&counts),
            sensitivity: sensitivity(&counts),
            counts,
        }
    }
}

/// Scores of one case, pooled over all of its slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub cohort: Cohort,
    pub regions: BTreeMap<RegionKind, RegionScore>,
}

/// Scores each task-specific predicted mask against the matching region of
/// the ground-truth label volume.
pub fn evaluate_case(
    case: &str,
    cohort: Cohort,
    predictions: &[(RegionKind, &[u8])],
    truth_labels: &[u8],
) -> Result<CaseMetrics> {
    let mut regions = BTreeMap::new();
    for &(region, pred) in predictions {
        if pred.len() != truth_labels.len() {
            return Err(Error::shape(
                "evaluate_case",
                format!(
                    "case {case}: {} prediction has {} voxels, truth has {}",
                    region,
                    pred.len(),
                    truth_labels.len()
                ),
            ));
        }
        let truth = region_mask(truth_labels, region)?;
        regions.insert(region, RegionScore::from_counts(confusion(pred, &truth)?));
    }
    Ok(CaseMetrics {
        case: case.to_string(),
        cohort,
        regions,
    })
}

/// Scores a predicted label map on all three regions.
pub fn evaluate_labels(
    case: &str,
    cohort: Cohort,
    pred_labels: &[u8],
    truth_labels: &[u8],
) -> Result<CaseMetrics> {
    let masks: Vec<(RegionKind, Vec<u8>)> = RegionKind::ALL
        .iter()
        .map(|&r| Ok((r, region_mask(pred_labels, r)?)))
        .collect::<Result<_>>()?;
    let refs: Vec<(RegionKind, &[u8])> = masks.iter().map(|(r, m)| (*r, m.as_slice())).collect();
    evaluate_case(case, cohort, &refs, truth_labels)
}

/// Mean value per region; `None` for regions that were not evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionMeans {
    pub complete: Option<f64>,
    pub core: Option<f64>,
    pub enhancing: Option<f64>,
}

impl RegionMeans {
    pub fn get(&self, region: RegionKind) -> Option<f64> {
        match region {
            RegionKind::Complete => self.complete,
            RegionKind::Core => self.core,
            RegionKind::Enhancing => self.enhancing,
        }
    }

    fn set(&mut self, region: RegionKind, v: Option<f64>) {
        match region {
            RegionKind::Complete => self.complete = v,
            RegionKind::Core => self.core = v,
            RegionKind::Enhancing => self.enhancing = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub cases: usize,
    pub dsc: RegionMeans,
    pub sensitivity: RegionMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    /// `HGG`, `LGG` or `Combined`.
    pub grade: String,
    pub folds: Vec<FoldSummary>,
    pub dsc: RegionMeans,
    pub sensitivity: RegionMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<(usize, CaseMetrics)>,
    pub summaries: Vec<CohortSummary>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn summarize(grade: &str, cases: &[&(usize, CaseMetrics)]) -> CohortSummary {
    let mut by_fold: BTreeMap<usize, Vec<&CaseMetrics>> = BTreeMap::new();
    for (fold, m) in cases {
        by_fold.entry(*fold).or_default().push(m);
    }
    let pick = |ms: &[&CaseMetrics], r: RegionKind, f: fn(&RegionScore) -> f64| -> Vec<f64> {
        ms.iter().filter_map(|m| m.regions.get(&r).map(f)).collect()
    };
    let folds: Vec<FoldSummary> = by_fold
        .iter()
        .map(|(&fold, ms)| {
            let mut dsc = RegionMeans::default();
            let mut sens = RegionMeans::default();
            for r in RegionKind::ALL {
                dsc.set(r, mean(&pick(ms, r, |s| s.dsc)));
                sens.set(r, mean(&pick(ms, r, |s| s.sensitivity)));
            }
            FoldSummary {
                fold,
                cases: ms.len(),
                dsc,
                sensitivity: sens,
            }
        })
        .collect();
    let mut dsc = RegionMeans::default();
    let mut sens = RegionMeans::default();
    for r in RegionKind::ALL {
        let d: Vec<f64> = folds.iter().filter_map(|f| f.dsc.get(r)).collect();
        let s: Vec<f64> = folds.iter().filter_map(|f| f.sensitivity.get(r)).collect();
        dsc.set(r, mean(&d));
        sens.set(r, mean(&s));
    }
    CohortSummary {
        grade: grade.to_string(),
        folds,
        dsc,
        sensitivity: sens,
    }
}

/// Unweighted mean over the cases of each test fold, then over folds,
/// separately for HGG, LGG and all cases combined. `folds[i]` lists the
/// test cases of fold `i`; every reported case must appear in exactly one.
pub fn aggregate(reports: &[CaseMetrics], folds: &[Vec<String>]) -> Result<EvalReport> {
    let mut fold_of: HashMap<&str, usize> = HashMap::new();
    for (i, fold) in folds.iter().enumerate() {
        for case in fold {
            if fold_of.insert(case.as_str(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "case {case} appears in more than one test fold"
                )));
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut cases = Vec::with_capacity(reports.len());
    for r in reports {
        if !seen.insert(r.case.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "case {} reported twice",
                r.case
            )));
        }
        let fold = *fold_of.get(r.case.as_str()).ok_or_else(|| {
            Error::InvalidArgument(format!("case {} is not in any test fold", r.case))
        })?;
        cases.push((fold, r.clone()));
    }
    let mut summaries = Vec::new();
    for cohort in [Cohort::Hgg, Cohort::Lgg] {
        let subset: Vec<&(usize, CaseMetrics)> =
            cases.iter().filter(|(_, m)| m.cohort == cohort).collect();
        if !subset.is_empty() {
            summaries.push(summarize(cohort.name(), &subset));
        }
    }
    let all: Vec<&(usize, CaseMetrics)> = cases.iter().collect();
    summaries.push(summarize("Combined", &all));
    Ok(EvalReport { cases, summaries })
}

impl EvalReport {
    pub fn summary(&self, grade: &str) -> Option<&CohortSummary> {
        self.summaries.iter().find(|s| s.grade == grade)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Mean DSC table with columns `Grade, Complete, Core, Enhancing`.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let mut out = String::from("Grade,Complete,Core,Enhancing\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.grade,
                fmt(s.dsc.complete),
                fmt(s.dsc.core),
                fmt(s.dsc.enhancing)
            ));
        }
        out
    }

    /// Every reported value, for range checks.
    pub fn values(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (_, c) in &self.cases {
            for s in c.regions.values() {
                v.push(s.dsc);
                v.push(s.sensitivity);
            }
        }
        for s in &self.summaries {
            for r in RegionKind::ALL {
                v.extend(s.dsc.get(r));
                v.extend(s.sensitivity.get(r));
            }
        }
        v
    }
}
