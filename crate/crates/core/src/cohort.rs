//! EMR-style table ingestion, patient classification, patient-disjoint
//! splitting and manifest construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{central_indices, slice_file_name, CENTRAL_SLICES};
use crate::rng::Rng;

pub const DIAGNOSES_CSV: &str = "diagnoses.csv";
pub const ACUITY_CSV: &str = "acuity.csv";
pub const INJECTIONS_CSV: &str = "injections.csv";
pub const SCANS_CSV: &str = "scans.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Eye {
    #[serde(rename = "OD", alias = "od")]
    Right,
    #[serde(rename = "OS", alias = "os")]
    Left,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub patient_id: String,
    pub icd9: String,
    pub date: String,
}

/// Snellen acuity 20/`denominator`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcuityExam {
    pub patient_id: String,
    pub eye: Eye,
    pub denominator: f64,
    pub date: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub patient_id: String,
    pub eye: Eye,
    pub date: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub patient_id: String,
    pub scan_id: String,
    pub date: String,
    pub n_slices: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClinicalTables {
    pub diagnoses: Vec<Diagnosis>,
    pub acuity: Vec<AcuityExam>,
    pub injections: Vec<Injection>,
    pub scans: Vec<ScanRecord>,
}

fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    let digits = |r: std::ops::Range<usize>| b[r].iter().all(u8::is_ascii_digit);
    b.len() >= 10
        && digits(0..4)
        && b[4] == b'-'
        && digits(5..7)
        && b[7] == b'-'
        && digits(8..10)
        && (b.len() == 10 || b[10] == b'T')
        && (1..=12).contains(&s[5..7].parse::<u32>().unwrap_or(0))
        && (1..=31).contains(&s[8..10].parse::<u32>().unwrap_or(0))
}

pub(crate) fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| Error::csv(path, e))?;
    reader.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(|e| Error::csv(path, e))
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

impl ClinicalTables {
    /// Reads the four tables from `dir` and validates them.
    pub fn load(dir: &Path) -> Result<Self> {
        let tables = Self {
            diagnoses: read_csv(&dir.join(DIAGNOSES_CSV))?,
            acuity: read_csv(&dir.join(ACUITY_CSV))?,
            injections: read_csv(&dir.join(INJECTIONS_CSV))?,
            scans: read_csv(&dir.join(SCANS_CSV))?,
        };
        tables.validate()?;
        Ok(tables)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_csv(&dir.join(DIAGNOSES_CSV), &self.diagnoses)?;
        write_csv(&dir.join(ACUITY_CSV), &self.acuity)?;
        write_csv(&dir.join(INJECTIONS_CSV), &self.injections)?;
        write_csv(&dir.join(SCANS_CSV), &self.scans)
    }

    pub fn validate(&self) -> Result<()> {
        let dates = self
            .diagnoses
            .iter()
            .map(|r| &r.date)
            .chain(self.acuity.iter().map(|r| &r.date))
            .chain(self.injections.iter().map(|r| &r.date))
            .chain(self.scans.iter().map(|r| &r.date));
        for d in dates {
            if !is_iso_date(d) {
                return Err(Error::Data(format!("date {d:?} is not ISO-8601 (YYYY-MM-DD)")));
            }
        }
        if let Some(a) = self.acuity.iter().find(|a| !(a.denominator > 0.0 && a.denominator.is_finite())) {
            return Err(Error::Data(format!(
                "patient {}: Snellen denominator must be positive, got {}",
                a.patient_id, a.denominator
            )));
        }
        let mut seen = BTreeSet::new();
        for s in &self.scans {
            if !seen.insert(&s.scan_id) {
                return Err(Error::Data(format!("duplicate scan id {}", s.scan_id)));
            }
        }
        Ok(())
    }

    /// Every patient id mentioned in any table, sorted.
    pub fn patient_ids(&self) -> Vec<String> {
        let ids: BTreeSet<&String> = self
            .diagnoses
            .iter()
            .map(|r| &r.patient_id)
            .chain(self.acuity.iter().map(|r| &r.patient_id))
            .chain(self.injections.iter().map(|r| &r.patient_id))
            .chain(self.scans.iter().map(|r| &r.patient_id))
            .collect();
        ids.into_iter().cloned().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Normal,
    #[serde(rename = "AMD")]
    Amd,
    Excluded,
}

impl Label {
    /// Class index used by the classifier (Normal = 0, AMD = 1).
    pub fn class(self) -> Option<u8> {
        match self {
            Label::Normal => Some(0),
            Label::Amd => Some(1),
            Label::Excluded => None,
        }
    }
}

/// Rule that decided a patient's label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    NormalCriteria,
    AmdCriteria,
    InsufficientData,
    /// No retinal diagnosis, but some exam was not better than the cut.
    NormalAcuity,
    /// Retinal diagnosis without any AMD code.
    NonAmdRetinalDiagnosis,
    /// AMD code together with another retinal code.
    OtherMacularPathology,
    NoInjection,
    /// AMD with injections, but the better-seeing eye is not worse than the cut.
    AmdAcuity,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reason::NormalCriteria => "normal-criteria",
            Reason::AmdCriteria => "amd-criteria",
            Reason::InsufficientData => "insufficient-data",
            Reason::NormalAcuity => "normal-acuity",
            Reason::NonAmdRetinalDiagnosis => "non-amd-retinal-diagnosis",
            Reason::OtherMacularPathology => "other-macular-pathology",
            Reason::NoInjection => "no-injection",
            Reason::AmdAcuity => "amd-acuity",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortLabel {
    pub patient_id: String,
    pub label: Label,
    pub reason: Reason,
}

/// Selection rules. Codes compare with dots and whitespace stripped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRules {
    pub retinal_prefixes: Vec<String>,
    pub amd_codes: Vec<String>,
    /// Snellen denominator boundary; both comparisons are strict.
    pub acuity_cut: f64,
}

impl Default for CohortRules {
    fn default() -> Self {
        Self {
            retinal_prefixes: vec!["361".into(), "362".into(), "363".into()],
            amd_codes: vec!["362.50".into(), "362.51".into(), "362.52".into()],
            acuity_cut: 30.0,
        }
    }
}

fn normalize_code(code: &str) -> String {
    code.chars().filter(|c| !c.is_whitespace() && *c != '.').collect::<String>().to_ascii_uppercase()
}

impl CohortRules {
    fn is_amd(&self, code: &str) -> bool {
        let c = normalize_code(code);
        self.amd_codes.iter().any(|a| normalize_code(a) == c)
    }

    fn is_retinal(&self, code: &str) -> bool {
        let c = normalize_code(code);
        self.is_amd(code) || self.retinal_prefixes.iter().any(|p| c.starts_with(&normalize_code(p)))
    }
}

/// Applies the Normal/AMD/Excluded rules to one patient.
///
/// Normal: no retinal code, and every recorded exam in both eyes strictly
/// better than 20/cut. AMD: an AMD code and no other retinal code, at least
/// one injection, and the better-seeing eye (best exam per eye) strictly
/// worse than 20/cut. Anything else is excluded with the first failing rule.
pub fn classify_patient(tables: &ClinicalTables, patient_id: &str, rules: &CohortRules) -> CohortLabel {
    let label = |label, reason| CohortLabel { patient_id: patient_id.to_string(), label, reason };

    let exams: Vec<&AcuityExam> = tables.acuity.iter().filter(|a| a.patient_id == patient_id).collect();
    let per_eye = |eye: Eye| -> Vec<f64> { exams.iter().filter(|a| a.eye == eye).map(|a| a.denominator).collect() };
    let (od, os) = (per_eye(Eye::Right), per_eye(Eye::Left));
    if od.is_empty() || os.is_empty() {
        return label(Label::Excluded, Reason::InsufficientData);
    }

    let codes: Vec<&str> =
        tables.diagnoses.iter().filter(|d| d.patient_id == patient_id).map(|d| d.icd9.as_str()).collect();
    let has_amd = codes.iter().any(|c| rules.is_amd(c));
    let has_other_retinal = codes.iter().any(|c| rules.is_retinal(c) && !rules.is_amd(c));

    if !has_amd && !has_other_retinal {
        let worst = od.iter().chain(&os).copied().fold(f64::NEG_INFINITY, f64::max);
        return if worst < rules.acuity_cut {
            label(Label::Normal, Reason::NormalCriteria)
        } else {
            label(Label::Excluded, Reason::NormalAcuity)
        };
    }
    if !has_amd {
        return label(Label::Excluded, Reason::NonAmdRetinalDiagnosis);
    }
    if has_other_retinal {
        return label(Label::Excluded, Reason::OtherMacularPathology);
    }
    if !tables.injections.iter().any(|i| i.patient_id == patient_id) {
        return label(Label::Excluded, Reason::NoInjection);
    }
    let best = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let better_eye = best(&od).min(best(&os));
    if better_eye > rules.acuity_cut {
        label(Label::Amd, Reason::AmdCriteria)
    } else {
        label(Label::Excluded, Reason::AmdAcuity)
    }
}

/// Labels every patient that appears in any table, sorted by id.
pub fn classify_all(tables: &ClinicalTables, rules: &CohortRules) -> Vec<CohortLabel> {
    tables.patient_ids().iter().map(|id| classify_patient(tables, id, rules)).collect()
}

pub fn save_labels(path: &Path, labels: &[CohortLabel]) -> Result<()> {
    write_csv(path, labels)
}

pub fn load_labels(path: &Path) -> Result<Vec<CohortLabel>> {
    read_csv(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

/// Patient id -> split, for Normal and AMD patients only.
pub type SplitAssignment = BTreeMap<String, Split>;

/// `floor(n * fraction + 1/2)`
pub fn validation_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 0.5).floor() as usize
}

/// Stratified patient-level split: within each label group (Normal, then
/// AMD, ids sorted) a seeded shuffle picks `validation_count` patients for
/// validation.
pub fn split_patients(labels: &[CohortLabel], fraction: f64, rng: &mut Rng) -> Result<SplitAssignment> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1]")));
    }
    let mut out = SplitAssignment::new();
    for group in [Label::Normal, Label::Amd] {
        let mut ids: Vec<&String> = labels.iter().filter(|l| l.label == group).map(|l| &l.patient_id).collect();
        if ids.is_empty() {
            return Err(Error::Data(format!("no {group:?} patients to split")));
        }
        ids.sort();
        ids.dedup();
        rng.shuffle(&mut ids);
        let n_val = validation_count(ids.len(), fraction);
        for (i, id) in ids.into_iter().enumerate() {
            out.insert(id.clone(), if i < n_val { Split::Validation } else { Split::Train });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub scan_id: String,
    pub slice_index: usize,
    /// 0 = normal, 1 = AMD
    pub label: u8,
    pub split: Split,
    pub path: String,
}

impl ManifestRow {
    fn sort_key(&self) -> (&str, &str, usize) {
        (&self.patient_id, &self.scan_id, self.slice_index)
    }
}

/// Ordered training and validation rows.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedScan {
    pub scan_id: String,
    pub reason: String,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<ManifestRow> = read_csv(path)?;
        let m = Self { rows };
        m.check()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.rows)
    }

    /// Disjoint splits and one label per patient.
    pub fn check(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, (Split, u8)> = BTreeMap::new();
        for r in &self.rows {
            if r.label > 1 {
                return Err(Error::Data(format!("row label {} is not 0 or 1", r.label)));
            }
            match seen.insert(&r.patient_id, (r.split, r.label)) {
                Some((s, _)) if s != r.split => {
                    return Err(Error::Data(format!("patient {} appears in both splits", r.patient_id)))
                }
                Some((_, l)) if l != r.label => {
                    return Err(Error::Data(format!("patient {} has mixed labels", r.patient_id)))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// One row per central slice of every scan of a split patient. Training rows
/// come first in seeded-shuffled order, then validation rows sorted by
/// (patient, scan, slice). Scans too short for central selection are
/// returned as rejections.
pub fn build_manifest(
    tables: &ClinicalTables,
    labels: &[CohortLabel],
    split: &SplitAssignment,
    image_root: &Path,
    rng: &mut Rng,
) -> Result<(Manifest, Vec<RejectedScan>)> {
    let by_patient: BTreeMap<&str, &CohortLabel> = labels.iter().map(|l| (l.patient_id.as_str(), l)).collect();
    let mut scans: Vec<&ScanRecord> = tables.scans.iter().collect();
    scans.sort_by(|a, b| (&a.patient_id, &a.scan_id).cmp(&(&b.patient_id, &b.scan_id)));

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut rejected = Vec::new();
    for scan in scans {
        let Some(&assigned) = split.get(&scan.patient_id) else { continue };
        let Some(class) = by_patient.get(scan.patient_id.as_str()).and_then(|l| l.label.class()) else {
            continue;
        };
        let range = match central_indices(&scan.scan_id, scan.n_slices, CENTRAL_SLICES) {
            Ok(r) => r,
            Err(Error::ScanRejected { scan_id, reason }) => {
                rejected.push(RejectedScan { scan_id, reason });
                continue;
            }
            Err(e) => return Err(e),
        };
        for index in range {
            let path: PathBuf = image_root.join(slice_file_name(&scan.scan_id, index));
            if !path.is_file() {
                return Err(Error::MissingFile(path));
            }
            let row = ManifestRow {
                patient_id: scan.patient_id.clone(),
                scan_id: scan.scan_id.clone(),
                slice_index: index,
                label: class,
                split: assigned,
                path: path.to_string_lossy().into_owned(),
            };
            match assigned {
                Split::Train => train.push(row),
                Split::Validation => validation.push(row),
            }
        }
    }
    rng.shuffle(&mut train);
    validation.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    train.extend(validation);
    Ok((Manifest { rows: train }, rejected))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exam(p: &str, eye: Eye, d: f64) -> AcuityExam {
        AcuityExam { patient_id: p.into(), eye, denominator: d, date: "2015-01-01".into() }
    }

    fn dx(p: &str, code: &str) -> Diagnosis {
        Diagnosis { patient_id: p.into(), icd9: code.into(), date: "2015-01-01".into() }
    }

    #[test]
    fn normal_patient() {
        let t = ClinicalTables {
            acuity: vec![exam("p", Eye::Right, 20.0), exam("p", Eye::Left, 20.0)],
            ..Default::default()
        };
        assert_eq!(classify_patient(&t, "p", &CohortRules::default()).label, Label::Normal);
    }

    #[test]
    fn amd_patient_and_missing_injection() {
        let mut t = ClinicalTables {
            diagnoses: vec![dx("p", "362.51")],
            acuity: vec![exam("p", Eye::Right, 40.0), exam("p", Eye::Left, 60.0)],
            injections: vec![Injection { patient_id: "p".into(), eye: Eye::Left, date: "2015-02-01".into() }],
            ..Default::default()
        };
        let rules = CohortRules::default();
        assert_eq!(classify_patient(&t, "p", &rules).label, Label::Amd);
        t.injections.clear();
        let l = classify_patient(&t, "p", &rules);
        assert_eq!((l.label, l.reason), (Label::Excluded, Reason::NoInjection));
    }

    #[test]
    fn codes_compare_without_dots() {
        let rules = CohortRules::default();
        assert!(rules.is_amd("36251"));
        assert!(rules.is_retinal("362.81"));
        assert!(!rules.is_retinal("250.00"));
    }

    #[test]
    fn split_counts_round_half_up() {
        assert_eq!(validation_count(10, 0.2), 2);
        assert_eq!(validation_count(7, 0.2), 1);
        assert_eq!(validation_count(8, 0.2), 2);
        assert_eq!(validation_count(3, 0.2), 1);
        assert_eq!(validation_count(2, 0.2), 0);
    }

    #[test]
    fn split_requires_both_groups() {
        let labels = vec![CohortLabel { patient_id: "a".into(), label: Label::Normal, reason: Reason::NormalCriteria }];
        assert!(split_patients(&labels, 0.2, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn iso_dates() {
        assert!(is_iso_date("2016-03-09"));
        assert!(is_iso_date("2016-03-09T10:00:00"));
        assert!(!is_iso_date("03/09/2016"));
        assert!(!is_iso_date("2016-13-09"));
    }
}
