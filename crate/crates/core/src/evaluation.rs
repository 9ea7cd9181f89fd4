//! ROC analysis and image / macula / patient aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cohort::{read_csv, write_csv};
use crate::error::{Error, Result};

/// A scored unit at any aggregation level. Aggregated samples drop the
/// fields that no longer identify a single image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub patient_id: String,
    pub scan_id: Option<String>,
    pub slice_index: Option<usize>,
    pub label: u8,
    pub prob: f64,
}

impl ScoredSample {
    pub fn image(patient_id: &str, scan_id: &str, slice_index: usize, label: u8, prob: f64) -> Self {
        Self {
            patient_id: patient_id.to_string(),
            scan_id: Some(scan_id.to_string()),
            slice_index: Some(slice_index),
            label,
            prob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Image,
    Macula,
    Patient,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Image, Level::Macula, Level::Patient];
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Image => "image",
            Level::Macula => "macula",
            Level::Patient => "patient",
        })
    }
}

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Level::Image),
            "macula" => Ok(Level::Macula),
            "patient" => Ok(Level::Patient),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }
}

fn check_samples(samples: &[ScoredSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Data("no scored samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| !(0.0..=1.0).contains(&s.prob)) {
        return Err(Error::Data(format!("probability {} outside [0, 1]", s.prob)));
    }
    if let Some(s) = samples.iter().find(|s| s.label > 1) {
        return Err(Error::Data(format!("label {} is not 0 or 1", s.label)));
    }
    Ok(())
}

/// Averages probabilities within each scan (macula) or each patient.
///
/// Patient level is the flat mean over all of the patient's images, not a
/// mean of scan means. Groups come out sorted by key.
pub fn aggregate(samples: &[ScoredSample], level: Level) -> Result<Vec<ScoredSample>> {
    check_samples(samples)?;
    if level == Level::Image {
        return Ok(samples.to_vec());
    }
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| (&a.patient_id, &a.scan_id, a.slice_index).cmp(&(&b.patient_id, &b.scan_id, b.slice_index)));
    let mut groups: BTreeMap<(String, Option<String>), (u8, f64, usize)> = BTreeMap::new();
    for s in sorted {
        let key = match level {
            Level::Macula => {
                let scan = s.scan_id.clone().ok_or_else(|| Error::Data("macula aggregation needs scan ids".into()))?;
                (s.patient_id.clone(), Some(scan))
            }
            _ => (s.patient_id.clone(), None),
        };
        let entry = groups.entry(key).or_insert((s.label, 0.0, 0));
        if entry.0 != s.label {
            return Err(Error::Data(format!("mixed labels within group of patient {}", s.patient_id)));
        }
        entry.1 += s.prob;
        entry.2 += 1;
    }
    if level == Level::Macula {
        let mut owners: BTreeMap<&str, &str> = BTreeMap::new();
        for (patient, scan) in groups.keys() {
            let scan = scan.as_deref().unwrap_or_default();
            if let Some(prev) = owners.insert(scan, patient) {
                if prev != patient {
                    return Err(Error::Data(format!("scan {scan} belongs to two patients")));
                }
            }
        }
    }
    Ok(groups
        .into_iter()
        .map(|((patient_id, scan_id), (label, sum, n))| ScoredSample {
            patient_id,
            scan_id,
            slice_index: None,
            label,
            prob: sum / n as f64,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Points ordered by ascending threshold: `-inf`, every distinct score,
/// then `+inf`. A sample is called positive when `prob >= threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auroc: f64,
}

fn class_counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    check_samples(samples)?;
    let pos = samples.iter().filter(|s| s.label == 1).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!(
            "{pos} positive and {neg} negative samples; both classes are required"
        )));
    }
    Ok((pos, neg))
}

pub fn roc_and_auroc(samples: &[ScoredSample]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(samples)?;
    let mut scored: Vec<(f64, u8)> = samples.iter().map(|s| (s.prob, s.label)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Running counts of samples strictly below the current threshold.
    let (mut tp, mut fp) = (pos as u64, neg as u64);
    let (p, n) = (pos as f64, neg as f64);
    let mut points = vec![RocPoint { threshold: f64::NEG_INFINITY, sensitivity: 1.0, specificity: 0.0 }];
    let mut counts = vec![(tp, fp)];
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        points.push(RocPoint { threshold: t, sensitivity: tp as f64 / p, specificity: (neg as u64 - fp) as f64 / n });
        counts.push((tp, fp));
        while i < scored.len() && scored[i].0 == t {
            if scored[i].1 == 1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint { threshold: f64::INFINITY, sensitivity: 0.0, specificity: 1.0 });
    counts.push((0, 0));

    // Trapezoids in integer units, scaled once at the end.
    let twice_area: u64 = counts.windows(2).map(|w| (w[0].1 - w[1].1) * (w[0].0 + w[1].0)).sum();
    let auroc = twice_area as f64 / (2.0 * p * n);
    Ok(RocCurve { points, auroc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub youden_j: f64,
}

/// Youden-optimal point; ties keep the lowest threshold.
pub fn optimal_cutoff(roc: &RocCurve) -> Cutoff {
    let mut best: Option<Cutoff> = None;
    for p in &roc.points {
        let j = p.sensitivity + p.specificity - 1.0;
        if best.is_none_or(|b| j > b.youden_j) {
            best = Some(Cutoff {
                threshold: p.threshold,
                sensitivity: p.sensitivity,
                specificity: p.specificity,
                youden_j: j,
            });
        }
    }
    best.expect("ROC curve always has its two end points")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

pub fn confusion_metrics(samples: &[ScoredSample], threshold: f64) -> Result<Confusion> {
    let (pos, neg) = class_counts(samples)?;
    let true_pos = samples.iter().filter(|s| s.label == 1 && s.prob >= threshold).count();
    let false_pos = samples.iter().filter(|s| s.label == 0 && s.prob >= threshold).count();
    let (true_neg, false_neg) = (neg - false_pos, pos - true_pos);
    Ok(Confusion {
        accuracy: (true_pos + true_neg) as f64 / samples.len() as f64,
        sensitivity: true_pos as f64 / pos as f64,
        specificity: true_neg as f64 / neg as f64,
        true_pos,
        false_pos,
        true_neg,
        false_neg,
    })
}

/// One row of `metrics_<level>.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub level: Level,
    pub n: usize,
    pub auroc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub cutoff: f64,
    pub cutoff_sensitivity: f64,
    pub cutoff_specificity: f64,
}

/// Full analysis of one level: metrics at 0.5, ROC and Youden cutoff.
pub fn evaluate_level(images: &[ScoredSample], level: Level) -> Result<(LevelMetrics, RocCurve)> {
    let samples = aggregate(images, level)?;
    let roc = roc_and_auroc(&samples)?;
    let conf = confusion_metrics(&samples, 0.5)?;
    let cut = optimal_cutoff(&roc);
    Ok((
        LevelMetrics {
            level,
            n: samples.len(),
            auroc: roc.auroc,
            accuracy: conf.accuracy,
            sensitivity: conf.sensitivity,
            specificity: conf.specificity,
            cutoff: cut.threshold,
            cutoff_sensitivity: cut.sensitivity,
            cutoff_specificity: cut.specificity,
        },
        roc,
    ))
}

pub fn save_scores(path: &Path, samples: &[ScoredSample]) -> Result<()> {
    write_csv(path, samples)
}

pub fn load_scores(path: &Path) -> Result<Vec<ScoredSample>> {
    read_csv(path)
}

/// `threshold,sens,spec` rows.
pub fn roc_csv(roc: &RocCurve) -> String {
    let mut out = String::from("threshold,sens,spec\n");
    for p in &roc.points {
        writeln!(out, "{},{},{}", p.threshold, p.sensitivity, p.specificity).expect("string write");
    }
    out
}

pub fn save_metrics(path: &Path, metrics: &LevelMetrics) -> Result<()> {
    write_csv(path, std::slice::from_ref(metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(scores: &[f64], labels: &[u8]) -> Vec<ScoredSample> {
        scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&p, &l))| ScoredSample::image(&format!("p{i}"), &format!("s{i}"), 0, l, p))
            .collect()
    }

    #[test]
    fn auroc_examples() {
        let sep = samples(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]);
        assert_eq!(roc_and_auroc(&sep).unwrap().auroc, 1.0);
        let flat = samples(&[0.5; 4], &[0, 1, 0, 1]);
        assert_eq!(roc_and_auroc(&flat).unwrap().auroc, 0.5);
        let hand = samples(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]);
        assert_eq!(roc_and_auroc(&hand).unwrap().auroc, 0.75);
    }

    #[test]
    fn roc_endpoints_and_monotonicity() {
        let s = samples(&[0.3, 0.3, 0.6, 0.1, 0.9], &[0, 1, 1, 0, 1]);
        let roc = roc_and_auroc(&s).unwrap();
        let first = roc.points.first().unwrap();
        let last = roc.points.last().unwrap();
        assert_eq!((first.sensitivity, first.specificity), (1.0, 0.0));
        assert_eq!((last.sensitivity, last.specificity), (0.0, 1.0));
        assert_eq!(roc.points.len(), 2 + 4);
        assert!(roc.points.windows(2).all(|w| w[0].sensitivity >= w[1].sensitivity));
    }

    #[test]
    fn single_class_rejected() {
        let s = samples(&[0.1, 0.2], &[1, 1]);
        assert!(matches!(roc_and_auroc(&s), Err(Error::SingleClass(_))));
        assert!(matches!(confusion_metrics(&s, 0.5), Err(Error::SingleClass(_))));
    }

    #[test]
    fn cutoff_examples() {
        let sep = roc_and_auroc(&samples(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])).unwrap();
        let c = optimal_cutoff(&sep);
        assert_eq!((c.sensitivity, c.specificity, c.youden_j), (1.0, 1.0, 1.0));
        let flat = roc_and_auroc(&samples(&[0.5; 4], &[0, 1, 0, 1])).unwrap();
        let c = optimal_cutoff(&flat);
        assert_eq!(c.youden_j, 0.0);
        assert_eq!(c.threshold, f64::NEG_INFINITY);
    }

    #[test]
    fn confusion_examples() {
        let exact = samples(&[0.0, 1.0, 1.0, 0.0], &[0, 1, 1, 0]);
        let c = confusion_metrics(&exact, 0.5).unwrap();
        assert_eq!((c.accuracy, c.sensitivity, c.specificity), (1.0, 1.0, 1.0));
        let inverted = samples(&[1.0, 0.0, 0.0, 1.0], &[0, 1, 1, 0]);
        let c = confusion_metrics(&inverted, 0.5).unwrap();
        assert_eq!((c.accuracy, c.sensitivity, c.specificity), (0.0, 0.0, 0.0));
        // Threshold is inclusive.
        let tie = samples(&[0.5, 0.49], &[1, 0]);
        assert_eq!(confusion_metrics(&tie, 0.5).unwrap().accuracy, 1.0);
    }

    #[test]
    fn aggregation_examples() {
        let one_each = samples(&[0.2, 0.7], &[0, 1]);
        let mac = aggregate(&one_each, Level::Macula).unwrap();
        assert_eq!(mac.iter().map(|s| s.prob).collect::<Vec<_>>(), vec![0.2, 0.7]);

        let scan = vec![ScoredSample::image("p", "s", 0, 1, 0.2), ScoredSample::image("p", "s", 1, 1, 0.8)];
        assert_eq!(aggregate(&scan, Level::Macula).unwrap()[0].prob, 0.5);

        let mut mixed = scan.clone();
        mixed[1].label = 0;
        assert!(aggregate(&mixed, Level::Macula).is_err());
    }

    #[test]
    fn roc_csv_layout() {
        let roc = roc_and_auroc(&samples(&[0.25, 0.75], &[0, 1])).unwrap();
        assert_eq!(roc_csv(&roc), "threshold,sens,spec\n-inf,1,0\n0.25,1,0\n0.75,1,1\ninf,0,1\n");
    }
}
