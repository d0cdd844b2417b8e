//! Confusion counting, Jaccard and Dice scores, and per-class reports.
//!
//! `J = TP / (TP + FP + FN)` and `DSC = 2 TP / (2 TP + FP + FN)`. When a class is
//! absent from both prediction and target (`TP + FP + FN = 0`) both scores are
//! defined as 1 and the result is flagged `empty`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{ClassCode, LabelMap, CLASS_COUNT};

/// One-vs-rest counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: [Counts; CLASS_COUNT],
}

impl ConfusionCounts {
    pub fn class(&self, code: ClassCode) -> Counts {
        self.per_class[code.index()]
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.add(b);
        }
    }
}

pub fn confusion(pred: &LabelMap, target: &LabelMap) -> Result<ConfusionCounts> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.dims(), target.dims())));
    }
    // joint histogram, then one-vs-rest per class
    let mut joint = [[0u64; CLASS_COUNT]; CLASS_COUNT];
    for (p, t) in pred.codes().iter().zip(target.codes()) {
        joint[p.index()][t.index()] += 1;
    }
    let total = pred.codes().len() as u64;
    let mut out = ConfusionCounts::default();
    for k in 0..CLASS_COUNT {
        let tp = joint[k][k];
        let pred_k: u64 = joint[k].iter().sum();
        let target_k: u64 = joint.iter().map(|row| row[k]).sum();
        let fp = pred_k - tp;
        let fn_ = target_k - tp;
        out.per_class[k] = Counts { tp, fp, fn_, tn: total - tp - fp - fn_ };
    }
    Ok(out)
}

/// A score plus the empty-class flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub empty: bool,
}

pub fn jaccard_counts(c: &Counts) -> Score {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        Score { value: 1.0, empty: true }
    } else {
        Score { value: c.tp as f64 / denom as f64, empty: false }
    }
}

pub fn dice_counts(c: &Counts) -> Score {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        Score { value: 1.0, empty: true }
    } else {
        Score { value: (2 * c.tp) as f64 / denom as f64, empty: false }
    }
}

pub fn jaccard(c: &ConfusionCounts, class: ClassCode) -> Score {
    jaccard_counts(&c.class(class))
}

pub fn dice(c: &ConfusionCounts, class: ClassCode) -> Score {
    dice_counts(&c.class(class))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Aggregate counts over all pairs, then score.
    #[default]
    Micro,
    /// Score each pair, then take the mean over pairs.
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: ClassCode,
    pub jaccard: f64,
    pub dice: f64,
    pub empty: bool,
}

/// Headline subset of the result tables: left lung, heart, right lung.
pub const DEFAULT_SUBSET: [ClassCode; 3] = [ClassCode::LeftLung, ClassCode::Heart, ClassCode::RightLung];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassScores>,
    pub subset: Vec<ClassCode>,
    pub average_jaccard: f64,
    pub average_dice: f64,
    pub averaging: Averaging,
    pub pairs: usize,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn class(&self, code: ClassCode) -> &ClassScores {
        &self.per_class[code.index()]
    }

    /// CSV with one row per class plus an `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,jaccard,dice,empty\n");
        for s in &self.per_class {
            let _ = writeln!(out, "{},{:.6},{:.6},{}", s.class.name(), s.jaccard, s.dice, s.empty);
        }
        let _ = writeln!(out, "average,{:.6},{:.6},false", self.average_jaccard, self.average_dice);
        out
    }

    /// Markdown table laid out like the result tables (J rows, then DSC rows, in percent).
    pub fn to_markdown(&self, column: &str) -> String {
        crate::pipeline::compare::markdown_table(&[(column.to_string(), self.clone())], &self.subset)
    }
}

pub fn report(pairs: &[(LabelMap, LabelMap)], subset: &[ClassCode]) -> Result<MetricsReport> {
    report_with(pairs, subset, Averaging::Micro)
}

pub fn report_with(pairs: &[(LabelMap, LabelMap)], subset: &[ClassCode], averaging: Averaging) -> Result<MetricsReport> {
    let refs: Vec<(&LabelMap, &LabelMap)> = pairs.iter().map(|(p, t)| (p, t)).collect();
    report_refs(&refs, subset, averaging)
}

pub fn report_refs(pairs: &[(&LabelMap, &LabelMap)], subset: &[ClassCode], averaging: Averaging) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Config("report needs at least one (prediction, target) pair".into()));
    }
    if subset.is_empty() {
        return Err(Error::Config("report subset is empty".into()));
    }
    let per_pair: Vec<ConfusionCounts> = pairs.iter().map(|(p, t)| confusion(p, t)).collect::<Result<_>>()?;
    let mut total = ConfusionCounts::default();
    for c in &per_pair {
        total.merge(c);
    }
    let per_class: Vec<ClassScores> = ClassCode::ALL
        .iter()
        .map(|&class| match averaging {
            Averaging::Micro => {
                let j = jaccard(&total, class);
                let d = dice(&total, class);
                ClassScores { class, jaccard: j.value, dice: d.value, empty: j.empty }
            }
            Averaging::Macro => {
                let n = per_pair.len() as f64;
                let j: f64 = per_pair.iter().map(|c| jaccard(c, class).value).sum::<f64>() / n;
                let d: f64 = per_pair.iter().map(|c| dice(c, class).value).sum::<f64>() / n;
                let empty = per_pair.iter().all(|c| jaccard(c, class).empty);
                ClassScores { class, jaccard: j, dice: d, empty }
            }
        })
        .collect();
    let n = subset.len() as f64;
    let average_jaccard = subset.iter().map(|c| per_class[c.index()].jaccard).sum::<f64>() / n;
    let average_dice = subset.iter().map(|c| per_class[c.index()].dice).sum::<f64>() / n;
    Ok(MetricsReport {
        per_class,
        subset: subset.to_vec(),
        average_jaccard,
        average_dice,
        averaging,
        pairs: pairs.len(),
        counts: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(h: usize, w: usize, raw: &[u8]) -> LabelMap {
        LabelMap::from_raw(h, w, raw).unwrap()
    }

    #[test]
    fn perfect_prediction_has_no_errors() {
        let t = m(2, 3, &[0, 1, 2, 3, 4, 5]);
        let c = confusion(&t, &t).unwrap();
        for k in c.per_class {
            assert_eq!((k.fp, k.fn_), (0, 0));
            assert_eq!(k.total(), 6);
        }
    }

    #[test]
    fn hand_counted_two_by_two() {
        let c = confusion(&m(2, 2, &[1, 0, 0, 1]), &m(2, 2, &[1, 1, 0, 0])).unwrap();
        assert_eq!(c.class(ClassCode::RightLung), Counts { tp: 1, fp: 1, fn_: 1, tn: 1 });
    }

    #[test]
    fn all_background() {
        let z = m(2, 2, &[0; 4]);
        let c = confusion(&z, &z).unwrap();
        for code in ClassCode::ORGANS {
            assert_eq!(c.class(code), Counts { tp: 0, fp: 0, fn_: 0, tn: 4 });
            assert!(jaccard(&c, code).empty);
            assert_eq!(jaccard(&c, code).value, 1.0);
        }
    }

    #[test]
    fn formulas_on_known_counts() {
        let c = Counts { tp: 2, fp: 1, fn_: 1, tn: 0 };
        assert_eq!(jaccard_counts(&c).value, 0.5);
        assert!((dice_counts(&c).value - 2.0 / 3.0).abs() < 1e-15);
        let disjoint = Counts { tp: 0, fp: 3, fn_: 2, tn: 1 };
        assert_eq!(jaccard_counts(&disjoint).value, 0.0);
        assert_eq!(dice_counts(&disjoint).value, 0.0);
        let perfect = Counts { tp: 5, fp: 0, fn_: 0, tn: 1 };
        assert_eq!(jaccard_counts(&perfect).value, 1.0);
        assert_eq!(dice_counts(&perfect).value, 1.0);
    }

    #[test]
    fn mismatched_dims_rejected() {
        assert!(matches!(confusion(&m(1, 2, &[0, 0]), &m(2, 1, &[0, 0])), Err(Error::Shape(_))));
    }

    #[test]
    fn report_single_class_subset_and_duplication() {
        let p = m(2, 3, &[3, 3, 0, 1, 2, 0]);
        let t = m(2, 3, &[3, 0, 0, 1, 1, 2]);
        let r = report(&[(p.clone(), t.clone())], &[ClassCode::Heart]).unwrap();
        assert_eq!(r.average_jaccard, r.class(ClassCode::Heart).jaccard);
        let dup = report(&[(p.clone(), t.clone()), (p, t)], &[ClassCode::Heart]).unwrap();
        assert_eq!(dup.per_class, r.per_class);
        assert_eq!(dup.average_dice, r.average_dice);
    }

    #[test]
    fn macro_mode_differs_from_micro_when_sizes_differ() {
        let a = (m(1, 4, &[1, 1, 1, 1]), m(1, 4, &[1, 1, 1, 1]));
        let b = (m(1, 4, &[0, 0, 0, 1]), m(1, 4, &[1, 0, 0, 0]));
        let micro = report_with(&[a.clone(), b.clone()], &[ClassCode::RightLung], Averaging::Micro).unwrap();
        let mac = report_with(&[a, b], &[ClassCode::RightLung], Averaging::Macro).unwrap();
        assert!((micro.average_jaccard - 4.0 / 6.0).abs() < 1e-12);
        assert!((mac.average_jaccard - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(report(&[], &DEFAULT_SUBSET).is_err());
    }

    #[test]
    fn csv_has_header_and_average() {
        let t = m(1, 2, &[1, 2]);
        let csv = report(&[(t.clone(), t)], &DEFAULT_SUBSET).unwrap().to_csv();
        assert!(csv.starts_with("class,jaccard,dice,empty\n"));
        assert!(csv.lines().last().unwrap().starts_with("average,1.000000,1.000000"));
        assert_eq!(csv.lines().count(), 8);
    }
}
