//! Token-level, type-level scoring with `O` excluded from the entity classes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::corpus::{display_type, tag_type, Corpus, OUTSIDE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassCounts {
    /// Gold tokens of this class.
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `2·TP / (2·TP + FP + FN)`; undefined for a class never seen in
    /// either gold or prediction.
    pub fn f1(&self) -> Option<f64> {
        let d = 2 * self.tp + self.fp + self.fn_;
        (d > 0).then(|| 2.0 * self.tp as f64 / d as f64)
    }
}

/// Per-class TP/FP/FN keyed by bare entity type.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    classes: BTreeMap<String, ClassCounts>,
}

impl ConfusionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes `ty` appear in reports even with zero counts.
    pub fn declare(&mut self, ty: &str) {
        let ty = tag_type(ty);
        if ty != OUTSIDE {
            self.classes.entry(ty).or_default();
        }
    }

    pub fn get(&self, ty: &str) -> ClassCounts {
        self.classes.get(&tag_type(ty)).copied().unwrap_or_default()
    }

    pub fn classes(&self) -> impl Iterator<Item = (&str, &ClassCounts)> {
        self.classes.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn pooled(&self) -> ClassCounts {
        self.classes.values().fold(ClassCounts::default(), |acc, c| ClassCounts {
            tp: acc.tp + c.tp,
            fp: acc.fp + c.fp,
            fn_: acc.fn_ + c.fn_,
        })
    }

    /// Associative merge of two partial counts.
    pub fn merge(mut self, other: &ConfusionCounts) -> Self {
        for (k, v) in &other.classes {
            let e = self.classes.entry(k.clone()).or_default();
            e.tp += v.tp;
            e.fp += v.fp;
            e.fn_ += v.fn_;
        }
        self
    }

    pub fn add_sequence<S: AsRef<str>, T: AsRef<str>>(&mut self, pred: &[S], gold: &[T]) -> Result<()> {
        if pred.len() != gold.len() {
            return Err(Error::Contract(format!(
                "prediction has {} tokens, gold has {}",
                pred.len(),
                gold.len()
            )));
        }
        for (p, g) in pred.iter().zip(gold) {
            let (p, g) = (tag_type(p.as_ref()), tag_type(g.as_ref()));
            if p == g {
                if p != OUTSIDE {
                    self.classes.entry(p).or_default().tp += 1;
                }
                continue;
            }
            if p != OUTSIDE {
                self.classes.entry(p).or_default().fp += 1;
            }
            if g != OUTSIDE {
                self.classes.entry(g).or_default().fn_ += 1;
            }
        }
        Ok(())
    }
}

pub fn count_confusion<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::new();
    c.add_sequence(pred, gold)?;
    Ok(c)
}

/// Micro-averaged F1 over every entity class.
pub fn f1_global(counts: &ConfusionCounts) -> Option<f64> {
    let pooled = counts.pooled();
    pooled.precision()?;
    pooled.recall()?;
    pooled.f1()
}

pub fn f1_macro(per_class_f1: &[f64]) -> Result<f64> {
    if per_class_f1.is_empty() {
        return Err(Error::Domain("macro average of no classes".into()));
    }
    Ok(per_class_f1.iter().sum::<f64>() / per_class_f1.len() as f64)
}

pub fn f1_weighted(per_class_f1: &[f64], supports: &[usize]) -> Result<f64> {
    if per_class_f1.len() != supports.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} supports",
            per_class_f1.len(),
            supports.len()
        )));
    }
    let total: usize = supports.iter().sum();
    if total == 0 {
        return Err(Error::Domain("weighted average with zero total support".into()));
    }
    let num: f64 = per_class_f1.iter().zip(supports).map(|(f, &n)| f * n as f64).sum();
    Ok(num / total as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassRow {
    pub class: String,
    pub counts: ClassCounts,
    pub f1: Option<f64>,
}

/// Per-class F1 plus the three aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ClassRow>,
    pub global: Option<f64>,
    pub weighted: Option<f64>,
    pub macro_avg: Option<f64>,
    /// Classes whose F1 was undefined and counted as 0 in the macro average.
    pub undefined: usize,
}

impl Report {
    pub fn from_counts(counts: &ConfusionCounts) -> Self {
        let rows: Vec<ClassRow> = counts
            .classes()
            .map(|(c, k)| ClassRow {
                class: c.to_string(),
                counts: *k,
                f1: k.f1(),
            })
            .collect();
        let f1s: Vec<f64> = rows.iter().map(|r| r.f1.unwrap_or(0.0)).collect();
        let supports: Vec<usize> = rows.iter().map(|r| r.counts.support()).collect();
        Report {
            global: f1_global(counts),
            weighted: f1_weighted(&f1s, &supports).ok(),
            macro_avg: f1_macro(&f1s).ok(),
            undefined: rows.iter().filter(|r| r.f1.is_none()).count(),
            rows,
        }
    }

    pub fn f1(&self, class: &str) -> Option<f64> {
        let class = tag_type(class);
        self.rows.iter().find(|r| r.class == class).and_then(|r| r.f1)
    }

    /// Macro average restricted to `classes` (undefined counts as 0).
    pub fn macro_over(&self, classes: &[&str]) -> Option<f64> {
        let f: Vec<f64> = classes.iter().map(|c| self.f1(c).unwrap_or(0.0)).collect();
        f1_macro(&f).ok()
    }

    /// Support-weighted average restricted to `classes`.
    pub fn weighted_over(&self, classes: &[&str]) -> Option<f64> {
        let picked: Vec<&ClassRow> = self
            .rows
            .iter()
            .filter(|r| classes.iter().any(|c| tag_type(c) == r.class))
            .collect();
        let f: Vec<f64> = picked.iter().map(|r| r.f1.unwrap_or(0.0)).collect();
        let n: Vec<usize> = picked.iter().map(|r| r.counts.support()).collect();
        f1_weighted(&f, &n).ok()
    }

    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undef".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        out.push_str("# token-level, type-level F1; class O excluded from all rows\n");
        let _ = writeln!(out, "{:<18}{:>8}{:>10}", "Class", "F1", "Support");
        for r in &self.rows {
            let _ = writeln!(out, "{:<18}{:>8}{:>10}", display_type(&r.class), fmt(r.f1), r.counts.support());
        }
        let support: usize = self.rows.iter().map(|r| r.counts.support()).sum();
        let _ = writeln!(out, "{:<18}{:>8}{:>10}", "All classes", fmt(self.global), support);
        let _ = writeln!(out, "{:<18}{:>8}", "Weighted Average", fmt(self.weighted));
        let _ = writeln!(out, "{:<18}{:>8}", "Macro Average", fmt(self.macro_avg));
        if self.undefined > 0 {
            let _ = writeln!(out, "# {} class(es) with undefined F1 counted as 0 in the macro average", self.undefined);
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undef".to_string(), |x| format!("{x}"));
        let mut out = String::from("class,f1,support\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.class, fmt(r.f1), r.counts.support());
        }
        let support: usize = self.rows.iter().map(|r| r.counts.support()).sum();
        let _ = writeln!(out, "all_classes,{},{}", fmt(self.global), support);
        let _ = writeln!(out, "weighted_average,{},{}", fmt(self.weighted), support);
        let _ = writeln!(out, "macro_average,{},{}", fmt(self.macro_avg), support);
        out
    }
}

/// Scores predicted tag sequences against gold ones.
pub fn report_sequences<S: AsRef<str>, T: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<T>], declared: &[&str]) -> Result<Report> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predicted sentences, {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let mut counts = ConfusionCounts::new();
    for ty in declared {
        counts.declare(ty);
    }
    for (p, g) in pred.iter().zip(gold) {
        counts.add_sequence(p, g)?;
    }
    Ok(Report::from_counts(&counts))
}

/// Scores two aligned corpora; every entity type of the gold tag set appears
/// as a row.
pub fn report(pred: &Corpus, gold: &Corpus) -> Result<Report> {
    if pred.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predicted sentences, {} gold",
            pred.len(),
            gold.len()
        )));
    }
    let p: Vec<Vec<&str>> = pred.sentences.iter().map(|s| s.tags()).collect();
    let g: Vec<Vec<&str>> = gold.sentences.iter().map(|s| s.tags()).collect();
    for (i, (ps, gs)) in pred.sentences.iter().zip(&gold.sentences).enumerate() {
        if ps.surfaces() != gs.surfaces() {
            return Err(Error::Contract(format!("sentence {i} tokens differ between files")));
        }
    }
    let declared: Vec<&str> = gold.tagset.type_names().iter().map(String::as_str).collect();
    report_sequences(&p, &g, &declared)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_sequences_have_no_errors() {
        let c = count_confusion(&["B-geo", "O", "I-per"], &["B-geo", "O", "I-per"]).unwrap();
        assert!(c.classes().all(|(_, k)| k.fp == 0 && k.fn_ == 0));
        assert_eq!(f1_global(&c), Some(1.0));
    }

    #[test]
    fn substitution_counts() {
        let c = count_confusion(&["per"], &["geo"]).unwrap();
        assert_eq!(c.get("geo"), ClassCounts { tp: 0, fp: 0, fn_: 1 });
        assert_eq!(c.get("per"), ClassCounts { tp: 0, fp: 1, fn_: 0 });
        assert!(count_confusion(&["O"], &["O", "O"]).is_err());
    }

    #[test]
    fn global_f1_examples() {
        let mut c = ConfusionCounts::new();
        c.classes.insert("geo".into(), ClassCounts { tp: 1, fp: 1, fn_: 1 });
        assert!((f1_global(&c).unwrap() - 0.5).abs() < 1e-15);

        let mut c = ConfusionCounts::new();
        c.classes.insert("geo".into(), ClassCounts { tp: 5, fp: 1, fn_: 3 });
        c.classes.insert("per".into(), ClassCounts { tp: 3, fp: 1, fn_: 1 });
        let pooled = c.pooled();
        assert_eq!(pooled.precision(), Some(0.8));
        assert!((pooled.recall().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1_global(&c).unwrap() - 0.727_272_727_272_727_3).abs() < 1e-12);

        assert_eq!(f1_global(&ConfusionCounts::new()), None);
    }

    #[test]
    fn macro_and_weighted_examples() {
        assert!((f1_macro(&[0.3; 4]).unwrap() - 0.3).abs() < 1e-15);
        assert!(f1_macro(&[]).is_err());
        assert_eq!(f1_weighted(&[1.0, 0.0], &[3, 1]).unwrap(), 0.75);
        let f = [0.2, 0.5, 0.9];
        let eq = f1_weighted(&f, &[4, 4, 4]).unwrap();
        assert!((eq - f1_macro(&f).unwrap()).abs() < 1e-15);
        assert!((f1_weighted(&[0.4; 3], &[1, 7, 2]).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(f1_weighted(&[0.5], &[0]), Err(Error::Domain(_))));
    }

    #[test]
    fn single_class_report() {
        let r = report_sequences(&[vec!["B-geo", "O"]], &[vec!["B-geo", "B-geo"]], &[]).unwrap();
        assert_eq!(r.rows.len(), 1);
        let f = r.rows[0].f1.unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.global, Some(f));
        assert_eq!(r.weighted, Some(f));
        assert_eq!(r.macro_avg, Some(f));
    }

    #[test]
    fn declared_but_absent_class_is_undefined() {
        let r = report_sequences(&[vec!["geo"]], &[vec!["geo"]], &["O", "art"]).unwrap();
        assert_eq!(r.f1("art"), None);
        assert_eq!(r.undefined, 1);
        assert_eq!(r.macro_avg, Some(0.5));
        assert!(r.render_table().contains("undef"));
        assert!(r.render_csv().starts_with("class,f1,support\n"));
    }
}
