use serde::Serialize;

use crate::error::{Error, Result};
use crate::intent::Intent;

/// Levenshtein distance with unit substitution, insertion and deletion.
pub fn edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

/// Edit distance over the reference length.
pub fn wer<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::contract("WER of an empty reference is undefined"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Fraction of items whose action and every argument are right.
pub fn intent_accuracy(preds: &[Intent], golds: &[Intent]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::shape("intent_accuracy", &[preds.len()], &[golds.len()]));
    }
    if golds.is_empty() {
        return Err(Error::contract("intent accuracy over zero items"));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Class neither predicted nor present in the gold labels; its F1 is
    /// counted as 0.
    pub absent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct F1Report {
    pub macro_f1: f64,
    pub per_class: Vec<ClassScore>,
}

/// Unweighted mean of per-class F1. Undefined precision or recall counts
/// as 0.
pub fn macro_f1(preds: &[usize], golds: &[usize], n_classes: usize) -> Result<F1Report> {
    if preds.len() != golds.len() {
        return Err(Error::shape("macro_f1", &[preds.len()], &[golds.len()]));
    }
    if n_classes == 0 {
        return Err(Error::contract("macro_f1 needs at least one class"));
    }
    if let Some(bad) = preds.iter().chain(golds).find(|&&c| c >= n_classes) {
        return Err(Error::contract(format!("class id {bad} outside {n_classes} classes")));
    }
    let per_class: Vec<ClassScore> = (0..n_classes)
        .map(|c| {
            let tp = preds.iter().zip(golds).filter(|&(&p, &g)| p == c && g == c).count() as f64;
            let predicted = preds.iter().filter(|&&p| p == c).count();
            let support = golds.iter().filter(|&&g| g == c).count();
            let ratio = |n: f64, d: usize| if d == 0 { 0.0 } else { n / d as f64 };
            let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScore {
                precision,
                recall,
                f1,
                support,
                absent: predicted == 0 && support == 0,
            }
        })
        .collect();
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / n_classes as f64;
    Ok(F1Report { macro_f1, per_class })
}
