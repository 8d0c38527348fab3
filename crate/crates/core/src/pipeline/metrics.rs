//! Entity-span F1, token accuracy and macro F1.

use std::collections::{BTreeMap, BTreeSet, HashSet};

/// A typed entity span `[start, end)` inside sentence `sent`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub sent: usize,
    pub start: usize,
    pub end: usize,
    pub kind: String,
}

/// Spans from one BIO sequence. An `I-X` that does not continue an open `X`
/// entity starts a new one.
pub fn extract_spans(sent: usize, labels: &[String]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let close = |open: &mut Option<(usize, &str)>, end: usize, spans: &mut Vec<Span>| {
        if let Some((start, kind)) = open.take() {
            spans.push(Span {
                sent,
                start,
                end,
                kind: kind.to_string(),
            });
        }
    };
    for (i, l) in labels.iter().enumerate() {
        if let Some(kind) = l.strip_prefix("B-") {
            close(&mut open, i, &mut spans);
            open = Some((i, kind));
        } else if let Some(kind) = l.strip_prefix("I-") {
            match open {
                Some((_, k)) if k == kind => {}
                _ => {
                    close(&mut open, i, &mut spans);
                    open = Some((i, kind));
                }
            }
        } else {
            close(&mut open, i, &mut spans);
        }
    }
    close(&mut open, labels.len(), &mut spans);
    spans
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: usize, n_pred: usize, n_gold: usize) -> Prf {
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

/// Exact-match entity-level precision, recall and F1.
pub fn span_f1(pred: &[Vec<String>], gold: &[Vec<String>]) -> Prf {
    assert_eq!(pred.len(), gold.len(), "sentence counts differ");
    let mut p = HashSet::new();
    let mut g = HashSet::new();
    for (i, (ps, gs)) in pred.iter().zip(gold).enumerate() {
        assert_eq!(ps.len(), gs.len(), "sentence {i} lengths differ");
        p.extend(extract_spans(i, ps));
        g.extend(extract_spans(i, gs));
    }
    let tp = p.intersection(&g).count();
    prf(tp, p.len(), g.len())
}

pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "lengths differ");
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64 / gold.len() as f64
}

/// Unweighted mean of per-class F1 over every class seen in either
/// sequence.
pub fn macro_f1<T: Ord + Clone>(pred: &[T], gold: &[T]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "lengths differ");
    let classes: BTreeSet<&T> = pred.iter().chain(gold).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&T, (usize, usize, usize)> = BTreeMap::new();
    for (p, g) in pred.iter().zip(gold) {
        counts.entry(p).or_default().1 += 1;
        counts.entry(g).or_default().2 += 1;
        if p == g {
            counts.entry(p).or_default().0 += 1;
        }
    }
    let total: f64 = classes
        .iter()
        .map(|c| {
            let (tp, np, ng) = counts.get(c).copied().unwrap_or_default();
            prf(tp, np, ng).f1
        })
        .sum();
    total / classes.len() as f64
}
