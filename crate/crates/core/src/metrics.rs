//! Generation scoring and continual-learning metrics.
//!
//! Scores in the stage-by-task matrix use the 0–100 scale; [`rouge_l`]
//! itself returns a value in `[0, 1]`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Handler, RoutingTrace};

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

/// Length of the longest common subsequence, O(|a|·|b|) time and O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    const INLINE: usize = 64;
    if b.len() < INLINE {
        let mut row = [0usize; INLINE];
        lcs_rows(a, b, &mut row[..=b.len()])
    } else {
        lcs_rows(a, b, &mut vec![0usize; b.len() + 1])
    }
}

fn lcs_rows<T: PartialEq>(a: &[T], b: &[T], row: &mut [usize]) -> usize {
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// F-measure of ROUGE-L (β = 1) over lowercased whitespace tokens, no stemming.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_tokens(&tokens(candidate), &tokens(reference))
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Mean of per-instance scores, scaled to 0–100.
pub fn average_rouge(per_instance: &[f64]) -> Result<f64> {
    if per_instance.is_empty() {
        return Err(Error::invalid("cannot average an empty score list"));
    }
    Ok(100.0 * per_instance.iter().sum::<f64>() / per_instance.len() as f64)
}

/// `a[i][j]`: score of task `j` after stage `i` (both 0-based). Row `i` holds
/// tasks `0..=i`; only that lower triangle is ever defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    tasks: usize,
    a: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            a: Vec::with_capacity(tasks),
        }
    }

    pub fn from_rows(tasks: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(tasks);
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row for the next stage; it must cover exactly the tasks seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let stage = self.a.len();
        if stage >= self.tasks {
            return Err(Error::Matrix(format!("all {} stages already recorded", self.tasks)));
        }
        if row.len() != stage + 1 {
            return Err(Error::Matrix(format!(
                "stage {} row needs {} entries, got {}",
                stage + 1,
                stage + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(Error::Matrix(format!("score {bad} outside [0, 100]")));
        }
        self.a.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn stages_recorded(&self) -> usize {
        self.a.len()
    }

    pub fn is_complete(&self) -> bool {
        self.a.len() == self.tasks
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.a.get(stage)?.get(task).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.a
    }

    fn final_row(&self) -> Result<&[f64]> {
        if self.tasks == 0 {
            return Err(Error::Matrix("matrix has no tasks".into()));
        }
        if !self.is_complete() {
            return Err(Error::Matrix(format!(
                "final row missing: {} of {} stages recorded",
                self.a.len(),
                self.tasks
            )));
        }
        Ok(&self.a[self.tasks - 1])
    }

    /// Average score over all tasks at the final stage.
    pub fn ar(&self) -> Result<f64> {
        let last = self.final_row()?;
        Ok(last.iter().sum::<f64>() / self.tasks as f64)
    }

    /// Mean of `a[T][i] - a[i][i]` over the tasks learned before the last one.
    /// Negative values mean forgetting.
    pub fn bwt(&self) -> Result<f64> {
        if self.tasks < 2 {
            return Err(Error::Matrix("BWT needs at least two tasks".into()));
        }
        let last = self.final_row()?;
        let sum: f64 = (0..self.tasks - 1).map(|i| last[i] - self.a[i][i]).sum();
        Ok(sum / (self.tasks - 1) as f64)
    }
}

/// Ground truth or prediction for routing: a task's expert, or the base model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteLabel {
    Task(String),
    Base,
}

impl From<&Handler> for RouteLabel {
    fn from(h: &Handler) -> Self {
        match h {
            Handler::Expert { task_id, .. } => RouteLabel::Task(task_id.clone()),
            Handler::Base => RouteLabel::Base,
        }
    }
}

impl From<&str> for RouteLabel {
    fn from(s: &str) -> Self {
        RouteLabel::Task(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingF1 {
    pub per_task: BTreeMap<String, f64>,
    /// One-vs-rest F1 of the base class, when it occurs in truth or predictions.
    pub base: Option<f64>,
    /// Unweighted mean over expert tasks; base excluded.
    pub macro_f1: f64,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// One-vs-rest F1 on handler labels. Classes are every task appearing in
/// either truth or predictions, plus base.
pub fn routing_f1(traces: &[RoutingTrace], truth: &[RouteLabel]) -> Result<RoutingF1> {
    let predicted: Vec<RouteLabel> = traces.iter().map(|t| RouteLabel::from(&t.handler)).collect();
    routing_f1_labels(&predicted, truth)
}

pub fn routing_f1_labels(predicted: &[RouteLabel], truth: &[RouteLabel]) -> Result<RoutingF1> {
    if predicted.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} traces but {} truth labels",
            predicted.len(),
            truth.len()
        )));
    }
    let classes: BTreeSet<&RouteLabel> = predicted.iter().chain(truth).collect();
    let mut per_task = BTreeMap::new();
    let mut base = None;
    for class in classes {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, t) in predicted.iter().zip(truth) {
            match (p == class, t == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        match class {
            RouteLabel::Task(id) => {
                per_task.insert(id.clone(), f1(tp, fp, fn_));
            }
            RouteLabel::Base => base = Some(f1(tp, fp, fn_)),
        }
    }
    if per_task.is_empty() {
        return Err(Error::invalid("routing F1 needs at least one expert task"));
    }
    let macro_f1 = per_task.values().sum::<f64>() / per_task.len() as f64;
    Ok(RoutingF1 {
        per_task,
        base,
        macro_f1,
    })
}

/// Fraction of (out-of-distribution) traces that ended at the base model.
pub fn rb_acc(traces: &[RoutingTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::invalid("RB-Acc of an empty trace list"));
    }
    let base = traces.iter().filter(|t| t.handler == Handler::Base).count();
    Ok(base as f64 / traces.len() as f64)
}

pub fn handler_counts(traces: &[RoutingTrace]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for t in traces {
        *counts.entry(t.handler.label().to_string()).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ar: f64,
    /// `None` when fewer than two tasks were learned.
    pub bwt: Option<f64>,
    pub r_f1: RoutingF1,
    /// `None` when no out-of-distribution stream was evaluated.
    pub rb_acc: Option<f64>,
    pub traces_summary: BTreeMap<String, usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exponential-time LCS by recursion; independent of the DP.
    fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (Some((x, ra)), Some((y, rb))) => {
                if x == y {
                    1 + lcs_brute(ra, rb)
                } else {
                    lcs_brute(ra, b).max(lcs_brute(a, rb))
                }
            }
            _ => 0,
        }
    }

    #[test]
    fn fixed_examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge_l("", "the cat"), 0.0);
        assert_eq!(rouge_l("the cat", ""), 0.0);
        assert_eq!(rouge_l("", ""), 0.0);
        assert!((rouge_l("the cat sat", "the cat on the mat") - 0.5).abs() < 1e-15);
        assert_eq!(rouge_l("The CAT", "the cat"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
    }

    #[test]
    fn averaging() {
        assert_eq!(average_rouge(&[1.0, 1.0, 1.0]).unwrap(), 100.0);
        assert!(average_rouge(&[]).is_err());
        assert!((average_rouge(&[0.2, 0.5, 0.8]).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn ar_examples() {
        let m = ScoreMatrix::from_rows(2, vec![vec![70.0], vec![40.0, 60.0]]).unwrap();
        assert_eq!(m.ar().unwrap(), 50.0);
        let c = ScoreMatrix::from_rows(3, vec![vec![50.0], vec![50.0, 50.0], vec![50.0; 3]]).unwrap();
        assert_eq!(c.ar().unwrap(), 50.0);
        assert_eq!(c.bwt().unwrap(), 0.0);
    }

    #[test]
    fn bwt_example() {
        let m = ScoreMatrix::from_rows(3, vec![vec![50.0], vec![48.0, 50.0], vec![40.0, 45.0, 70.0]]).unwrap();
        assert_eq!(m.bwt().unwrap(), -7.5);
    }

    #[test]
    fn matrix_shape_errors() {
        let mut m = ScoreMatrix::new(2);
        assert!(m.ar().is_err());
        assert!(m.push_row(vec![1.0, 2.0]).is_err());
        m.push_row(vec![1.0]).unwrap();
        assert!(m.ar().is_err());
        assert!(m.push_row(vec![1.0, 101.0]).is_err());
        m.push_row(vec![1.0, 2.0]).unwrap();
        assert!(m.push_row(vec![1.0, 2.0, 3.0]).is_err());
        let single = ScoreMatrix::from_rows(1, vec![vec![80.0]]).unwrap();
        assert_eq!(single.ar().unwrap(), 80.0);
        assert!(single.bwt().is_err());
    }

    fn trace(handler: Handler) -> RoutingTrace {
        RoutingTrace {
            query: String::new(),
            hops: vec![],
            handler,
            answer: String::new(),
            base_elapsed_us: None,
        }
    }

    fn expert(task: &str) -> Handler {
        Handler::Expert {
            expert_id: format!("E-{task}"),
            task_id: task.into(),
        }
    }

    #[test]
    fn routing_f1_examples() {
        let truth: Vec<RouteLabel> = ["a", "b", "c", "a"].map(RouteLabel::from).to_vec();
        let perfect: Vec<_> = ["a", "b", "c", "a"].map(|t| trace(expert(t))).to_vec();
        assert_eq!(routing_f1(&perfect, &truth).unwrap().macro_f1, 1.0);

        let all_base: Vec<_> = (0..4).map(|_| trace(Handler::Base)).collect();
        let r = routing_f1(&all_base, &truth).unwrap();
        assert!(r.per_task.values().all(|v| *v == 0.0));
        assert_eq!(r.macro_f1, 0.0);
        assert_eq!(r.base, Some(0.0));

        assert!(routing_f1(&perfect[..2], &truth).is_err());
    }

    #[test]
    fn routing_f1_confusion_oracle() {
        // truth a,a,a,b,b,base ; pred a,a,b,b,base,a
        let truth = vec!["a".into(), "a".into(), "a".into(), "b".into(), "b".into(), RouteLabel::Base];
        let pred: Vec<_> = vec![expert("a"), expert("a"), expert("b"), expert("b"), Handler::Base, expert("a")]
            .into_iter()
            .map(trace)
            .collect();
        let r = routing_f1(&pred, &truth).unwrap();
        // a: tp 2, fp 1, fn 1 -> 4/6 ; b: tp 1, fp 1, fn 1 -> 2/4 ; base: tp 0 fp 1 fn 1 -> 0
        assert!((r.per_task["a"] - 4.0 / 6.0).abs() < 1e-12);
        assert!((r.per_task["b"] - 0.5).abs() < 1e-12);
        assert_eq!(r.base, Some(0.0));
        assert!((r.macro_f1 - (4.0 / 6.0 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rb_acc_examples() {
        let all: Vec<_> = (0..5).map(|_| trace(Handler::Base)).collect();
        assert_eq!(rb_acc(&all).unwrap(), 1.0);
        let none: Vec<_> = (0..5).map(|_| trace(expert("a"))).collect();
        assert_eq!(rb_acc(&none).unwrap(), 0.0);
        assert!(rb_acc(&[]).is_err());
        assert_eq!(handler_counts(&none)["E-a"], 5);
    }

    proptest! {
        #[test]
        fn dp_matches_brute_force(a in prop::collection::vec(0u8..4, 0..9), b in prop::collection::vec(0u8..4, 0..9)) {
            prop_assert_eq!(lcs_len(&a, &b), lcs_brute(&a, &b));
            let s = rouge_l_tokens(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn self_similarity(words in prop::collection::vec("[a-zA-Z]{1,5}", 1..12)) {
            let text = words.join(" ");
            prop_assert_eq!(rouge_l(&text, &text), 1.0);
        }

        #[test]
        fn macro_one_iff_exact(
            truth in prop::collection::vec(0usize..4, 1..30),
            flips in prop::collection::vec(any::<bool>(), 30),
        ) {
            let names = ["a", "b", "c", "d"];
            let truth_labels: Vec<RouteLabel> = truth.iter().map(|i| names[*i].into()).collect();
            let traces: Vec<_> = truth
                .iter()
                .zip(&flips)
                .map(|(i, f)| trace(if *f { Handler::Base } else { expert(names[*i]) }))
                .collect();
            let r = routing_f1(&traces, &truth_labels).unwrap();
            let exact = traces.iter().zip(&truth_labels).all(|(t, l)| RouteLabel::from(&t.handler) == *l);
            prop_assert_eq!(r.macro_f1 == 1.0, exact);
        }

        #[test]
        fn bwt_ignores_last_column(seed_rows in prop::collection::vec(prop::collection::vec(0.0f64..100.0, 6), 6), last in 0.0f64..100.0) {
            let rows: Vec<Vec<f64>> = seed_rows.iter().enumerate().map(|(i, r)| r[..=i].to_vec()).collect();
            let m = ScoreMatrix::from_rows(6, rows.clone()).unwrap();
            let mut rows2 = rows;
            rows2[5][5] = last;
            let m2 = ScoreMatrix::from_rows(6, rows2).unwrap();
            prop_assert!((m.bwt().unwrap() - m2.bwt().unwrap()).abs() < 1e-12);
        }
    }
}
