//! Top-N, mean first rank and mean average rank against ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;
use crate::voting::RankedReport;

/// `truth.json`: bug id -> buggy method ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruth(pub BTreeMap<String, BTreeSet<String>>);

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let truth: GroundTruth = util::read_json(path)?;
        truth.validate().map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Ok(truth)
    }

    pub fn validate(&self) -> Result<()> {
        match self.0.iter().find(|(_, methods)| methods.is_empty()) {
            Some((bug, _)) => Err(Error::Integrity(format!("bug {bug} has no buggy methods"))),
            None => Ok(()),
        }
    }

    pub fn get(&self, bug_id: &str) -> Option<&BTreeSet<String>> {
        self.0.get(bug_id)
    }
}

/// Where a buggy method that is not found counts as sitting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallSet {
    /// Absent methods rank at list length + 1.
    #[default]
    FullList,
    /// Only the first `n` entries count; anything else ranks at `n + 1`.
    Window(usize),
}

impl RecallSet {
    fn absent_rank(self, len: usize) -> usize {
        match self {
            RecallSet::FullList => len + 1,
            RecallSet::Window(n) => n + 1,
        }
    }

    fn visible(self, rank: usize) -> bool {
        match self {
            RecallSet::FullList => true,
            RecallSet::Window(n) => rank <= n,
        }
    }
}

/// 1 if any of the first `n` entries is buggy.
pub fn top_n(report: &RankedReport, truth: &BTreeSet<String>, n: usize) -> u32 {
    report.method_ids().take(n).any(|m| truth.contains(m)) as u32
}

fn rank_of(report: &RankedReport, method: &str, recall: RecallSet) -> usize {
    let absent = recall.absent_rank(report.entries.len());
    report
        .method_ids()
        .position(|m| m == method)
        .map(|i| i + 1)
        .filter(|&r| recall.visible(r))
        .unwrap_or(absent)
}

pub fn first_rank(report: &RankedReport, truth: &BTreeSet<String>) -> usize {
    first_rank_with(report, truth, RecallSet::FullList)
}

pub fn first_rank_with(report: &RankedReport, truth: &BTreeSet<String>, recall: RecallSet) -> usize {
    truth
        .iter()
        .map(|m| rank_of(report, m, recall))
        .min()
        .unwrap_or_else(|| recall.absent_rank(report.entries.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugRecord {
    pub bug_id: String,
    pub project: String,
    pub list_length: usize,
    pub first_rank: usize,
    /// Rank of every buggy method, absent ones included.
    pub ranks: BTreeMap<String, usize>,
    pub average_rank: f64,
    pub top1: u32,
    pub top5: u32,
    pub top10: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub project: String,
    pub bugs: usize,
    pub top1: u32,
    pub top5: u32,
    pub top10: u32,
    pub mfr: f64,
    pub mar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_set: RecallSet,
    pub bugs: Vec<BugRecord>,
    pub projects: Vec<Summary>,
    pub total: Summary,
}

/// Project of a bug id such as `Lang-33`: everything before the last `-`.
pub fn project_of(bug_id: &str) -> &str {
    bug_id.rsplit_once('-').map_or(bug_id, |(p, _)| p)
}

fn summarize(project: &str, bugs: &[&BugRecord]) -> Summary {
    let n = bugs.len() as f64;
    Summary {
        project: project.to_owned(),
        bugs: bugs.len(),
        top1: bugs.iter().map(|b| b.top1).sum(),
        top5: bugs.iter().map(|b| b.top5).sum(),
        top10: bugs.iter().map(|b| b.top10).sum(),
        mfr: bugs.iter().map(|b| b.first_rank as f64).sum::<f64>() / n,
        mar: bugs.iter().map(|b| b.average_rank).sum::<f64>() / n,
    }
}

pub fn aggregate(reports: &[RankedReport], truth: &GroundTruth) -> Result<EvalReport> {
    aggregate_with(reports, truth, RecallSet::FullList)
}

pub fn aggregate_with(reports: &[RankedReport], truth: &GroundTruth, recall: RecallSet) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::Argument("no ranked reports to evaluate".into()));
    }
    let mut sorted: Vec<&RankedReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.bug_id.cmp(&b.bug_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].bug_id == w[1].bug_id) {
        return Err(Error::Integrity(format!("two reports for bug {}", w[0].bug_id)));
    }
    let mut bugs = Vec::with_capacity(sorted.len());
    for r in sorted {
        let methods = truth
            .get(&r.bug_id)
            .filter(|m| !m.is_empty())
            .ok_or_else(|| Error::Integrity(format!("no ground truth for bug {}", r.bug_id)))?;
        let ranks: BTreeMap<String, usize> = methods.iter().map(|m| (m.clone(), rank_of(r, m, recall))).collect();
        let first = *ranks.values().min().expect("non-empty truth");
        let found = first < recall.absent_rank(r.entries.len());
        let hit = |n: usize| (found && first <= n) as u32;
        bugs.push(BugRecord {
            bug_id: r.bug_id.clone(),
            project: project_of(&r.bug_id).to_owned(),
            list_length: r.entries.len(),
            first_rank: first,
            average_rank: ranks.values().sum::<usize>() as f64 / ranks.len() as f64,
            ranks,
            top1: hit(1),
            top5: hit(5),
            top10: hit(10),
        });
    }
    let mut by_project: BTreeMap<&str, Vec<&BugRecord>> = BTreeMap::new();
    for b in &bugs {
        by_project.entry(&b.project).or_default().push(b);
    }
    let projects = by_project.iter().map(|(p, bs)| summarize(p, bs)).collect();
    let total = summarize("Total", &bugs.iter().collect::<Vec<_>>());
    Ok(EvalReport {
        recall_set: recall,
        bugs,
        projects,
        total,
    })
}

impl EvalReport {
    /// One row per project followed by the total row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("project,bugs,top1,top5,top10,mfr,mar\n");
        for row in self.projects.iter().chain(std::iter::once(&self.total)) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.2},{:.2}",
                row.project, row.bugs, row.top1, row.top5, row.top10, row.mfr, row.mar
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voting::{Evidence, RankedEntry};

    pub(crate) fn ranked(bug: &str, ids: &[&str]) -> RankedReport {
        RankedReport {
            bug_id: bug.into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, m)| RankedEntry {
                    method_id: m.to_string(),
                    score: (ids.len() - i) as f64,
                    rank: i + 1,
                    evidence: Evidence::default(),
                    explanation: None,
                })
                .collect(),
            warnings: vec![],
        }
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn definitions() {
        let r = ranked("b-1", &["m2", "m1", "m3"]);
        assert_eq!(top_n(&r, &set(&["m1"]), 1), 0);
        assert_eq!(top_n(&r, &set(&["m1"]), 5), 1);
        assert_eq!(top_n(&r, &set(&["m9"]), 10), 0);
        assert_eq!(first_rank(&r, &set(&["m1"])), 2);
        assert_eq!(first_rank(&ranked("b", &["m2", "m3", "m4"]), &set(&["m1"])), 4);
        assert_eq!(first_rank(&ranked("b", &["m2", "m3"]), &set(&["m2", "m3"])), 1);
    }

    #[test]
    fn window_clamps_absent_rank() {
        let r = ranked("b", &["a", "b", "c", "d", "e", "f"]);
        assert_eq!(first_rank_with(&r, &set(&["f"]), RecallSet::Window(3)), 4);
        assert_eq!(first_rank_with(&r, &set(&["b"]), RecallSet::Window(3)), 2);
    }

    #[test]
    fn arithmetic() {
        let truth = GroundTruth(
            [("p-1".to_string(), set(&["a"])), ("p-2".to_string(), set(&["c", "x"]))].into(),
        );
        let reports = [ranked("p-1", &["a", "b"]), ranked("p-2", &["a", "b", "c", "d"])];
        let e = aggregate(&reports, &truth).unwrap();
        assert_eq!(e.total.mfr, 2.0);
        // p-2: c at 3, x absent at 5
        assert_eq!(e.bugs[1].average_rank, 4.0);
        assert_eq!(e.total.mar, 2.5);
        assert_eq!((e.total.top1, e.total.top5, e.total.top10), (1, 2, 2));
        assert!(matches!(aggregate(&[ranked("q-1", &["a"])], &truth), Err(Error::Integrity(_))));
    }
}
