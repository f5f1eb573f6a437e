//! Source-task subset scoring and selection.
//!
//! Target similarity (TS) is the mean source-to-target similarity over a
//! subset; knowledge consistency (KC) is the mean pairwise similarity inside
//! it (zero for fewer than two members). [`greedy_group`] ranks sources by
//! their target similarity and admits each candidate whose similarity is
//! nonnegative and whose admission does not lower KC. [`exact_group`]
//! enumerates every subset and maximizes `TS + λ·KC`; it is the oracle the
//! heuristic is checked against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Mat, Vec64};
use crate::tpv::{sim, TaskPromptVector};

/// Largest source count [`exact_group`] will enumerate.
pub const EXACT_LIMIT: usize = 20;

/// Similarities between `n` sources and a target, and between sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTable {
    source_ids: Vec<String>,
    s2t: Vec64,
    s2s: Mat,
}

/// One step of the greedy scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub source: usize,
    pub sim: f64,
    pub delta_kc: f64,
    pub admitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingResult {
    /// Selected source indices, in admission order.
    pub selected: Vec<usize>,
    pub selected_ids: Vec<String>,
    /// Source indices by descending target similarity.
    pub rank_list: Vec<usize>,
    pub ts: f64,
    pub kc: f64,
    pub lambda: f64,
    pub objective: f64,
    pub decisions: Vec<Decision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GreedyOptions {
    /// Stop at the first rejected candidate instead of scanning the whole
    /// rank list.
    pub early_stop: bool,
    /// Require strictly positive target similarity and KC gain.
    pub strict: bool,
}

impl SimTable {
    pub fn new(source_ids: Vec<String>, s2t: Vec64, s2s: Mat) -> Result<Self> {
        let n = source_ids.len();
        if s2t.len() != n {
            return Err(Error::LengthMismatch {
                left: s2t.len(),
                right: n,
            });
        }
        if s2s.shape() != (n, n) {
            return Err(Error::ShapeMismatch {
                left: s2s.shape(),
                right: (n, n),
            });
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (s2s.get(i, j), s2s.get(j, i));
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(Error::config(format!(
                        "similarity table not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        let mut seen = std::collections::HashSet::new();
        for id in &source_ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateTask(id.clone()));
            }
        }
        Ok(SimTable { source_ids, s2t, s2s })
    }

    /// Table built from raw values with generated ids `s0, s1, ...`.
    pub fn from_values(s2t: Vec<f64>, s2s: Mat) -> Result<Self> {
        let ids = (0..s2t.len()).map(|i| format!("s{i}")).collect();
        SimTable::new(ids, Vec64::new(s2t)?, s2s)
    }

    /// Similarity table over (already rescaled) task prompt vectors.
    pub fn from_tpvs(sources: &[TaskPromptVector], target: &TaskPromptVector) -> Result<Self> {
        let n = sources.len();
        let mut s2t = Vec::with_capacity(n);
        let mut s2s = Mat::zeros(n, n);
        for (i, s) in sources.iter().enumerate() {
            s2t.push(sim(s, target)?);
            for j in i..n {
                let v = sim(s, &sources[j])?;
                s2s.set(i, j, v);
                s2s.set(j, i, v);
            }
        }
        let ids = sources.iter().map(|s| s.task_id.clone()).collect();
        SimTable::new(ids, Vec64::new(s2t)?, s2s)
    }

    pub fn n(&self) -> usize {
        self.source_ids.len()
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn s2t(&self) -> &Vec64 {
        &self.s2t
    }

    pub fn s2s(&self) -> &Mat {
        &self.s2s
    }

    fn check_subset(&self, subset: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.n()];
        for &i in subset {
            if i >= self.n() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    n: self.n(),
                });
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::DuplicateIndex(i));
            }
        }
        Ok(())
    }
}

/// Mean source-to-target similarity over a nonempty subset.
pub fn target_similarity(table: &SimTable, subset: &[usize]) -> Result<f64> {
    table.check_subset(subset)?;
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let total = subset.iter().fold(0.0, |acc, &i| acc + table.s2t[i]);
    Ok(total / subset.len() as f64)
}

/// Mean pairwise similarity inside the subset; 0 when it has fewer than two
/// members.
pub fn knowledge_consistency(table: &SimTable, subset: &[usize]) -> Result<f64> {
    table.check_subset(subset)?;
    Ok(kc_unchecked(table, subset))
}

fn kc_unchecked(table: &SimTable, subset: &[usize]) -> f64 {
    let k = subset.len();
    if k < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            total += table.s2s.get(subset[a], subset[b]);
        }
    }
    2.0 * total / (k * (k - 1)) as f64
}

/// `TS + λ·KC` on the canonical (sorted) ordering of the subset; the empty
/// subset scores 0.
pub fn subset_objective(table: &SimTable, subset: &[usize], lambda: f64) -> Result<f64> {
    table.check_subset(subset)?;
    let mut sorted = subset.to_vec();
    sorted.sort_unstable();
    Ok(objective_sorted(table, &sorted, lambda))
}

fn objective_sorted(table: &SimTable, sorted: &[usize], lambda: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let ts = sorted.iter().fold(0.0, |acc, &i| acc + table.s2t[i]) / sorted.len() as f64;
    ts + lambda * kc_unchecked(table, sorted)
}

/// Sources by descending target similarity; ties keep ascending index order.
pub fn rank_list(table: &SimTable) -> Vec<usize> {
    let mut order: Vec<usize> = (0..table.n()).collect();
    // partial_cmp so that -0.0 and 0.0 tie; entries are finite by construction
    order.sort_by(|&a, &b| {
        table.s2t[b]
            .partial_cmp(&table.s2t[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

fn finish(table: &SimTable, selected: Vec<usize>, rank: Vec<usize>, lambda: f64, decisions: Vec<Decision>) -> GroupingResult {
    let mut sorted = selected.clone();
    sorted.sort_unstable();
    let ts = if sorted.is_empty() {
        0.0
    } else {
        sorted.iter().fold(0.0, |acc, &i| acc + table.s2t[i]) / sorted.len() as f64
    };
    let kc = kc_unchecked(table, &sorted);
    GroupingResult {
        selected_ids: selected.iter().map(|&i| table.source_ids[i].clone()).collect(),
        selected,
        rank_list: rank,
        ts,
        kc,
        lambda,
        objective: objective_sorted(table, &sorted, lambda),
        decisions,
    }
}

/// Ranked greedy scan with the default options (full scan, non-strict).
pub fn greedy_group(table: &SimTable) -> GroupingResult {
    greedy_group_with(table, GreedyOptions::default())
}

/// Ranked greedy scan. Every candidate in the rank list is visited; it is
/// admitted when its target similarity is `>= 0` and adding it does not
/// decrease KC (both strict under `opts.strict`). The reported objective
/// uses λ = 1.
pub fn greedy_group_with(table: &SimTable, opts: GreedyOptions) -> GroupingResult {
    let rank = rank_list(table);
    let mut selected: Vec<usize> = Vec::new();
    let mut current_kc = 0.0;
    let mut decisions = Vec::with_capacity(rank.len());
    let pass = |v: f64| if opts.strict { v > 0.0 } else { v >= 0.0 };
    for &cand in &rank {
        let sim = table.s2t[cand];
        selected.push(cand);
        let new_kc = kc_unchecked(table, &selected);
        let delta_kc = new_kc - current_kc;
        let admitted = pass(sim) && pass(delta_kc);
        if admitted {
            current_kc = new_kc;
        } else {
            selected.pop();
        }
        decisions.push(Decision {
            source: cand,
            sim,
            delta_kc,
            admitted,
        });
        if !admitted && opts.early_stop {
            break;
        }
    }
    finish(table, selected, rank, 1.0, decisions)
}

/// Exhaustive maximization of `TS + λ·KC` over all `2^n` subsets, with the
/// empty subset scoring 0. Ties go to the smaller subset, then to the
/// lexicographically smaller sorted index list.
pub fn exact_group(table: &SimTable, lambda: f64) -> Result<GroupingResult> {
    let n = table.n();
    if n > EXACT_LIMIT {
        return Err(Error::ExactSizeLimit {
            n,
            limit: EXACT_LIMIT,
        });
    }
    let mut best: Vec<usize> = Vec::new();
    let mut best_obj = 0.0;
    let mut members = Vec::with_capacity(n);
    for mask in 1u32..(1u32 << n) {
        members.clear();
        members.extend((0..n).filter(|i| mask & (1 << i) != 0));
        let obj = objective_sorted(table, &members, lambda);
        let better = obj > best_obj
            || (obj == best_obj
                && (members.len() < best.len()
                    || (members.len() == best.len() && members < best)));
        if better {
            best_obj = obj;
            best.clone_from(&members);
        }
    }
    Ok(finish(table, best, rank_list(table), lambda, Vec::new()))
}

impl GroupingResult {
    /// `TS + λ·KC` of this selection at another λ.
    pub fn objective_at(&self, lambda: f64) -> f64 {
        if self.selected.is_empty() {
            0.0
        } else {
            self.ts + lambda * self.kc
        }
    }

    /// Checks the greedy admissibility certificate recorded in `decisions`:
    /// admitted candidates have nonnegative similarity and KC gain, and KC
    /// replayed along the admission sequence never decreases.
    pub fn check_admissible(&self, table: &SimTable) -> std::result::Result<(), String> {
        let admitted: Vec<&Decision> = self.decisions.iter().filter(|d| d.admitted).collect();
        let order: Vec<usize> = admitted.iter().map(|d| d.source).collect();
        if order != self.selected {
            return Err(format!("decision trace {order:?} disagrees with selection {:?}", self.selected));
        }
        let mut prefix = Vec::new();
        let mut last_kc = 0.0;
        for d in admitted {
            if d.sim < 0.0 || d.delta_kc < 0.0 {
                return Err(format!("source {} admitted with sim {} and ΔKC {}", d.source, d.sim, d.delta_kc));
            }
            prefix.push(d.source);
            let kc = kc_unchecked(table, &prefix);
            if kc < last_kc {
                return Err(format!("KC decreased from {last_kc} to {kc} after admitting {}", d.source));
            }
            last_kc = kc;
        }
        let mut sorted = self.selected.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.selected.len() {
            return Err("duplicate source in selection".into());
        }
        Ok(())
    }
}
