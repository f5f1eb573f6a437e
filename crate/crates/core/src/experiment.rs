//! End-to-end runs: stage 1 over a task family, then stage 2 for the target
//! under one or more transfer modes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::numkit::{argmax, splitmix64, Rng};
use crate::store_io::{MetricsRecord, RecordKind};
use crate::testbed::{learn_tpvs, make_task_family, prompt_tune, FamilySpec, PromptTuneConfig, SyntheticTask, TaskSpec, ToyModel, TuneOutcome};
use crate::tpv::{cosine_prompt_sim, sim, SoftPrompt, TaskPromptVector};
use crate::transfer::{run_transfer, training_view, TransferConfig, TransferMode, TransferOutcome};

const MODEL_STREAM: u64 = 0x6d6f_6465_6c00;
const INIT_STREAM: u64 = 0x1a17;

/// How a source relates to the target by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Helpful,
    Conflicting,
    Unrelated,
}

/// Everything stage 2 needs for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub model: ToyModel,
    pub p_init: SoftPrompt,
    pub target: SyntheticTask,
    /// Stage-1 vector of the target trained on its full training set. Used
    /// only for diagnostics, never by the transfer modes.
    pub target_tpv: TaskPromptVector,
    pub sources: Vec<TaskPromptVector>,
    pub relations: Vec<Relation>,
    pub stage1: Vec<TuneOutcome>,
}

pub fn model_seed(seed: u64) -> u64 {
    splitmix64(seed ^ MODEL_STREAM)
}

pub fn initial_prompt(seed: u64, d: usize, r: usize, std: f64) -> SoftPrompt {
    SoftPrompt::random(&mut Rng::new(seed).fork(INIT_STREAM), d, r, std)
}

/// Frozen model, task family and shared initialization for one seed.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: ToyModel,
    pub tasks: Vec<SyntheticTask>,
    pub p_init: SoftPrompt,
}

impl Setup {
    pub fn task(&self, id: &str) -> Result<&SyntheticTask> {
        self.tasks
            .iter()
            .find(|t| t.task_id == id)
            .ok_or_else(|| Error::config(format!("task {id:?} is not in the task family")))
    }
}

pub fn setup(cfg: &ExperimentConfig, seed: u64) -> Result<Setup> {
    cfg.validate()?;
    Ok(Setup {
        model: ToyModel::new(cfg.model, model_seed(seed))?,
        tasks: make_task_family(&cfg.family, cfg.model.classes, cfg.model.vocab, seed)?,
        p_init: initial_prompt(seed, cfg.model.d, cfg.prompt_len, cfg.init_std),
    })
}

/// Builds the model, the task family and the shared initialization for
/// `seed`, then runs stage 1 on every task.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let Setup { model, tasks, p_init } = setup(cfg, seed)?;
    let stage1_cfg = PromptTuneConfig { seed, ..cfg.stage1 };
    let learned = learn_tpvs(&model, &tasks, &stage1_cfg, &p_init)?;

    let t_idx = tasks
        .iter()
        .position(|t| t.task_id == cfg.target)
        .ok_or_else(|| Error::config(format!("target {:?} is not in the task family", cfg.target)))?;
    let t_spec = &cfg.family.tasks[t_idx];
    let mut sources = Vec::new();
    let mut relations = Vec::new();
    let mut stage1 = Vec::new();
    let mut target_tpv = None;
    for (i, (tpv, out)) in learned.into_iter().enumerate() {
        stage1.push(out);
        if i == t_idx {
            target_tpv = Some(tpv);
            continue;
        }
        let spec = &cfg.family.tasks[i];
        relations.push(if spec.group != t_spec.group {
            Relation::Unrelated
        } else if spec.polarity == t_spec.polarity {
            Relation::Helpful
        } else {
            Relation::Conflicting
        });
        sources.push(tpv);
    }
    Ok(Prepared {
        seed,
        model,
        p_init,
        target: tasks[t_idx].clone(),
        target_tpv: target_tpv.expect("target index is in range"),
        sources,
        relations,
        stage1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub seed: u64,
    pub mean_helpful: f64,
    pub mean_conflicting: f64,
    pub passed: bool,
}

/// Mean stage-1 similarity of helpful and of conflicting sources to the
/// target. The gate passes when helpful sources are strictly more similar.
pub fn validity_gate(p: &Prepared) -> Result<GateReport> {
    let mean_of = |rel: Relation| -> Result<f64> {
        let vals: Vec<f64> = p
            .sources
            .iter()
            .zip(&p.relations)
            .filter(|(_, r)| **r == rel)
            .map(|(s, _)| sim(s, &p.target_tpv))
            .collect::<Result<_>>()?;
        if vals.is_empty() {
            return Err(Error::config(format!("no {rel:?} sources in the family")));
        }
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mean_helpful = mean_of(Relation::Helpful)?;
    let mean_conflicting = mean_of(Relation::Conflicting)?;
    Ok(GateReport {
        seed: p.seed,
        mean_helpful,
        mean_conflicting,
        passed: mean_helpful > mean_conflicting,
    })
}

/// Plain prompt tuning on the target under the stage-2 data view and
/// settings; the reference that `no_transfer_pt` reduces to.
pub fn target_baseline(cfg: &ExperimentConfig, s: &Setup, seed: u64) -> Result<TuneOutcome> {
    let tcfg = TransferConfig { seed, ..cfg.transfer.clone() };
    let task = training_view(s.task(&cfg.target)?, &tcfg);
    prompt_tune(&s.model, &task, &tcfg.as_prompt_tune(), &s.p_init)
}

pub fn run_mode(cfg: &ExperimentConfig, p: &Prepared, mode: TransferMode) -> Result<TransferOutcome> {
    let mut tcfg = cfg.transfer.clone();
    tcfg.mode = mode;
    tcfg.seed = p.seed;
    run_transfer(&p.model, &p.target, &p.sources, &p.p_init, &tcfg)
}

/// Result of running several modes over several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub gates: Vec<GateReport>,
    /// Every stage-2 record of every run, in run order.
    pub records: Vec<MetricsRecord>,
}

pub fn compare(cfg: &ExperimentConfig, seeds: &[u64], modes: &[TransferMode]) -> Result<Comparison> {
    let mut gates = Vec::new();
    let mut records = Vec::new();
    for &seed in seeds {
        let p = prepare(cfg, seed)?;
        gates.push(validity_gate(&p)?);
        for &mode in modes {
            records.extend(run_mode(cfg, &p, mode)?.records);
        }
    }
    Ok(Comparison { gates, records })
}

/// Family for retrieval trials: one source shares the target's signal with
/// equal polarity, one with flipped polarity, and two come from unrelated
/// signal groups.
pub fn retrieval_family(base: &FamilySpec) -> FamilySpec {
    let task = |id: &str, group: &str, polarity: i8| TaskSpec {
        id: id.into(),
        group: group.into(),
        polarity,
        share: 1.0,
    };
    FamilySpec {
        tasks: vec![
            task("target", "g0", 1),
            task("unrelated0", "g1", 1),
            task("conflicting", "g0", -1),
            task("related", "g0", 1),
            task("unrelated1", "g2", 1),
        ],
        ..base.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTrial {
    pub seed: u64,
    pub tpv_pick: String,
    pub cosine_pick: String,
    pub tpv_correct: bool,
    pub cosine_correct: bool,
}

/// Runs stage 1 on the retrieval family and asks which source each metric
/// ranks closest to the target (lowest index on ties).
pub fn retrieval_trial(cfg: &ExperimentConfig, seed: u64) -> Result<RetrievalTrial> {
    let cfg = ExperimentConfig {
        family: retrieval_family(&cfg.family),
        target: "target".into(),
        ..cfg.clone()
    };
    let p = prepare(&cfg, seed)?;
    let by_tpv: Vec<f64> = p.sources.iter().map(|s| sim(s, &p.target_tpv)).collect::<Result<_>>()?;
    let p_target = p.target_tpv.apply(&p.p_init)?;
    let by_cosine: Vec<f64> = p
        .sources
        .iter()
        .map(|s| cosine_prompt_sim(&s.apply(&p.p_init)?, &p_target))
        .collect::<Result<_>>()?;
    let pick = |scores: &[f64]| argmax(scores).expect("family has sources");
    let (t, c) = (pick(&by_tpv), pick(&by_cosine));
    Ok(RetrievalTrial {
        seed,
        tpv_pick: p.sources[t].task_id.clone(),
        cosine_pick: p.sources[c].task_id.clone(),
        tpv_correct: p.relations[t] == Relation::Helpful,
        cosine_correct: p.relations[c] == Relation::Helpful,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation (zero for a single run).
    pub sd: f64,
    /// Test accuracy per seed.
    pub per_seed: BTreeMap<u64, f64>,
}

/// Test accuracy of each final record, keyed by mode then seed.
pub fn final_accuracies(records: &[MetricsRecord]) -> BTreeMap<String, BTreeMap<u64, f64>> {
    let mut out: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == RecordKind::Final) {
        if let Some(acc) = r.test_accuracy {
            out.entry(r.mode.clone()).or_default().insert(r.seed, acc);
        }
    }
    out
}

/// Per-mode mean and standard deviation of test accuracy, computed from the
/// final records alone. Modes appear in the order of their first record.
pub fn summarize(records: &[MetricsRecord]) -> Vec<ModeSummary> {
    let accs = final_accuracies(records);
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.mode.as_str()) {
            order.push(&r.mode);
        }
    }
    order
        .into_iter()
        .filter_map(|mode| {
            let per_seed = accs.get(mode)?.clone();
            let n = per_seed.len();
            let mean = per_seed.values().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (per_seed.values().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            Some(ModeSummary {
                mode: mode.to_owned(),
                runs: n,
                mean,
                sd,
                per_seed,
            })
        })
        .collect()
}

pub fn format_table(summary: &[ModeSummary]) -> String {
    let width = summary.iter().map(|s| s.mode.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  runs  test accuracy\n", "mode");
    for s in summary {
        out.push_str(&format!("{:<width$}  {:>4}  {:.4} ± {:.4}\n", s.mode, s.runs, s.mean, s.sd));
    }
    out
}
