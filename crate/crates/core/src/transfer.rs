//! Stage 2: training a target prompt on top of merged source task vectors.
//!
//! Every step the merged prompt
//! `P_mix = P_init + α_t ⊙ T_t + Σ_{s ∈ S'} α_s ⊙ T_s` is fed to the frozen
//! model. The target TPV and its scaling term move with `lr_target`, the
//! scaling terms of the currently selected sources with `lr_source_alpha`.
//! In [`TransferMode::DtvgDynamic`] the group `S'` is recomputed from the
//! rescaled vectors every `regroup_every` steps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{exact_group, greedy_group_with, GreedyOptions, GroupingResult, SimTable, EXACT_LIMIT};
use crate::merging::{merge, merge_backward, MergeInputs};
use crate::store_io::{MetricsRecord, RecordKind};
use crate::testbed::{is_eval_step, prompt_tune, BatchSampler, Example, PromptTuneConfig, SyntheticTask, ToyModel};
use crate::tpv::{compute_tpv, cosine_prompt_sim, rescale, sim, ScalingTerm, SoftPrompt, TaskPromptVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    DtvgDynamic,
    FixGroup,
    OnlyTarget,
    AllForOne,
    OneForOneTpv,
    OneForOneCosine,
    NoTransferPt,
}

impl TransferMode {
    pub const ALL: [TransferMode; 7] = [
        TransferMode::DtvgDynamic,
        TransferMode::FixGroup,
        TransferMode::OnlyTarget,
        TransferMode::AllForOne,
        TransferMode::OneForOneTpv,
        TransferMode::OneForOneCosine,
        TransferMode::NoTransferPt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::DtvgDynamic => "dtvg_dynamic",
            TransferMode::FixGroup => "fix_group",
            TransferMode::OnlyTarget => "only_target",
            TransferMode::AllForOne => "all_for_one",
            TransferMode::OneForOneTpv => "one_for_one_tpv",
            TransferMode::OneForOneCosine => "one_for_one_cosine",
            TransferMode::NoTransferPt => "no_transfer_pt",
        }
    }

    /// Modes that merge source vectors during training.
    pub fn merges_sources(self) -> bool {
        matches!(self, TransferMode::DtvgDynamic | TransferMode::FixGroup | TransferMode::AllForOne)
    }

    fn trains_target_alpha(self) -> bool {
        !matches!(
            self,
            TransferMode::NoTransferPt | TransferMode::OneForOneTpv | TransferMode::OneForOneCosine
        )
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransferMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown transfer mode {s:?}")))
    }
}

/// What happens to a source's scaling term when it re-enters the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaRetention {
    /// Keep the value learned during earlier membership.
    #[default]
    Retain,
    /// Start again from all ones.
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub n_max: usize,
    pub lr_target: f64,
    pub lr_source_alpha: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TransferMode,
    pub regroup_every: usize,
    pub eval_every: usize,
    /// Examples per class kept from the target training set; 0 keeps all.
    pub few_shot_k: usize,
    pub greedy: GreedyOptions,
    /// Also solve each regroup exactly (λ = 1) and log its objective.
    pub log_exact: bool,
    pub alpha_retention: AlphaRetention,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            n_max: 100,
            lr_target: 3.0,
            lr_source_alpha: 0.4,
            batch_size: 32,
            seed: 0,
            mode: TransferMode::DtvgDynamic,
            regroup_every: 1,
            eval_every: 10,
            few_shot_k: 16,
            greedy: GreedyOptions::default(),
            log_exact: false,
            alpha_retention: AlphaRetention::Retain,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_target > 0.0) || !(self.lr_source_alpha > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.regroup_every == 0 {
            return Err(Error::config("batch_size, eval_every and regroup_every must be positive"));
        }
        Ok(())
    }

    /// Stage-1 tuner settings equivalent to this run's target updates.
    pub fn as_prompt_tune(&self) -> PromptTuneConfig {
        PromptTuneConfig {
            lr: self.lr_target,
            steps: self.n_max,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_every: self.eval_every,
            ..PromptTuneConfig::default()
        }
    }
}

/// One regrouping, together with the loss of the update it preceded and the
/// validation accuracy measured after that update (if it was an eval step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegroupEvent {
    pub step: usize,
    pub selected_ids: Vec<String>,
    pub ts: f64,
    pub kc: f64,
    pub objective: f64,
    pub exact_objective: Option<f64>,
    pub train_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub group: GroupingResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferState {
    pub step: usize,
    pub target_tpv: TaskPromptVector,
    pub target_alpha: ScalingTerm,
    /// Scaling term of every source, selected or not.
    pub source_alphas: BTreeMap<String, ScalingTerm>,
    /// Indices into the source list that are merged at the current step.
    pub selected: Vec<usize>,
    pub current_group: Option<GroupingResult>,
    pub history: Vec<RegroupEvent>,
}

impl TransferState {
    pub fn new(target_id: &str, p_init: &SoftPrompt, sources: &[TaskPromptVector]) -> Self {
        let r = p_init.r();
        TransferState {
            step: 0,
            target_tpv: TaskPromptVector::zeros(target_id, p_init),
            target_alpha: ScalingTerm::ones(target_id, r),
            source_alphas: sources
                .iter()
                .map(|s| (s.task_id.clone(), ScalingTerm::ones(s.task_id.clone(), r)))
                .collect(),
            selected: Vec::new(),
            current_group: None,
            history: Vec::new(),
        }
    }

    pub fn selected_ids(&self, sources: &[TaskPromptVector]) -> Vec<String> {
        self.selected.iter().map(|&i| sources[i].task_id.clone()).collect()
    }

    fn merge_inputs<'a>(&'a self, p_init: &'a SoftPrompt, sources: &'a [TaskPromptVector]) -> MergeInputs<'a> {
        MergeInputs {
            p_init,
            target_tpv: &self.target_tpv,
            target_alpha: &self.target_alpha,
            sources: self
                .selected
                .iter()
                .map(|&i| (&sources[i], &self.source_alphas[&sources[i].task_id]))
                .collect(),
        }
    }

    pub fn mixed_prompt(&self, p_init: &SoftPrompt, sources: &[TaskPromptVector]) -> Result<SoftPrompt> {
        merge(&self.merge_inputs(p_init, sources))
    }
}

fn check_sources(p_init: &SoftPrompt, sources: &[TaskPromptVector]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for s in sources {
        s.check_init(p_init)?;
        if !seen.insert(s.task_id.as_str()) {
            return Err(Error::DuplicateTask(s.task_id.clone()));
        }
    }
    Ok(())
}

/// Similarity table over the rescaled source and target vectors.
pub fn rescaled_table(state: &TransferState, sources: &[TaskPromptVector]) -> Result<SimTable> {
    let scaled: Vec<TaskPromptVector> = sources
        .iter()
        .map(|s| rescale(s, &state.source_alphas[&s.task_id]))
        .collect::<Result<_>>()?;
    let target = rescale(&state.target_tpv, &state.target_alpha)?;
    SimTable::from_tpvs(&scaled, &target)
}

/// Recomputes `S'` with the greedy heuristic and makes it current. The
/// returned event has no loss or accuracy yet.
pub fn regroup(state: &mut TransferState, sources: &[TaskPromptVector], cfg: &TransferConfig) -> Result<RegroupEvent> {
    let table = rescaled_table(state, sources)?;
    let group = greedy_group_with(&table, cfg.greedy);
    let exact_objective = if cfg.log_exact && table.n() <= EXACT_LIMIT {
        Some(exact_group(&table, 1.0)?.objective)
    } else {
        None
    };
    if cfg.alpha_retention == AlphaRetention::Reset {
        let r = state.target_alpha.alpha.len();
        for &i in &group.selected {
            if !state.selected.contains(&i) {
                let id = &sources[i].task_id;
                state.source_alphas.insert(id.clone(), ScalingTerm::ones(id.clone(), r));
            }
        }
    }
    state.selected = group.selected.clone();
    state.current_group = Some(group.clone());
    Ok(RegroupEvent {
        step: state.step,
        selected_ids: group.selected_ids.clone(),
        ts: group.ts,
        kc: group.kc,
        objective: group.objective,
        exact_objective,
        train_loss: None,
        val_accuracy: None,
        group,
    })
}

/// One gradient update on `batch` at the current group. Returns the batch
/// loss at the prompt used for the update.
pub fn transfer_step(
    model: &ToyModel,
    state: &mut TransferState,
    cfg: &TransferConfig,
    batch: &[&Example],
    sources: &[TaskPromptVector],
    p_init: &SoftPrompt,
) -> Result<f64> {
    let inputs = state.merge_inputs(p_init, sources);
    let p_mix = merge(&inputs)?;
    let (loss, d_pmix) = model.loss_and_grad_prompt(&p_mix, batch)?;
    let grads = merge_backward(&inputs, &d_pmix)?;
    state.target_tpv.delta_mut().axpy_assign(-cfg.lr_target, &grads.d_target_tpv)?;
    if cfg.mode.trains_target_alpha() {
        state.target_alpha.alpha.axpy_assign(-cfg.lr_target, &grads.d_target_alpha)?;
    }
    for (id, g) in &grads.d_source_alphas {
        let alpha = state.source_alphas.get_mut(id).expect("every source has a scaling term");
        alpha.alpha.axpy_assign(-cfg.lr_source_alpha, g)?;
    }
    state.step += 1;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub mode: TransferMode,
    pub final_prompt: SoftPrompt,
    pub state: TransferState,
    /// Merged prompt at the best validation checkpoint.
    pub best_prompt: SoftPrompt,
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub losses: Vec<f64>,
    pub evals: Vec<(usize, f64)>,
    /// Source chosen to initialize the target in the one-for-one modes.
    pub init_source: Option<String>,
    pub records: Vec<MetricsRecord>,
}

/// Index of the source whose score is highest (lowest index on ties).
fn argmax_source(scores: &[f64]) -> Option<usize> {
    crate::numkit::argmax(scores)
}

/// Picks the one-for-one initialization source by comparing each source with
/// a reference prompt tuned on the target task alone.
pub fn one_for_one_choice(
    mode: TransferMode,
    reference: &TaskPromptVector,
    sources: &[TaskPromptVector],
    p_init: &SoftPrompt,
) -> Result<Option<usize>> {
    let scores: Vec<f64> = match mode {
        TransferMode::OneForOneTpv => sources.iter().map(|s| sim(s, reference)).collect::<Result<_>>()?,
        TransferMode::OneForOneCosine => {
            let p_ref = reference.apply(p_init)?;
            sources
                .iter()
                .map(|s| cosine_prompt_sim(&s.apply(p_init)?, &p_ref))
                .collect::<Result<_>>()?
        }
        _ => return Ok(None),
    };
    Ok(argmax_source(&scores))
}

/// The target task as stage 2 sees it: `few_shot_k` examples per class drawn
/// with the run seed, or the full training set when `few_shot_k` is 0.
pub fn training_view(target: &SyntheticTask, cfg: &TransferConfig) -> SyntheticTask {
    match cfg.few_shot_k {
        0 => target.clone(),
        k => target.few_shot(k, cfg.seed),
    }
}

/// Runs stage 2 for `cfg.n_max` updates and keeps the merged prompt with the
/// best validation accuracy (earliest on ties).
pub fn run_transfer(
    model: &ToyModel,
    target: &SyntheticTask,
    sources: &[TaskPromptVector],
    p_init: &SoftPrompt,
    cfg: &TransferConfig,
) -> Result<TransferOutcome> {
    cfg.validate()?;
    check_sources(p_init, sources)?;
    let task = training_view(target, cfg);
    if task.train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let run = format!("{}-s{}", cfg.mode, cfg.seed);
    let mode = cfg.mode.as_str();
    let mut state = TransferState::new(&task.task_id, p_init, sources);
    let mut records = Vec::new();

    let mut init_source = None;
    if matches!(cfg.mode, TransferMode::OneForOneTpv | TransferMode::OneForOneCosine) {
        let reference = prompt_tune(model, &task, &cfg.as_prompt_tune(), p_init)?;
        let reference = compute_tpv(&reference.prompt, p_init, task.task_id.clone())?;
        if let Some(i) = one_for_one_choice(cfg.mode, &reference, sources, p_init)? {
            *state.target_tpv.delta_mut() = sources[i].delta().clone();
            init_source = Some(sources[i].task_id.clone());
        }
    }
    if cfg.mode == TransferMode::AllForOne {
        state.selected = (0..sources.len()).collect();
    }

    let regroups_at = |step: usize| match cfg.mode {
        TransferMode::DtvgDynamic => step % cfg.regroup_every == 0,
        TransferMode::FixGroup => step == 0,
        _ => false,
    };

    let mut pending = None;
    if regroups_at(0) {
        pending = Some(regroup(&mut state, sources, cfg)?);
    }
    let mut prompt = state.mixed_prompt(p_init, sources)?;
    let first_val = model.accuracy(&prompt, &task.val)?;
    let mut best = (first_val, 0usize, prompt.clone());
    let mut evals = vec![(0, first_val)];
    let mut rec = MetricsRecord::new(RecordKind::Step, &run, cfg.seed, 0, mode);
    rec.val_accuracy = Some(first_val);
    rec.selected = state.selected_ids(sources);
    records.push(rec);

    let mut sampler = BatchSampler::new(cfg.seed, task.train.len(), cfg.batch_size);
    let mut losses = Vec::with_capacity(cfg.n_max);
    for k in 0..cfg.n_max {
        if k > 0 && regroups_at(k) {
            pending = Some(regroup(&mut state, sources, cfg)?);
        }
        let selected = state.selected_ids(sources);
        let batch: Vec<&Example> = sampler.next_batch().into_iter().map(|i| &task.train[i]).collect();
        let loss = transfer_step(model, &mut state, cfg, &batch, sources, p_init)?;
        losses.push(loss);
        prompt = state.mixed_prompt(p_init, sources)?;
        let step = k + 1;
        let val = if is_eval_step(step, cfg.eval_every, cfg.n_max) {
            let acc = model.accuracy(&prompt, &task.val)?;
            evals.push((step, acc));
            if acc > best.0 {
                best = (acc, step, prompt.clone());
            }
            Some(acc)
        } else {
            None
        };
        let mut rec = MetricsRecord::new(RecordKind::Step, &run, cfg.seed, step, mode);
        rec.selected = selected;
        rec.train_loss = Some(loss);
        rec.val_accuracy = val;
        if let Some(mut ev) = pending.take() {
            fill_group_fields(&mut rec, &ev);
            ev.train_loss = Some(loss);
            ev.val_accuracy = val;
            state.history.push(ev);
        }
        records.push(rec);
    }
    if let Some(ev) = pending.take() {
        state.history.push(ev);
    }

    let (best_val_accuracy, best_step, best_prompt) = best;
    let test_accuracy = model.accuracy(&best_prompt, &task.test)?;
    let mut fin = MetricsRecord::new(RecordKind::Final, &run, cfg.seed, best_step, mode);
    fin.selected = state.selected_ids(sources);
    fin.val_accuracy = Some(best_val_accuracy);
    fin.test_accuracy = Some(test_accuracy);
    records.push(fin);

    Ok(TransferOutcome {
        mode: cfg.mode,
        final_prompt: prompt,
        state,
        best_prompt,
        best_step,
        best_val_accuracy,
        test_accuracy,
        losses,
        evals,
        init_source,
        records,
    })
}

fn fill_group_fields(rec: &mut MetricsRecord, ev: &RegroupEvent) {
    rec.regrouped = true;
    rec.selected.clone_from(&ev.selected_ids);
    rec.ts = Some(ev.ts);
    rec.kc = Some(ev.kc);
    rec.greedy_objective = Some(ev.objective);
    rec.exact_objective = ev.exact_objective;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizationStats {
    /// Regroup events whose selection differs from the previous event.
    pub total_changes: usize,
    /// Changes falling in each tenth of the event sequence.
    pub changes_per_decile: [usize; 10],
    /// Number of trailing events sharing the final selection.
    pub final_stable_run: usize,
}

pub fn stabilization_stats(history: &[RegroupEvent]) -> Result<StabilizationStats> {
    if history.is_empty() {
        return Err(Error::config("stabilization stats need at least one regroup event"));
    }
    let n = history.len();
    let mut changes_per_decile = [0usize; 10];
    let mut total_changes = 0;
    for i in 1..n {
        if history[i].selected_ids != history[i - 1].selected_ids {
            total_changes += 1;
            changes_per_decile[(i * 10 / n).min(9)] += 1;
        }
    }
    let last = &history[n - 1].selected_ids;
    let final_stable_run = history.iter().rev().take_while(|e| &e.selected_ids == last).count();
    Ok(StabilizationStats {
        total_changes,
        changes_per_decile,
        final_stable_run,
    })
}
