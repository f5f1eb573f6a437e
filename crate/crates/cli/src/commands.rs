use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;

use dtvg_core::config::ExperimentConfig;
use dtvg_core::experiment::{compare, format_table, prepare, run_mode, setup, summarize, target_baseline};
use dtvg_core::gradcheck::{run_suite, TOLERANCE};
use dtvg_core::grouping::{exact_group, greedy_group_with, GreedyOptions, GroupingResult, SimTable, EXACT_LIMIT};
use dtvg_core::numkit::{Mat, Vec64};
use dtvg_core::store_io::{read_metrics, read_tpvf, write_atomic, write_metrics, write_tpvf, MetricsRecord, RecordKind, RunManifest, TpvfObject};
use dtvg_core::tpv::{compute_tpv, TaskPromptVector};
use dtvg_core::transfer::{stabilization_stats, TransferMode};

use crate::{plot, resolve_config, Cli, Command};

pub fn name(cmd: &Command) -> &'static str {
    match cmd {
        Command::GenTasks => "gen-tasks",
        Command::TrainSource => "train-source",
        Command::TrainTargetBaseline { .. } => "train-target-baseline",
        Command::Group { .. } => "group",
        Command::Transfer { .. } => "transfer",
        Command::Compare { .. } => "compare",
        Command::PlotData { .. } => "plot-data",
        Command::Fdcheck { .. } => "fdcheck",
    }
}

/// Output files of one command plus the manifest describing them.
struct Run {
    out: PathBuf,
    manifest: RunManifest,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(cli: &Cli, options: serde_json::Value) -> anyhow::Result<Self> {
        fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
        Ok(Run {
            out: cli.out.clone(),
            manifest: RunManifest::new(name(&cli.command), cli.seed, options),
            outputs: Vec::new(),
        })
    }

    fn path(&mut self, file: &str) -> PathBuf {
        let p = self.out.join(file);
        self.outputs.push(p.clone());
        p
    }

    fn json(&mut self, file: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let p = self.path(file);
        write_atomic(&p, serde_json::to_string_pretty(value)?.as_bytes())?;
        Ok(())
    }

    fn tpvf(&mut self, file: &str, obj: &TpvfObject) -> anyhow::Result<()> {
        let p = self.path(file);
        write_tpvf(&p, obj)?;
        Ok(())
    }

    fn metrics(&mut self, records: &[MetricsRecord]) -> anyhow::Result<()> {
        let p = self.path("metrics.jsonl");
        write_metrics(&p, records)?;
        Ok(())
    }

    fn finish(mut self) -> anyhow::Result<()> {
        self.manifest.finish(&self.out, &self.outputs)?;
        self.manifest.write(self.out.join("manifest.json"))?;
        Ok(())
    }
}

fn options(cfg: &ExperimentConfig, extra: serde_json::Value) -> serde_json::Value {
    json!({ "experiment": cfg, "options": extra })
}

fn fmt_ids(ids: &[String]) -> String {
    format!("[{}]", ids.join(","))
}

pub fn execute(cli: &Cli) -> anyhow::Result<String> {
    match &cli.command {
        Command::GenTasks => gen_tasks(cli),
        Command::TrainSource => train_source(cli),
        Command::TrainTargetBaseline { .. } => train_target_baseline(cli),
        Command::Group { target, sources, table, lambda, early_stop, strict } => group(
            cli,
            target.as_deref(),
            sources,
            table.as_deref(),
            *lambda,
            GreedyOptions { early_stop: *early_stop, strict: *strict },
        ),
        Command::Transfer { .. } => transfer(cli),
        Command::Compare { seeds, modes, .. } => compare_modes(cli, *seeds, modes),
        Command::PlotData { metrics } => plot_data(cli, metrics),
        Command::Fdcheck { configs } => fdcheck(cli, *configs),
    }
}

fn gen_tasks(cli: &Cli) -> anyhow::Result<String> {
    let cfg = resolve_config(cli)?;
    let s = setup(&cfg, cli.seed)?;
    let mut run = Run::start(cli, options(&cfg, json!({})))?;
    run.json("tasks.json", &s.tasks)?;
    run.tpvf("p_init.tpvf", &TpvfObject::Prompt { task_id: "p_init".into(), prompt: s.p_init.clone() })?;
    run.finish()?;
    Ok(format!("gen-tasks: {} tasks, seed {}, written to {}", s.tasks.len(), cli.seed, cli.out.display()))
}

fn train_source(cli: &Cli) -> anyhow::Result<String> {
    let cfg = resolve_config(cli)?;
    let p = prepare(&cfg, cli.seed)?;
    let mut run = Run::start(cli, options(&cfg, json!({})))?;
    run.tpvf("p_init.tpvf", &TpvfObject::Prompt { task_id: "p_init".into(), prompt: p.p_init.clone() })?;
    let mut records = Vec::new();
    let source_ids: Vec<&str> = p.sources.iter().map(|s| s.task_id.as_str()).collect();
    for (task, out) in cfg.family.tasks.iter().zip(&p.stage1) {
        if task.id == cfg.target {
            continue;
        }
        let tpv = compute_tpv(&out.prompt, &p.p_init, task.id.clone())?;
        run.tpvf(&format!("{}.tpvf", task.id), &TpvfObject::Vector(tpv))?;
        records.extend(stage1_records(&task.id, cli.seed, out));
    }
    run.metrics(&records)?;
    run.finish()?;
    let mean = p.stage1.iter().zip(&cfg.family.tasks).filter(|(_, t)| t.id != cfg.target).map(|(o, _)| o.test_accuracy).sum::<f64>()
        / source_ids.len().max(1) as f64;
    Ok(format!("train-source: {} sources {}, mean test accuracy {mean:.4}", source_ids.len(), source_ids.join(",")))
}

fn stage1_records(task: &str, seed: u64, out: &dtvg_core::testbed::TuneOutcome) -> Vec<MetricsRecord> {
    let run = format!("stage1-{task}-s{seed}");
    let mut recs: Vec<MetricsRecord> = out
        .losses
        .iter()
        .enumerate()
        .map(|(k, &loss)| {
            let mut r = MetricsRecord::new(RecordKind::Step, &run, seed, k + 1, "stage1");
            r.train_loss = Some(loss);
            r
        })
        .collect();
    let mut first = MetricsRecord::new(RecordKind::Step, &run, seed, 0, "stage1");
    first.val_accuracy = out.evals.first().map(|e| e.1);
    recs.insert(0, first);
    for &(step, acc) in out.evals.iter().skip(1) {
        recs[step].val_accuracy = Some(acc);
    }
    let mut fin = MetricsRecord::new(RecordKind::Final, &run, seed, out.best_step, "stage1");
    fin.val_accuracy = Some(out.best_val_accuracy);
    fin.test_accuracy = Some(out.test_accuracy);
    recs.push(fin);
    recs
}

fn train_target_baseline(cli: &Cli) -> anyhow::Result<String> {
    let cfg = resolve_config(cli)?;
    let s = setup(&cfg, cli.seed)?;
    let out = target_baseline(&cfg, &s, cli.seed)?;
    let mut run = Run::start(cli, options(&cfg, json!({})))?;
    let tpv = compute_tpv(&out.prompt, &s.p_init, cfg.target.clone())?;
    run.tpvf("p_init.tpvf", &TpvfObject::Prompt { task_id: "p_init".into(), prompt: s.p_init.clone() })?;
    run.tpvf(&format!("{}.tpvf", cfg.target), &TpvfObject::Vector(tpv))?;
    run.metrics(&stage1_records(&cfg.target, cli.seed, &out))?;
    run.finish()?;
    Ok(format!(
        "train-target-baseline: best val accuracy {:.4} at step {}, test accuracy {:.4}",
        out.best_val_accuracy, out.best_step, out.test_accuracy
    ))
}

#[derive(Debug, Deserialize)]
struct TableFile {
    #[serde(default)]
    source_ids: Option<Vec<String>>,
    s2t: Vec<f64>,
    s2s: Vec<Vec<f64>>,
}

fn load_table(path: &Path) -> anyhow::Result<SimTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let t: TableFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let s2s = if t.s2s.is_empty() { Mat::zeros(0, 0) } else { Mat::from_rows(&t.s2s)? };
    let ids = t.source_ids.unwrap_or_else(|| (0..t.s2t.len()).map(|i| format!("s{i}")).collect());
    Ok(SimTable::new(ids, Vec64::new(t.s2t)?, s2s)?)
}

fn load_vector(path: &Path) -> anyhow::Result<TaskPromptVector> {
    read_tpvf(path)?
        .into_tpv()
        .with_context(|| format!("{} holds a prompt, not a task prompt vector", path.display()))
}

#[derive(Serialize)]
struct GroupReport<'a> {
    lambda: f64,
    source_ids: &'a [String],
    s2t: &'a [f64],
    greedy: &'a GroupingResult,
    greedy_objective: f64,
    exact: Option<&'a GroupingResult>,
    exact_objective: Option<f64>,
}

fn group(cli: &Cli, target: Option<&Path>, sources: &[PathBuf], table: Option<&Path>, lambda: f64, opts: GreedyOptions) -> anyhow::Result<String> {
    if !lambda.is_finite() || lambda < 0.0 {
        bail!("--lambda must be a nonnegative number");
    }
    let mut inputs = Vec::new();
    let sim_table = match (target, table) {
        (_, Some(t)) => {
            inputs.push(t.to_path_buf());
            load_table(t)?
        }
        (Some(t), None) => {
            inputs.push(t.to_path_buf());
            inputs.extend(sources.iter().cloned());
            let target = load_vector(t)?;
            let srcs = sources.iter().map(|p| load_vector(p)).collect::<anyhow::Result<Vec<_>>>()?;
            SimTable::from_tpvs(&srcs, &target)?
        }
        (None, None) => bail!("group needs --table or --target with source files"),
    };
    let greedy = greedy_group_with(&sim_table, opts);
    let exact = if sim_table.n() <= EXACT_LIMIT { Some(exact_group(&sim_table, lambda)?) } else { None };

    let mut run = Run::start(cli, json!({ "lambda": lambda, "greedy": opts }))?;
    for p in &inputs {
        run.manifest.add_input(p)?;
    }
    let report = GroupReport {
        lambda,
        source_ids: sim_table.source_ids(),
        s2t: sim_table.s2t(),
        greedy: &greedy,
        greedy_objective: greedy.objective_at(lambda),
        exact: exact.as_ref(),
        exact_objective: exact.as_ref().map(|e| e.objective),
    };
    run.json("group.json", &report)?;
    run.finish()?;

    let mut sorted = greedy.selected.clone();
    sorted.sort_unstable();
    let idx: Vec<String> = sorted.iter().map(usize::to_string).collect();
    let mut line = format!(
        "group: selected={{{}}} ids={} TS={} KC={} greedy_objective={}",
        idx.join(","),
        fmt_ids(&greedy.selected_ids),
        greedy.ts,
        greedy.kc,
        greedy.objective_at(lambda)
    );
    match &exact {
        Some(e) => write!(line, " exact_selected={} exact_objective={}", fmt_ids(&e.selected_ids), e.objective)?,
        None => write!(line, " exact skipped (n > {EXACT_LIMIT})")?,
    }
    Ok(line)
}

fn transfer(cli: &Cli) -> anyhow::Result<String> {
    let cfg = resolve_config(cli)?;
    let p = prepare(&cfg, cli.seed)?;
    let out = run_mode(&cfg, &p, cfg.transfer.mode)?;
    let mut run = Run::start(cli, options(&cfg, json!({})))?;
    run.tpvf("p_init.tpvf", &TpvfObject::Prompt { task_id: "p_init".into(), prompt: p.p_init.clone() })?;
    run.tpvf("mixed_prompt.tpvf", &TpvfObject::Prompt { task_id: cfg.target.clone(), prompt: out.best_prompt.clone() })?;
    run.tpvf(&format!("{}.tpvf", cfg.target), &TpvfObject::Vector(out.state.target_tpv.clone()))?;
    run.metrics(&out.records)?;
    run.json("history.json", &out.state.history)?;
    let changes = if out.state.history.is_empty() {
        String::new()
    } else {
        let s = stabilization_stats(&out.state.history)?;
        run.json("stabilization.json", &s)?;
        format!(", {} group changes", s.total_changes)
    };
    run.finish()?;
    Ok(format!(
        "transfer {}: best val accuracy {:.4} at step {}, test accuracy {:.4}, final group {}{changes}",
        cfg.transfer.mode,
        out.best_val_accuracy,
        out.best_step,
        out.test_accuracy,
        fmt_ids(&out.state.selected_ids(&p.sources)),
    ))
}

fn compare_modes(cli: &Cli, seeds: u64, modes: &[TransferMode]) -> anyhow::Result<String> {
    if seeds == 0 {
        bail!("--seeds must be positive");
    }
    let cfg = resolve_config(cli)?;
    let modes = if modes.is_empty() { TransferMode::ALL.to_vec() } else { modes.to_vec() };
    let seed_list: Vec<u64> = (cli.seed..cli.seed + seeds).collect();
    let cmp = compare(&cfg, &seed_list, &modes)?;
    let mut run = Run::start(cli, options(&cfg, json!({ "seeds": seed_list, "modes": modes })))?;
    run.metrics(&cmp.records)?;
    run.json("gates.json", &cmp.gates)?;
    let table = format_table(&summarize(&cmp.records));
    let p = run.path("summary.txt");
    write_atomic(&p, table.as_bytes())?;
    run.finish()?;
    let passed = cmp.gates.iter().filter(|g| g.passed).count();
    Ok(format!("{table}compare: {} seeds, {} modes, validity gate passed in {passed}/{}", seed_list.len(), modes.len(), seed_list.len()))
}

fn plot_data(cli: &Cli, metrics: &Path) -> anyhow::Result<String> {
    let records = read_metrics(metrics)?;
    let mut run = Run::start(cli, json!({ "metrics": metrics }))?;
    run.manifest.add_input(metrics)?;
    let written = plot::write_plot_data(&records, &run.out)?;
    run.outputs.extend(written.iter().cloned());
    run.finish()?;
    Ok(format!("plot-data: {} records reduced to {} CSV files", records.len(), written.len()))
}

fn fdcheck(cli: &Cli, configs: usize) -> anyhow::Result<String> {
    let results = run_suite(cli.seed, configs)?;
    let mut run = Run::start(cli, json!({ "configs": configs }))?;
    run.json("fdcheck.json", &results)?;
    run.finish()?;
    let worst_model = results.iter().map(|r| r.model_max_err).fold(0.0, f64::max);
    let worst_merge = results.iter().map(|r| r.merge_max_err).fold(0.0, f64::max);
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        bail!("{failed}/{configs} configurations exceed relative error {TOLERANCE:e} (model {worst_model:.2e}, merge {worst_merge:.2e})");
    }
    Ok(format!("fdcheck: {configs} configurations passed, max relative error model {worst_model:.2e}, merge {worst_merge:.2e}"))
}
