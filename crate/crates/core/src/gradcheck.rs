//! Central finite-difference checks of the two hand-written backward passes.
//!
//! Relative error is `|a − n| / max(|a|, |n|, 1e-4)`: entries smaller than
//! 1e-4 are compared on an absolute scale, since the roundoff of a central
//! difference with step `h` is about `ε·|L|/h`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::merging::{merge, merge_backward, MergeInputs};
use crate::numkit::{Mat, Rng, Vec64};
use crate::testbed::{Example, ModelConfig, ToyModel};
use crate::tpv::{ScalingTerm, SoftPrompt, TaskPromptVector};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub seed: u64,
    pub entries: usize,
    pub model_max_err: f64,
    pub merge_max_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.model_max_err < TOLERANCE && self.merge_max_err < TOLERANCE
    }
}

/// Every prompt entry of a random model and batch.
fn check_model(rng: &mut Rng, seed: u64) -> Result<(f64, usize)> {
    let d = 2 + rng.below(10);
    let r = 1 + rng.below(6);
    let classes = 2 + rng.below(4);
    let vocab = 5 + rng.below(30);
    let model = ToyModel::new(ModelConfig { d, vocab, classes, bias_std: 0.5, ..ModelConfig::default() }, seed)?;
    let len = 1 + rng.below(6);
    let batch: Vec<Example> = (0..1 + rng.below(6))
        .map(|_| Example {
            tokens: (0..len).map(|_| rng.below(vocab)).collect(),
            label: rng.below(classes),
        })
        .collect();
    let refs: Vec<&Example> = batch.iter().collect();
    let p = SoftPrompt::random(rng, d, r, 1.0);
    let (_, grad) = model.loss_and_grad_prompt(&p, &refs)?;
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in 0..r {
            let at = |h: f64| -> Result<f64> {
                let mut w = p.weights().clone();
                w.set(i, j, w.get(i, j) + h);
                Ok(model.loss_and_grad_prompt(&SoftPrompt::new(w), &refs)?.0)
            };
            let numeric = (at(STEP)? - at(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.get(i, j), numeric));
        }
    }
    Ok((worst, d * r))
}

#[derive(Clone)]
struct MergeCase {
    p_init: SoftPrompt,
    target: TaskPromptVector,
    target_alpha: ScalingTerm,
    sources: Vec<(TaskPromptVector, ScalingTerm)>,
}

impl MergeCase {
    fn inputs(&self) -> MergeInputs<'_> {
        MergeInputs {
            p_init: &self.p_init,
            target_tpv: &self.target,
            target_alpha: &self.target_alpha,
            sources: self.sources.iter().map(|(t, a)| (t, a)).collect(),
        }
    }

    /// `L = Σ sin(P_mix)`.
    fn loss(&self) -> Result<f64> {
        Ok(merge(&self.inputs())?.weights().as_slice().iter().map(|v| v.sin()).sum())
    }
}

fn check_merge(rng: &mut Rng) -> Result<(f64, usize)> {
    let d = 2 + rng.below(10);
    let r = 1 + rng.below(6);
    let p_init = SoftPrompt::random(rng, d, r, 0.5);
    let fp = p_init.fingerprint();
    let alpha = |rng: &mut Rng, id: &str| -> Result<ScalingTerm> {
        Ok(ScalingTerm {
            task_id: id.into(),
            alpha: Vec64::new((0..r).map(|_| 1.0 + 0.5 * rng.normal()).collect())?,
        })
    };
    let target = TaskPromptVector::new("t", Mat::randn(rng, d, r, 1.0), fp);
    let target_alpha = alpha(rng, "t")?;
    let mut sources = Vec::new();
    for k in 0..rng.below(4) {
        let id = format!("s{k}");
        sources.push((TaskPromptVector::new(id.clone(), Mat::randn(rng, d, r, 1.0), fp), alpha(rng, &id)?));
    }
    let case = MergeCase { p_init, target, target_alpha, sources };
    let mixed = merge(&case.inputs())?;
    let d_pmix = Mat::from_vec(d, r, mixed.weights().as_slice().iter().map(|v| v.cos()).collect())?;
    let grads = merge_backward(&case.inputs(), &d_pmix)?;

    let mut worst = 0.0f64;
    let mut entries = 0;
    let mut probe = |analytic: f64, edit: &dyn Fn(&mut MergeCase, f64)| -> Result<()> {
        let (mut up, mut down) = (case.clone(), case.clone());
        edit(&mut up, STEP);
        edit(&mut down, -STEP);
        let numeric = (up.loss()? - down.loss()?) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic, numeric));
        entries += 1;
        Ok(())
    };
    for j in 0..r {
        probe(grads.d_target_alpha[j], &|c, h| c.target_alpha.alpha[j] += h)?;
        for k in 0..case.sources.len() {
            let g = grads.d_source_alphas[&case.sources[k].0.task_id][j];
            probe(g, &|c, h| c.sources[k].1.alpha[j] += h)?;
        }
        for i in 0..d {
            probe(grads.d_target_tpv.get(i, j), &|c, h| {
                let v = c.target.delta().get(i, j);
                c.target.delta_mut().set(i, j, v + h);
            })?;
        }
    }
    Ok((worst, entries))
}

/// Runs `configs` random configurations derived from `seed`.
pub fn run_suite(seed: u64, configs: usize) -> Result<Vec<GradCheck>> {
    (0..configs as u64)
        .map(|k| {
            let case_seed = seed.wrapping_add(k);
            let mut rng = Rng::new(case_seed);
            let (model_max_err, n_model) = check_model(&mut rng, case_seed)?;
            let (merge_max_err, n_merge) = check_merge(&mut rng)?;
            Ok(GradCheck {
                seed: case_seed,
                entries: n_model + n_merge,
                model_max_err,
                merge_max_err,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_deterministic() {
        let a = run_suite(3, 5).unwrap();
        assert!(a.iter().all(GradCheck::passed), "{a:?}");
        assert_eq!(a, run_suite(3, 5).unwrap());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-18);
    }
}
