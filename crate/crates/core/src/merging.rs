//! Multi-task merge of rescaled task prompt vectors onto the shared
//! initialization, and its backward pass.
//!
//! `P_mix = P_init + scale_cols(T_t, α_t) + Σ_{s ∈ S'} scale_cols(T_s, α_s)`,
//! summed in the stored source order. Gradients flow to the target TPV, the
//! target scaling and the scaling of each merged source; source TPVs are
//! constants.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, Mat, Vec64};
use crate::tpv::{ScalingTerm, SoftPrompt, TaskPromptVector};

#[derive(Debug, Clone)]
pub struct MergeInputs<'a> {
    pub p_init: &'a SoftPrompt,
    pub target_tpv: &'a TaskPromptVector,
    pub target_alpha: &'a ScalingTerm,
    pub sources: Vec<(&'a TaskPromptVector, &'a ScalingTerm)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeGrads {
    pub d_target_tpv: Mat,
    pub d_target_alpha: Vec64,
    pub d_source_alphas: BTreeMap<String, Vec64>,
}

impl MergeInputs<'_> {
    pub fn validate(&self) -> Result<()> {
        let shape = self.p_init.weights().shape();
        let fp = self.p_init.fingerprint();
        let mut seen = HashSet::new();
        let all = std::iter::once((self.target_tpv, self.target_alpha)).chain(self.sources.iter().copied());
        for (tpv, alpha) in all {
            if tpv.delta().shape() != shape {
                return Err(Error::ShapeMismatch {
                    left: tpv.delta().shape(),
                    right: shape,
                });
            }
            if alpha.alpha.len() != shape.1 {
                return Err(Error::LengthMismatch {
                    left: alpha.alpha.len(),
                    right: shape.1,
                });
            }
            if tpv.task_id != alpha.task_id {
                return Err(Error::TaskMismatch {
                    left: tpv.task_id.clone(),
                    right: alpha.task_id.clone(),
                });
            }
            if tpv.init_fingerprint() != fp {
                return Err(Error::IncomparableInit {
                    left: tpv.init_fingerprint(),
                    right: fp,
                });
            }
            if !seen.insert(tpv.task_id.as_str()) {
                return Err(Error::DuplicateTask(tpv.task_id.clone()));
            }
        }
        Ok(())
    }
}

/// Adds `scale_cols(t, alpha)` into `out` column by column.
fn add_scaled(out: &mut Mat, t: &Mat, alpha: &Vec64) {
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            out.set(i, j, out.get(i, j) + alpha[j] * t.get(i, j));
        }
    }
}

pub fn merge(inputs: &MergeInputs<'_>) -> Result<SoftPrompt> {
    inputs.validate()?;
    let mut out = inputs.p_init.weights().clone();
    add_scaled(&mut out, inputs.target_tpv.delta(), &inputs.target_alpha.alpha);
    for (tpv, alpha) in &inputs.sources {
        add_scaled(&mut out, tpv.delta(), &alpha.alpha);
    }
    // re-validate finiteness through the checked constructor
    let (d, r) = out.shape();
    Ok(SoftPrompt::new(Mat::from_vec(d, r, out.into_vec())?))
}

/// Per-token gradient of a scaling term: `col_j(t) · col_j(d_pmix)`.
fn alpha_grad(t: &Mat, d_pmix: &Mat) -> Vec64 {
    let grads = (0..t.cols())
        .map(|j| {
            let (a, b) = (t.col(j), d_pmix.col(j));
            dot(&a, &b).expect("columns share d")
        })
        .collect();
    Vec64::new(grads).expect("finite inputs give finite products")
}

pub fn merge_backward(inputs: &MergeInputs<'_>, d_pmix: &Mat) -> Result<MergeGrads> {
    inputs.validate()?;
    let shape = inputs.p_init.weights().shape();
    if d_pmix.shape() != shape {
        return Err(Error::ShapeMismatch {
            left: d_pmix.shape(),
            right: shape,
        });
    }
    let d_target_tpv = d_pmix.scale_cols(&inputs.target_alpha.alpha)?;
    let d_target_alpha = alpha_grad(inputs.target_tpv.delta(), d_pmix);
    let d_source_alphas = inputs
        .sources
        .iter()
        .map(|(tpv, _)| (tpv.task_id.clone(), alpha_grad(tpv.delta(), d_pmix)))
        .collect();
    Ok(MergeGrads {
        d_target_tpv,
        d_target_alpha,
        d_source_alphas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use crate::tpv::compute_tpv;

    struct Fixture {
        p_init: SoftPrompt,
        target: TaskPromptVector,
        target_alpha: ScalingTerm,
        sources: Vec<(TaskPromptVector, ScalingTerm)>,
    }

    impl Fixture {
        fn random(seed: u64, d: usize, r: usize, n_src: usize) -> Self {
            let mut rng = Rng::new(seed);
            let p_init = SoftPrompt::random(&mut rng, d, r, 0.5);
            let fp = p_init.fingerprint();
            let target = TaskPromptVector::new("t", Mat::randn(&mut rng, d, r, 1.0), fp);
            let target_alpha = ScalingTerm {
                task_id: "t".into(),
                alpha: Vec64::new((0..r).map(|_| 1.0 + 0.3 * rng.normal()).collect()).unwrap(),
            };
            let sources = (0..n_src)
                .map(|k| {
                    let id = format!("s{k}");
                    let t = TaskPromptVector::new(id.clone(), Mat::randn(&mut rng, d, r, 1.0), fp);
                    let a = ScalingTerm {
                        task_id: id,
                        alpha: Vec64::new((0..r).map(|_| 1.0 + 0.3 * rng.normal()).collect()).unwrap(),
                    };
                    (t, a)
                })
                .collect();
            Fixture { p_init, target, target_alpha, sources }
        }

        fn inputs(&self) -> MergeInputs<'_> {
            MergeInputs {
                p_init: &self.p_init,
                target_tpv: &self.target,
                target_alpha: &self.target_alpha,
                sources: self.sources.iter().map(|(t, a)| (t, a)).collect(),
            }
        }
    }

    #[test]
    fn empty_group_recovers_stage_one_prompt() {
        let mut rng = Rng::new(3);
        let p_init = SoftPrompt::random(&mut rng, 4, 3, 0.5);
        let p_star = SoftPrompt::random(&mut rng, 4, 3, 1.0);
        let t = compute_tpv(&p_star, &p_init, "t").unwrap();
        let a = ScalingTerm::ones("t", 3);
        let inputs = MergeInputs { p_init: &p_init, target_tpv: &t, target_alpha: &a, sources: vec![] };
        let mixed = merge(&inputs).unwrap();
        let diff = mixed.weights().sub(p_star.weights()).unwrap();
        assert!(diff.max_abs() <= 4.0 * f64::EPSILON * p_star.weights().max_abs());
    }

    #[test]
    fn zero_tpvs_give_init() {
        let mut f = Fixture::random(4, 3, 2, 2);
        let fp = f.p_init.fingerprint();
        f.target = TaskPromptVector::new("t", Mat::zeros(3, 2), fp);
        for (t, _) in &mut f.sources {
            *t = TaskPromptVector::new(t.task_id.clone(), Mat::zeros(3, 2), fp);
        }
        assert_eq!(merge(&f.inputs()).unwrap(), f.p_init);
    }

    #[test]
    fn hand_case() {
        let p_init = SoftPrompt::zeros(2, 2);
        let fp = p_init.fingerprint();
        let t = TaskPromptVector::new("t", Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), fp);
        let at = ScalingTerm { task_id: "t".into(), alpha: Vec64::new(vec![2.0, 3.0]).unwrap() };
        let s = TaskPromptVector::new("s", Mat::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap(), fp);
        let a_s = ScalingTerm { task_id: "s".into(), alpha: Vec64::new(vec![1.0, 0.0]).unwrap() };
        let inputs = MergeInputs { p_init: &p_init, target_tpv: &t, target_alpha: &at, sources: vec![(&s, &a_s)] };
        let mixed = merge(&inputs).unwrap();
        assert_eq!(mixed.weights(), &Mat::from_rows(&[vec![3.0, 0.0], vec![1.0, 3.0]]).unwrap());
    }

    #[test]
    fn validation_errors() {
        let f = Fixture::random(5, 3, 2, 2);
        let mut inputs = f.inputs();
        inputs.sources.push(inputs.sources[0]);
        assert!(matches!(merge(&inputs), Err(Error::DuplicateTask(_))));

        let other = TaskPromptVector::new("x", Mat::zeros(3, 2), 12345);
        let ax = ScalingTerm::ones("x", 2);
        let mut inputs = f.inputs();
        inputs.sources.push((&other, &ax));
        assert!(matches!(merge(&inputs), Err(Error::IncomparableInit { .. })));

        let short = ScalingTerm::ones("t", 3);
        let mut inputs = f.inputs();
        inputs.target_alpha = &short;
        assert!(merge(&inputs).is_err());

        assert!(merge_backward(&f.inputs(), &Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn linear_in_target_alpha() {
        let f = Fixture::random(6, 4, 3, 2);
        let base = merge(&f.inputs()).unwrap();
        let doubled = ScalingTerm {
            task_id: "t".into(),
            alpha: Vec64::new(f.target_alpha.alpha.iter().map(|a| 2.0 * a).collect()).unwrap(),
        };
        let mut inputs = f.inputs();
        inputs.target_alpha = &doubled;
        let bigger = merge(&inputs).unwrap();
        let diff = bigger.weights().sub(base.weights()).unwrap();
        let want = f.target.delta().scale_cols(&f.target_alpha.alpha).unwrap();
        assert!(diff.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn source_order_invariance() {
        let f = Fixture::random(7, 5, 4, 4);
        let base = merge(&f.inputs()).unwrap();
        let mut inputs = f.inputs();
        inputs.sources.reverse();
        let rev = merge(&inputs).unwrap();
        assert!(base.weights().sub(rev.weights()).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn backward_trivial_cases() {
        let f = Fixture::random(8, 3, 2, 2);
        let g = merge_backward(&f.inputs(), &Mat::zeros(3, 2)).unwrap();
        assert_eq!(g.d_target_tpv.frobenius_norm(), 0.0);
        assert!(g.d_target_alpha.iter().all(|v| *v == 0.0));
        assert!(g.d_source_alphas.values().all(|a| a.iter().all(|v| *v == 0.0)));
        assert_eq!(g.d_source_alphas.len(), 2);

        let ones = ScalingTerm::ones("t", 2);
        let mut inputs = f.inputs();
        inputs.target_alpha = &ones;
        let d = Mat::randn(&mut Rng::new(1), 3, 2, 1.0);
        let g = merge_backward(&inputs, &d).unwrap();
        assert_eq!(g.d_target_tpv, d);
    }

    /// `L = Σ sin(P_mix)` has gradient `cos(P_mix)` with respect to the mix.
    fn sin_loss(p: &SoftPrompt) -> f64 {
        p.weights().as_slice().iter().map(|v| v.sin()).sum()
    }

    fn sin_grad(p: &SoftPrompt) -> Mat {
        let (d, r) = p.weights().shape();
        Mat::from_vec(d, r, p.weights().as_slice().iter().map(|v| v.cos()).collect()).unwrap()
    }

    #[test]
    fn backward_matches_finite_differences() {
        const H: f64 = 1e-6;
        for seed in 0..5 {
            let f = Fixture::random(seed, 4, 3, 2);
            let g = merge_backward(&f.inputs(), &sin_grad(&merge(&f.inputs()).unwrap())).unwrap();
            let check = |analytic: f64, plus: Fixture, minus: Fixture| {
                let n = (sin_loss(&merge(&plus.inputs()).unwrap()) - sin_loss(&merge(&minus.inputs()).unwrap())) / (2.0 * H);
                assert!((n - analytic).abs() <= 1e-7 * n.abs().max(1.0), "seed {seed}: {n} vs {analytic}");
            };
            let nudged = |edit: &dyn Fn(&mut Fixture, f64)| {
                let (mut p, mut m) = (Fixture::random(seed, 4, 3, 2), Fixture::random(seed, 4, 3, 2));
                edit(&mut p, H);
                edit(&mut m, -H);
                (p, m)
            };
            for j in 0..3 {
                let (p, m) = nudged(&|f, h| f.target_alpha.alpha[j] += h);
                check(g.d_target_alpha[j], p, m);
                for k in 0..2 {
                    let (p, m) = nudged(&|f, h| f.sources[k].1.alpha[j] += h);
                    check(g.d_source_alphas[&format!("s{k}")][j], p, m);
                }
                for i in 0..4 {
                    let (p, m) = nudged(&|f, h| {
                        let v = f.target.delta().get(i, j);
                        f.target.delta_mut().set(i, j, v + h);
                    });
                    check(g.d_target_tpv.get(i, j), p, m);
                }
            }
        }
    }
}
