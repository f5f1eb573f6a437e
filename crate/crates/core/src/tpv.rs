//! Soft prompts, task prompt vectors and the two task-similarity metrics.
//!
//! A prompt is stored as a `d × r` matrix: column `j` is prompt token `j`.
//! A task prompt vector (TPV) is the displacement `P* − P_init` learned for
//! one task. TPVs are only comparable when they were computed against the
//! same initialization, which is tracked with a 64-bit fingerprint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, Mat, Rng, Vec64};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftPrompt {
    weights: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPromptVector {
    pub task_id: String,
    delta: Mat,
    init_fingerprint: u64,
}

/// Per-token scaling of one TPV's columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingTerm {
    pub task_id: String,
    pub alpha: Vec64,
}

impl SoftPrompt {
    pub fn new(weights: Mat) -> Self {
        SoftPrompt { weights }
    }

    pub fn zeros(d: usize, r: usize) -> Self {
        SoftPrompt::new(Mat::zeros(d, r))
    }

    /// Gaussian initialization, entries N(0, std²).
    pub fn random(rng: &mut Rng, d: usize, r: usize, std: f64) -> Self {
        SoftPrompt::new(Mat::randn(rng, d, r, std))
    }

    pub fn d(&self) -> usize {
        self.weights.rows()
    }

    pub fn r(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    pub fn into_weights(self) -> Mat {
        self.weights
    }

    /// FNV-1a (64-bit) over the little-endian `f32` encoding of the weights,
    /// token-major (token 0's `d` values first).
    pub fn fingerprint(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        for j in 0..self.r() {
            for i in 0..self.d() {
                for b in (self.weights.get(i, j) as f32).to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(PRIME);
                }
            }
        }
        h
    }
}

impl TaskPromptVector {
    pub fn new(task_id: impl Into<String>, delta: Mat, init_fingerprint: u64) -> Self {
        TaskPromptVector {
            task_id: task_id.into(),
            delta,
            init_fingerprint,
        }
    }

    pub fn zeros(task_id: impl Into<String>, p_init: &SoftPrompt) -> Self {
        TaskPromptVector::new(
            task_id,
            Mat::zeros(p_init.d(), p_init.r()),
            p_init.fingerprint(),
        )
    }

    pub fn d(&self) -> usize {
        self.delta.rows()
    }

    pub fn r(&self) -> usize {
        self.delta.cols()
    }

    pub fn delta(&self) -> &Mat {
        &self.delta
    }

    pub fn delta_mut(&mut self) -> &mut Mat {
        &mut self.delta
    }

    pub fn init_fingerprint(&self) -> u64 {
        self.init_fingerprint
    }

    /// `p_init + delta`.
    pub fn apply(&self, p_init: &SoftPrompt) -> Result<SoftPrompt> {
        self.check_init(p_init)?;
        Ok(SoftPrompt::new(p_init.weights.add(&self.delta)?))
    }

    pub fn check_init(&self, p_init: &SoftPrompt) -> Result<()> {
        let fp = p_init.fingerprint();
        if fp != self.init_fingerprint {
            return Err(Error::IncomparableInit {
                left: self.init_fingerprint,
                right: fp,
            });
        }
        Ok(())
    }
}

impl ScalingTerm {
    /// All-ones scaling of length `r`.
    pub fn ones(task_id: impl Into<String>, r: usize) -> Self {
        ScalingTerm {
            task_id: task_id.into(),
            alpha: Vec64::ones(r),
        }
    }
}

/// `p_star − p_init`, entrywise.
///
/// Each entry is the rounded difference, moved by at most a few ulps when
/// needed so that `p_init + delta` reproduces `p_star` bit for bit.
pub fn compute_tpv(
    p_star: &SoftPrompt,
    p_init: &SoftPrompt,
    task_id: impl Into<String>,
) -> Result<TaskPromptVector> {
    let diff = p_star.weights.sub(&p_init.weights)?;
    let (d, r) = diff.shape();
    let data = diff
        .as_slice()
        .iter()
        .zip(p_init.weights.as_slice())
        .zip(p_star.weights.as_slice())
        .map(|((&delta, &base), &target)| reconstructing_delta(delta, base, target))
        .collect();
    Ok(TaskPromptVector::new(task_id, Mat::from_vec(d, r, data)?, p_init.fingerprint()))
}

fn reconstructing_delta(delta: f64, base: f64, target: f64) -> f64 {
    let mut cand = delta;
    for _ in 0..4 {
        let got = base + cand;
        if got == target {
            return cand;
        }
        cand = if got < target { cand.next_up() } else { cand.next_down() };
    }
    delta
}

/// Column `j` of the result is `alpha[j]` times column `j` of `t`.
pub fn rescale(t: &TaskPromptVector, a: &ScalingTerm) -> Result<TaskPromptVector> {
    if t.task_id != a.task_id {
        return Err(Error::TaskMismatch {
            left: t.task_id.clone(),
            right: a.task_id.clone(),
        });
    }
    Ok(TaskPromptVector {
        task_id: t.task_id.clone(),
        delta: t.delta.scale_cols(&a.alpha)?,
        init_fingerprint: t.init_fingerprint,
    })
}

fn check_comparable(t1: &TaskPromptVector, t2: &TaskPromptVector) -> Result<()> {
    if t1.init_fingerprint != t2.init_fingerprint {
        return Err(Error::IncomparableInit {
            left: t1.init_fingerprint,
            right: t2.init_fingerprint,
        });
    }
    if t1.delta.shape() != t2.delta.shape() {
        return Err(Error::ShapeMismatch {
            left: t1.delta.shape(),
            right: t2.delta.shape(),
        });
    }
    Ok(())
}

/// Dot product of the token-summed TPVs divided by `r²`, i.e. the inner
/// product of the mean-pooled token vectors. Symmetric and bilinear.
pub fn sim(t1: &TaskPromptVector, t2: &TaskPromptVector) -> Result<f64> {
    check_comparable(t1, t2)?;
    let r = t1.r() as f64;
    let s1 = t1.delta.col_sum()?;
    let s2 = t2.delta.col_sum()?;
    Ok(dot(&s1, &s2)? / (r * r))
}

/// Cosine similarity of the mean-pooled prompt tokens (the prompt-space
/// baseline metric).
pub fn cosine_prompt_sim(p1: &SoftPrompt, p2: &SoftPrompt) -> Result<f64> {
    if p1.weights.shape() != p2.weights.shape() {
        return Err(Error::ShapeMismatch {
            left: p1.weights.shape(),
            right: p2.weights.shape(),
        });
    }
    let a = p1.weights.col_mean()?;
    let b = p2.weights.col_mean()?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegeneratePrompt);
    }
    Ok((dot(&a, &b)? / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numkit::Rng;

    fn random_pair(seed: u64, d: usize, r: usize) -> (TaskPromptVector, TaskPromptVector) {
        let mut rng = Rng::new(seed);
        let fp = 0xfeed;
        (
            TaskPromptVector::new("a", Mat::randn(&mut rng, d, r, 1.0), fp),
            TaskPromptVector::new("b", Mat::randn(&mut rng, d, r, 1.0), fp),
        )
    }

    fn double_sum(t1: &TaskPromptVector, t2: &TaskPromptVector) -> f64 {
        let r = t1.r();
        let mut total = 0.0;
        for i in 0..r {
            for j in 0..r {
                for k in 0..t1.d() {
                    total += t1.delta().get(k, i) * t2.delta().get(k, j);
                }
            }
        }
        total / (r * r) as f64
    }

    #[test]
    fn compute_tpv_cases() {
        let mut rng = Rng::new(1);
        let p = SoftPrompt::random(&mut rng, 3, 2, 1.0);
        let t = compute_tpv(&p, &p, "x").unwrap();
        assert_eq!(t.delta().frobenius_norm(), 0.0);

        let zero = SoftPrompt::zeros(3, 2);
        let t = compute_tpv(&p, &zero, "x").unwrap();
        assert_eq!(t.delta(), p.weights());
        assert_eq!(t.init_fingerprint(), zero.fingerprint());

        let q = SoftPrompt::new(p.weights().add(&Mat::randn(&mut rng, 3, 2, 1.0)).unwrap());
        let t = compute_tpv(&q, &p, "x").unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want = q.weights().get(i, j) - p.weights().get(i, j);
                assert!((t.delta().get(i, j) - want).abs() <= 4.0 * f64::EPSILON * want.abs());
            }
        }
        assert_eq!(t.apply(&p).unwrap(), q);

        assert!(compute_tpv(&q, &SoftPrompt::zeros(2, 3), "x").is_err());
    }

    #[test]
    fn reconstruction_is_exact() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let p_init = SoftPrompt::random(&mut rng, 16, 8, 0.5);
            let step = Mat::randn(&mut rng, 16, 8, 2.0);
            let p_star = SoftPrompt::new(p_init.weights().add(&step).unwrap());
            let t = compute_tpv(&p_star, &p_init, "x").unwrap();
            assert_eq!(t.apply(&p_init).unwrap(), p_star);
        }
    }

    #[test]
    fn rescale_cases() {
        let (t, u) = random_pair(5, 4, 3);
        assert_eq!(rescale(&t, &ScalingTerm::ones("a", 3)).unwrap(), t);
        let zero = rescale(&t, &ScalingTerm { task_id: "a".into(), alpha: Vec64::zeros(3) }).unwrap();
        assert_eq!(zero.delta().frobenius_norm(), 0.0);
        let two = rescale(&t, &ScalingTerm { task_id: "a".into(), alpha: Vec64::filled(3, 2.0) }).unwrap();
        assert_eq!(sim(&two, &u).unwrap(), 2.0 * sim(&t, &u).unwrap());
        assert!(rescale(&t, &ScalingTerm::ones("b", 3)).is_err());
        assert!(rescale(&t, &ScalingTerm::ones("a", 4)).is_err());
    }

    #[test]
    fn sim_cases() {
        let (t, _) = random_pair(9, 4, 3);
        let z = TaskPromptVector::new("z", Mat::zeros(4, 3), t.init_fingerprint());
        assert_eq!(sim(&t, &z).unwrap(), 0.0);

        let e1 = Mat::from_columns(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let e2 = Mat::from_columns(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let a = TaskPromptVector::new("a", e1, 1);
        let b = TaskPromptVector::new("b", e2, 1);
        assert_eq!(sim(&a, &b).unwrap(), 0.0);

        let (t1, t2) = random_pair(21, 4, 3);
        let oracle = double_sum(&t1, &t2);
        assert!((sim(&t1, &t2).unwrap() - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    }

    #[test]
    fn sim_rejects_mismatched_init() {
        let (t1, _) = random_pair(2, 4, 3);
        let other = TaskPromptVector::new("o", Mat::zeros(4, 3), 7);
        let err = sim(&t1, &other).unwrap_err();
        assert!(err.to_string().contains("incomparable initializations"));
        let wrong_r = TaskPromptVector::new("o", Mat::zeros(4, 2), t1.init_fingerprint());
        assert!(sim(&t1, &wrong_r).is_err());
    }

    #[test]
    fn cosine_cases() {
        let mut rng = Rng::new(4);
        let p = SoftPrompt::random(&mut rng, 5, 3, 1.0);
        assert!((cosine_prompt_sim(&p, &p).unwrap() - 1.0).abs() < 1e-15);
        let neg = SoftPrompt::new(p.weights().scale(-2.0).unwrap());
        assert!((cosine_prompt_sim(&p, &neg).unwrap() + 1.0).abs() < 1e-15);

        let q = SoftPrompt::random(&mut rng, 5, 3, 1.0);
        let a = p.weights().col_mean().unwrap();
        let b = q.weights().col_mean().unwrap();
        let oracle = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>()
            / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
        assert!((cosine_prompt_sim(&p, &q).unwrap() - oracle).abs() < 1e-12);

        let zero = SoftPrompt::zeros(5, 3);
        assert!(matches!(cosine_prompt_sim(&p, &zero), Err(Error::DegeneratePrompt)));
    }

    #[test]
    fn fingerprint_tracks_f32_encoding() {
        let mut rng = Rng::new(8);
        let p = SoftPrompt::random(&mut rng, 4, 2, 1.0);
        assert_eq!(p.fingerprint(), p.clone().fingerprint());
        let q = SoftPrompt::random(&mut rng, 4, 2, 1.0);
        assert_ne!(p.fingerprint(), q.fingerprint());
    }

    proptest! {
        #[test]
        fn sim_symmetric_and_bilinear(seed in any::<u64>(), d in 1usize..33, r in 1usize..17, c in -4.0f64..4.0) {
            let (a, b) = random_pair(seed, d, r);
            prop_assert_eq!(sim(&a, &b).unwrap(), sim(&b, &a).unwrap());
            let scaled = rescale(&a, &ScalingTerm { task_id: "a".into(), alpha: Vec64::filled(r, c) }).unwrap();
            let lhs = sim(&scaled, &b).unwrap();
            let rhs = c * sim(&a, &b).unwrap();
            // cancellation-aware magnitude: |c| * sum_k |s1_k * s2_k| / r²
            let (s1, s2) = (a.delta().col_sum().unwrap(), b.delta().col_sum().unwrap());
            let mag = s1.iter().zip(s2.iter()).map(|(x, y)| (x * y).abs()).sum::<f64>() / (r * r) as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * c.abs() * mag);
        }
    }
}
