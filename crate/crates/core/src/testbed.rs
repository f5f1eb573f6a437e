//! Desk-scale stand-in for a frozen language model.
//!
//! The model mean-pools the prompt tokens together with the input token
//! embeddings, `h = mean([P | E(x)])`, and classifies with a single frozen
//! tanh layer, `logits = W·tanh(A·h) + b`. Only the prompt is trained.
//!
//! Synthetic tasks plant class-specific signal tokens into sequences of
//! background tokens. Tasks drawn from the same group share signal tokens;
//! a task with negative polarity uses the same tokens with the class mapping
//! rotated by one, so it conflicts with its positive-polarity siblings.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{softmax, splitmix64, Mat, Rng, Vec64};
use crate::tpv::{SoftPrompt, TaskPromptVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub vocab: usize,
    pub classes: usize,
    pub embed_std: f64,
    pub hidden_std: f64,
    pub readout_std: f64,
    pub bias_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            vocab: 64,
            classes: 3,
            embed_std: 1.0,
            hidden_std: 1.0,
            readout_std: 1.0,
            bias_std: 0.0,
        }
    }
}

/// Frozen classifier. Fields are private so nothing can mutate it after
/// construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    config: ModelConfig,
    seed: u64,
    embed: Mat,
    hidden: Mat,
    readout: Mat,
    bias: Vec64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl ToyModel {
    /// Draws `E` (d×V), `A` (d×d), `W` (C×d) and `b` from one seeded stream,
    /// in that order. `A` and `W` are scaled by `1/sqrt(d)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.d == 0 || config.vocab == 0 || config.classes < 2 {
            return Err(Error::config("model needs d >= 1, vocab >= 1, classes >= 2"));
        }
        let mut rng = Rng::new(seed);
        let d = config.d;
        let fan = (d as f64).sqrt();
        let embed = Mat::randn(&mut rng, d, config.vocab, config.embed_std);
        let hidden = Mat::randn(&mut rng, d, d, config.hidden_std / fan);
        let readout = Mat::randn(&mut rng, config.classes, d, config.readout_std / fan);
        let bias = Vec64::new((0..config.classes).map(|_| config.bias_std * rng.normal()).collect())?;
        Ok(ToyModel {
            config,
            seed,
            embed,
            hidden,
            readout,
            bias,
        })
    }

    /// Model with explicitly supplied parameters.
    pub fn from_parts(embed: Mat, hidden: Mat, readout: Mat, bias: Vec64) -> Result<Self> {
        let d = embed.rows();
        if hidden.shape() != (d, d) {
            return Err(Error::ShapeMismatch { left: hidden.shape(), right: (d, d) });
        }
        if readout.cols() != d {
            return Err(Error::ShapeMismatch { left: readout.shape(), right: (readout.rows(), d) });
        }
        if bias.len() != readout.rows() {
            return Err(Error::LengthMismatch { left: bias.len(), right: readout.rows() });
        }
        let config = ModelConfig {
            d,
            vocab: embed.cols(),
            classes: readout.rows(),
            ..ModelConfig::default()
        };
        Ok(ToyModel { config, seed: 0, embed, hidden, readout, bias })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn embed(&self) -> &Mat {
        &self.embed
    }

    pub fn hidden(&self) -> &Mat {
        &self.hidden
    }

    pub fn readout(&self) -> &Mat {
        &self.readout
    }

    pub fn bias(&self) -> &Vec64 {
        &self.bias
    }

    /// FNV-1a over the bit patterns of every parameter.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let all = self
            .embed
            .as_slice()
            .iter()
            .chain(self.hidden.as_slice())
            .chain(self.readout.as_slice())
            .chain(self.bias.iter());
        for v in all {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    fn check_prompt(&self, prompt: &SoftPrompt) -> Result<()> {
        if prompt.d() != self.d() {
            return Err(Error::ShapeMismatch {
                left: prompt.weights().shape(),
                right: (self.d(), prompt.r()),
            });
        }
        Ok(())
    }

    /// Pooled input `h` given the prompt column sum.
    fn pooled(&self, prompt_sum: &[f64], r: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut h = prompt_sum.to_vec();
        for &t in tokens {
            if t >= self.vocab() {
                return Err(Error::TokenOutOfRange { token: t, vocab: self.vocab() });
            }
            for (i, hi) in h.iter_mut().enumerate() {
                *hi += self.embed.get(i, t);
            }
        }
        let n = (r + tokens.len()) as f64;
        for hi in &mut h {
            *hi /= n;
        }
        Ok(h)
    }

    fn head(&self, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let act: Vec<f64> = self.hidden.mat_vec(h)?.iter().map(|z| z.tanh()).collect();
        let mut logits = self.readout.mat_vec(&act)?.into_vec();
        for (l, b) in logits.iter_mut().zip(self.bias.iter()) {
            *l += b;
        }
        Ok((act, logits))
    }

    pub fn forward(&self, prompt: &SoftPrompt, tokens: &[usize]) -> Result<Vec64> {
        self.check_prompt(prompt)?;
        let sum = prompt.weights().col_sum()?;
        let h = self.pooled(&sum, prompt.r(), tokens)?;
        let (_, logits) = self.head(&h)?;
        Vec64::new(logits)
    }

    /// Mean cross-entropy over the batch and its gradient with respect to
    /// every prompt entry.
    pub fn loss_and_grad_prompt(&self, prompt: &SoftPrompt, batch: &[&Example]) -> Result<(f64, Mat)> {
        self.check_prompt(prompt)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let (d, r) = (self.d(), prompt.r());
        let sum = prompt.weights().col_sum()?;
        let mut loss = 0.0;
        let mut dh_total = vec![0.0; d];
        for ex in batch {
            if ex.label >= self.classes() {
                return Err(Error::LabelOutOfRange { label: ex.label, classes: self.classes() });
            }
            let h = self.pooled(&sum, r, &ex.tokens)?;
            let (act, logits) = self.head(&h)?;
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss += lse - logits[ex.label];
            let mut dlogits = softmax(&logits);
            dlogits[ex.label] -= 1.0;
            let dact = self.readout.mat_t_vec(&dlogits)?;
            let dz: Vec<f64> = dact.iter().zip(&act).map(|(g, a)| g * (1.0 - a * a)).collect();
            let dh = self.hidden.mat_t_vec(&dz)?;
            let scale = 1.0 / (r + ex.tokens.len()) as f64;
            for (acc, g) in dh_total.iter_mut().zip(dh.iter()) {
                *acc += g * scale;
            }
        }
        let n = batch.len() as f64;
        let mut grad = Mat::zeros(d, r);
        for (i, g) in dh_total.iter().enumerate() {
            for j in 0..r {
                grad.set(i, j, g / n);
            }
        }
        Ok((loss / n, grad))
    }

    pub fn predict(&self, prompt: &SoftPrompt, tokens: &[usize]) -> Result<usize> {
        let logits = self.forward(prompt, tokens)?;
        Ok(crate::numkit::argmax(&logits).unwrap_or(0))
    }

    pub fn accuracy(&self, prompt: &SoftPrompt, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for ex in examples {
            if self.predict(prompt, &ex.tokens)? == ex.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

/// Which signal-token set class `label` draws from under `polarity`.
fn signal_class(label: usize, polarity: i8, classes: usize) -> usize {
    if polarity >= 0 {
        label
    } else {
        (label + 1) % classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub task_id: String,
    pub group: String,
    pub seed: u64,
    pub classes: usize,
    /// `signal_tokens[c]` are the tokens that indicate signal class `c`.
    pub signal_tokens: Vec<Vec<usize>>,
    pub polarity: i8,
    pub noise_rate: f64,
    pub seq_len: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl SyntheticTask {
    /// Label implied by the signal tokens of a sequence (majority vote over
    /// signal classes), or `None` if the sequence carries no signal.
    pub fn label_of(&self, tokens: &[usize]) -> Option<usize> {
        let mut votes = vec![0usize; self.classes];
        for &t in tokens {
            for (c, set) in self.signal_tokens.iter().enumerate() {
                if set.contains(&t) {
                    votes[c] += 1;
                }
            }
        }
        let best = (0..self.classes).max_by_key(|&c| (votes[c], std::cmp::Reverse(c)))?;
        if votes[best] == 0 {
            return None;
        }
        (0..self.classes).find(|&y| signal_class(y, self.polarity, self.classes) == best)
    }

    /// Copy with the training set reduced to `k` examples per class, chosen
    /// with `seed`. Validation and test sets are unchanged.
    pub fn few_shot(&self, k: usize, seed: u64) -> SyntheticTask {
        let mut rng = Rng::new(seed).fork(FEW_SHOT_STREAM);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        rng.shuffle(&mut order);
        let mut taken = vec![0usize; self.classes];
        let mut keep = Vec::new();
        for i in order {
            let y = self.train[i].label;
            if taken[y] < k {
                taken[y] += 1;
                keep.push(i);
            }
        }
        keep.sort_unstable();
        SyntheticTask {
            train: keep.into_iter().map(|i| self.train[i].clone()).collect(),
            ..self.clone()
        }
    }
}

const FEW_SHOT_STREAM: u64 = 0x5eed_f00d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub group: String,
    #[serde(default = "default_polarity")]
    pub polarity: i8,
    /// Fraction of the group's signal tokens (per class) this task uses; the
    /// rest are private to the task.
    #[serde(default = "default_share")]
    pub share: f64,
}

fn default_polarity() -> i8 {
    1
}

fn default_share() -> f64 {
    1.0
}

/// Declarative description of a related task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilySpec {
    pub seq_len: usize,
    pub signals_per_class: usize,
    /// Signal tokens planted per sequence.
    pub signal_count: usize,
    pub noise_rate: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub tasks: Vec<TaskSpec>,
}

impl Default for FamilySpec {
    fn default() -> Self {
        FamilySpec {
            seq_len: 12,
            signals_per_class: 1,
            signal_count: 8,
            noise_rate: 0.1,
            n_train: 256,
            n_val: 128,
            n_test: 256,
            tasks: Vec::new(),
        }
    }
}

impl FamilySpec {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.signals_per_class == 0 {
            return Err(Error::config("seq_len and signals_per_class must be positive"));
        }
        if self.signal_count > self.seq_len {
            return Err(Error::config("signal_count exceeds seq_len"));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config("noise_rate must lie in [0, 1]"));
        }
        let mut ids = std::collections::HashSet::new();
        for t in &self.tasks {
            if !ids.insert(&t.id) {
                return Err(Error::DuplicateTask(t.id.clone()));
            }
            if t.polarity != 1 && t.polarity != -1 {
                return Err(Error::config(format!("task {}: polarity must be +1 or -1", t.id)));
            }
            if !(0.0..=1.0).contains(&t.share) {
                return Err(Error::config(format!("task {}: share must lie in [0, 1]", t.id)));
            }
        }
        Ok(())
    }
}

fn task_seed(family_seed: u64, task_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in task_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(family_seed ^ h)
}

/// Allocates signal tokens and generates every task's train/val/test data.
///
/// Tokens are assigned from id 0 upward: first each group's shared signal
/// sets (in order of first appearance), then each task's private tokens.
/// Everything left over is the background pool.
pub fn make_task_family(spec: &FamilySpec, classes: usize, vocab: usize, seed: u64) -> Result<Vec<SyntheticTask>> {
    spec.validate()?;
    let spc = spec.signals_per_class;
    let mut next = 0usize;
    let mut group_tokens: HashMap<&str, Vec<Vec<usize>>> = HashMap::new();
    for t in &spec.tasks {
        group_tokens.entry(t.group.as_str()).or_insert_with(|| {
            let sets = (0..classes).map(|c| (next + c * spc..next + (c + 1) * spc).collect()).collect();
            next += classes * spc;
            sets
        });
    }
    let mut task_tokens = Vec::with_capacity(spec.tasks.len());
    for t in &spec.tasks {
        let shared = (t.share * spc as f64).round() as usize;
        let private = spc - shared;
        let sets: Vec<Vec<usize>> = group_tokens[t.group.as_str()]
            .iter()
            .map(|set| {
                let mut s: Vec<usize> = set[..shared].to_vec();
                s.extend(next..next + private);
                next += private;
                s
            })
            .collect();
        task_tokens.push(sets);
    }
    if next >= vocab {
        return Err(Error::VocabularyTooSmall { needed: next + 1, vocab });
    }
    let background: Vec<usize> = (next..vocab).collect();

    spec.tasks
        .iter()
        .zip(task_tokens)
        .map(|(t, signal_tokens)| {
            let tseed = task_seed(seed, &t.id);
            let mut rng = Rng::new(tseed);
            let generate = |n: usize, rng: &mut Rng| -> Vec<Example> {
                let mut out: Vec<Example> = (0..n)
                    .map(|i| {
                        let label = i % classes;
                        let set = &signal_tokens[signal_class(label, t.polarity, classes)];
                        let mut tokens: Vec<usize> = (0..spec.seq_len)
                            .map(|pos| {
                                if pos < spec.signal_count {
                                    let tok = set[rng.below(set.len())];
                                    if rng.uniform() < spec.noise_rate {
                                        rng.below(vocab)
                                    } else {
                                        tok
                                    }
                                } else {
                                    background[rng.below(background.len())]
                                }
                            })
                            .collect();
                        rng.shuffle(&mut tokens);
                        Example { tokens, label }
                    })
                    .collect();
                rng.shuffle(&mut out);
                out
            };
            let train = generate(spec.n_train, &mut rng);
            let val = generate(spec.n_val, &mut rng);
            let test = generate(spec.n_test, &mut rng);
            Ok(SyntheticTask {
                task_id: t.id.clone(),
                group: t.group.clone(),
                seed: tseed,
                classes,
                signal_tokens,
                polarity: t.polarity,
                noise_rate: spec.noise_rate,
                seq_len: spec.seq_len,
                train,
                val,
                test,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTuneConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub optimizer: Optimizer,
}

impl Default for PromptTuneConfig {
    fn default() -> Self {
        PromptTuneConfig {
            lr: 30.0,
            steps: 500,
            batch_size: 32,
            seed: 0,
            eval_every: 50,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl PromptTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("prompt tuning needs lr > 0, batch_size > 0, eval_every > 0"));
        }
        Ok(())
    }
}

/// Mini-batch index stream shared by stage 1 and stage 2 so that equal
/// seeds give equal batches. When the batch covers the whole training set
/// every batch is the full set in order; otherwise examples are drawn
/// without replacement from a reshuffled permutation each epoch.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, n: usize, batch_size: usize) -> Self {
        BatchSampler {
            rng: Rng::new(seed),
            order: (0..n).collect(),
            cursor: n,
            batch_size,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if self.batch_size >= n {
            return (0..n).collect();
        }
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == n {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Whether step `step` (counting completed updates) is an evaluation point.
pub fn is_eval_step(step: usize, eval_every: usize, total: usize) -> bool {
    step == 0 || step % eval_every == 0 || step == total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    /// Prompt at the best validation checkpoint.
    pub prompt: SoftPrompt,
    pub best_step: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    /// Training loss of every update, in order.
    pub losses: Vec<f64>,
    /// `(step, validation accuracy)` at every evaluation point.
    pub evals: Vec<(usize, f64)>,
}

struct Adam {
    m: Mat,
    v: Mat,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shape: (usize, usize)) -> Self {
        Adam { m: Mat::zeros(shape.0, shape.1), v: Mat::zeros(shape.0, shape.1), t: 0 }
    }

    fn step(&mut self, param: &mut Mat, grad: &Mat, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..param.rows() {
            for j in 0..param.cols() {
                let g = grad.get(i, j);
                let m = Self::B1 * self.m.get(i, j) + (1.0 - Self::B1) * g;
                let v = Self::B2 * self.v.get(i, j) + (1.0 - Self::B2) * g * g;
                self.m.set(i, j, m);
                self.v.set(i, j, v);
                let upd = lr * (m / c1) / ((v / c2).sqrt() + Self::EPS);
                param.set(i, j, param.get(i, j) - upd);
            }
        }
    }
}

/// Stage-1 prompt tuning from `p_init`: mini-batch descent on the prompt,
/// keeping the checkpoint with the best validation accuracy (earliest on
/// ties). The prompt is parameterized as `p_init + T` so that the TPV is
/// the tracked quantity.
pub fn prompt_tune(model: &ToyModel, task: &SyntheticTask, cfg: &PromptTuneConfig, p_init: &SoftPrompt) -> Result<TuneOutcome> {
    cfg.validate()?;
    if task.train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (d, r) = (p_init.d(), p_init.r());
    let mut delta = Mat::zeros(d, r);
    let mut sampler = BatchSampler::new(cfg.seed, task.train.len(), cfg.batch_size);
    let mut adam = (cfg.optimizer == Optimizer::Adam).then(|| Adam::new((d, r)));
    let current = |delta: &Mat| -> Result<SoftPrompt> { Ok(SoftPrompt::new(p_init.weights().add(delta)?)) };

    let mut prompt = current(&delta)?;
    let mut best = (model.accuracy(&prompt, &task.val)?, 0usize, prompt.clone());
    let mut evals = vec![(0, best.0)];
    let mut losses = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let batch: Vec<&Example> = sampler.next_batch().into_iter().map(|i| &task.train[i]).collect();
        let (loss, grad) = model.loss_and_grad_prompt(&prompt, &batch)?;
        losses.push(loss);
        match adam.as_mut() {
            Some(opt) => opt.step(&mut delta, &grad, cfg.lr),
            None => delta.axpy_assign(-cfg.lr, &grad)?,
        }
        prompt = current(&delta)?;
        let step = k + 1;
        if is_eval_step(step, cfg.eval_every, cfg.steps) {
            let acc = model.accuracy(&prompt, &task.val)?;
            evals.push((step, acc));
            if acc > best.0 {
                best = (acc, step, prompt.clone());
            }
        }
    }
    let (best_val_accuracy, best_step, prompt) = best;
    let test_accuracy = model.accuracy(&prompt, &task.test)?;
    Ok(TuneOutcome {
        prompt,
        best_step,
        best_val_accuracy,
        test_accuracy,
        losses,
        evals,
    })
}

/// Stage 1 for a list of tasks; returns each task's TPV against `p_init`.
pub fn learn_tpvs(model: &ToyModel, tasks: &[SyntheticTask], cfg: &PromptTuneConfig, p_init: &SoftPrompt) -> Result<Vec<(TaskPromptVector, TuneOutcome)>> {
    tasks
        .iter()
        .map(|task| {
            let out = prompt_tune(model, task, cfg, p_init)?;
            let tpv = crate::tpv::compute_tpv(&out.prompt, p_init, task.task_id.clone())?;
            Ok((tpv, out))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> ToyModel {
        ToyModel::new(ModelConfig { d: 6, vocab: 20, classes: 3, bias_std: 0.5, ..ModelConfig::default() }, seed).unwrap()
    }

    /// Forward pass written out with explicit loops over the raw parameters.
    fn forward_oracle(m: &ToyModel, p: &SoftPrompt, x: &[usize]) -> Vec<f64> {
        let (d, r) = (m.d(), p.r());
        let mut h = vec![0.0; d];
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..r {
                s += p.weights().get(i, j);
            }
            for &t in x {
                s += m.embed().get(i, t);
            }
            h[i] = s / (r + x.len()) as f64;
        }
        let mut a = vec![0.0; d];
        for i in 0..d {
            let mut z = 0.0;
            for k in 0..d {
                z += m.hidden().get(i, k) * h[k];
            }
            a[i] = z.tanh();
        }
        (0..m.classes())
            .map(|c| {
                let mut l = m.bias()[c];
                for i in 0..d {
                    l += m.readout().get(c, i) * a[i];
                }
                l
            })
            .collect()
    }

    #[test]
    fn zero_prompt_zero_embeddings_give_bias() {
        let m = small_model(1);
        let zero = ToyModel::from_parts(Mat::zeros(6, 20), m.hidden().clone(), m.readout().clone(), m.bias().clone()).unwrap();
        let logits = zero.forward(&SoftPrompt::zeros(6, 3), &[1, 2, 3]).unwrap();
        assert_eq!(logits.as_slice(), m.bias().as_slice());
    }

    #[test]
    fn duplicating_columns_keeps_logits() {
        let m = small_model(2);
        let mut rng = Rng::new(3);
        let p = SoftPrompt::random(&mut rng, 6, 2, 0.5);
        let x = vec![4, 7, 9];
        let cols: Vec<Vec<f64>> = (0..2).map(|j| p.weights().col(j).into_vec()).collect();
        let doubled = SoftPrompt::new(Mat::from_columns(&[cols[0].clone(), cols[1].clone(), cols[0].clone(), cols[1].clone()]).unwrap());
        let x2 = vec![4, 7, 9, 4, 7, 9];
        let a = m.forward(&p, &x).unwrap();
        let b = m.forward(&doubled, &x2).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_matches_oracle() {
        let m = small_model(4);
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let p = SoftPrompt::random(&mut rng, 6, 4, 1.0);
            let x: Vec<usize> = (0..5).map(|_| rng.below(20)).collect();
            let got = m.forward(&p, &x).unwrap();
            for (g, w) in got.iter().zip(forward_oracle(&m, &p, &x)) {
                assert!((g - w).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn out_of_range_token() {
        let m = small_model(1);
        assert!(matches!(m.forward(&SoftPrompt::zeros(6, 2), &[20]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let m = small_model(6);
        let flat = ToyModel::from_parts(m.embed().clone(), m.hidden().clone(), Mat::zeros(3, 6), Vec64::zeros(3)).unwrap();
        let ex = Example { tokens: vec![1, 2], label: 1 };
        let (loss, grad) = flat.loss_and_grad_prompt(&SoftPrompt::zeros(6, 2), &[&ex]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        assert_eq!(grad.frobenius_norm(), 0.0);
    }

    #[test]
    fn balanced_binary_loss_is_ln2() {
        let m = ToyModel::from_parts(Mat::zeros(2, 4), Mat::zeros(2, 2), Mat::zeros(2, 2), Vec64::new(vec![0.3, 0.3]).unwrap()).unwrap();
        let ex = Example { tokens: vec![0, 1, 2], label: 0 };
        let (loss, _) = m.loss_and_grad_prompt(&SoftPrompt::zeros(2, 2), &[&ex]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = small_model(1);
        assert!(matches!(m.loss_and_grad_prompt(&SoftPrompt::zeros(6, 2), &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn family_label_functions() {
        let spec = FamilySpec {
            noise_rate: 0.0,
            n_train: 40,
            n_val: 10,
            n_test: 10,
            tasks: vec![
                TaskSpec { id: "a".into(), group: "g".into(), polarity: 1, share: 1.0 },
                TaskSpec { id: "b".into(), group: "g".into(), polarity: 1, share: 1.0 },
                TaskSpec { id: "c".into(), group: "g".into(), polarity: -1, share: 1.0 },
            ],
            ..FamilySpec::default()
        };
        let tasks = make_task_family(&spec, 2, 64, 9).unwrap();
        for ex in &tasks[0].train {
            assert_eq!(tasks[0].label_of(&ex.tokens), Some(ex.label));
            assert_eq!(tasks[1].label_of(&ex.tokens), Some(ex.label));
            assert_ne!(tasks[2].label_of(&ex.tokens), Some(ex.label));
        }
        for t in &tasks {
            assert!(t.train.iter().all(|e| e.label < 2 && e.tokens.len() == 12 && e.tokens.iter().all(|&x| x < 64)));
        }
        assert_eq!(tasks, make_task_family(&spec, 2, 64, 9).unwrap());
    }

    #[test]
    fn family_vocab_too_small() {
        let spec = FamilySpec {
            signals_per_class: 2,
            tasks: vec![TaskSpec { id: "a".into(), group: "g".into(), polarity: 1, share: 0.0 }],
            ..FamilySpec::default()
        };
        assert!(matches!(make_task_family(&spec, 4, 16, 1), Err(Error::VocabularyTooSmall { .. })));
        assert!(make_task_family(&spec, 4, 17, 1).is_ok());
    }

    #[test]
    fn few_shot_counts() {
        let spec = FamilySpec {
            tasks: vec![TaskSpec { id: "a".into(), group: "g".into(), polarity: 1, share: 1.0 }],
            ..FamilySpec::default()
        };
        let task = &make_task_family(&spec, 2, 64, 1).unwrap()[0];
        let fs = task.few_shot(16, 3);
        assert_eq!(fs.train.len(), 32);
        assert_eq!(fs.train.iter().filter(|e| e.label == 0).count(), 16);
        assert_eq!(fs.val, task.val);
        assert_eq!(fs, task.few_shot(16, 3));
    }

    #[test]
    fn sampler_covers_epoch() {
        let mut s = BatchSampler::new(1, 10, 5);
        let mut seen: Vec<usize> = s.next_batch().into_iter().chain(s.next_batch()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut full = BatchSampler::new(1, 4, 8);
        assert_eq!(full.next_batch(), vec![0, 1, 2, 3]);
    }

    /// Central differences of the batch loss for `samples` random prompt
    /// entries; returns the largest relative error against the analytic
    /// gradient. Entries below 1e-4 in magnitude are compared against 1e-4,
    /// since the roundoff of a central difference is about ε·|L|/h.
    fn fd_max_rel_err(m: &ToyModel, p: &SoftPrompt, batch: &[&Example], samples: usize, rng: &mut Rng) -> f64 {
        let (_, grad) = m.loss_and_grad_prompt(p, batch).unwrap();
        let (d, r) = (p.d(), p.r());
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let (i, j) = (rng.below(d), rng.below(r));
            let mut w = p.weights().clone();
            w.set(i, j, p.weights().get(i, j) + h);
            let up = m.loss_and_grad_prompt(&SoftPrompt::new(w.clone()), batch).unwrap().0;
            w.set(i, j, p.weights().get(i, j) - h);
            let down = m.loss_and_grad_prompt(&SoftPrompt::new(w), batch).unwrap().0;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.get(i, j);
            let scale = numeric.abs().max(analytic.abs()).max(1e-4);
            worst = worst.max((numeric - analytic).abs() / scale);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        for seed in 0..5 {
            let m = small_model(seed);
            let p = SoftPrompt::random(&mut rng, 6, 4, 1.0);
            let examples: Vec<Example> = (0..6)
                .map(|k| Example { tokens: (0..5).map(|_| rng.below(20)).collect(), label: k % 3 })
                .collect();
            let batch: Vec<&Example> = examples.iter().collect();
            let err = fd_max_rel_err(&m, &p, &batch, 50, &mut rng);
            assert!(err < 1e-6, "seed {seed}: max relative error {err}");
        }
    }

    /// Two classes, no label noise and ten signal tokens per class. With
    /// three classes a frozen random readout can leave one class nearly
    /// unreachable through the pooled prompt, so the binary form is used.
    fn separable_task(seed: u64) -> SyntheticTask {
        let spec = FamilySpec {
            noise_rate: 0.0,
            signal_count: 10,
            tasks: vec![TaskSpec { id: "sep".into(), group: "g".into(), polarity: 1, share: 1.0 }],
            ..FamilySpec::default()
        };
        make_task_family(&spec, 2, 64, seed).unwrap().remove(0)
    }

    #[test]
    fn separable_task_is_learned() {
        for seed in 0..3 {
            let m = ToyModel::new(ModelConfig { classes: 2, ..ModelConfig::default() }, 100 + seed).unwrap();
            let task = separable_task(seed);
            let p_init = SoftPrompt::random(&mut Rng::new(seed), 16, 8, 0.5);
            let out = prompt_tune(&m, &task, &PromptTuneConfig { seed, ..PromptTuneConfig::default() }, &p_init).unwrap();
            let held_out = m.accuracy(&out.prompt, &task.test).unwrap();
            assert!(held_out > 0.95, "seed {seed}: held-out accuracy {held_out}");
        }
    }

    #[test]
    fn tuning_is_deterministic_and_leaves_model_frozen() {
        let m = ToyModel::new(ModelConfig { classes: 2, ..ModelConfig::default() }, 7).unwrap();
        let before = m.param_hash();
        let task = separable_task(4);
        let p_init = SoftPrompt::random(&mut Rng::new(4), 16, 8, 0.5);
        let cfg = PromptTuneConfig { steps: 60, eval_every: 20, ..PromptTuneConfig::default() };
        let a = prompt_tune(&m, &task, &cfg, &p_init).unwrap();
        let b = prompt_tune(&m, &task, &cfg, &p_init).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.param_hash(), before);
        assert_eq!(a.losses.len(), 60);
        assert_eq!(a.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 20, 40, 60]);
    }

    #[test]
    fn zero_steps_returns_init() {
        let m = ToyModel::new(ModelConfig { classes: 2, ..ModelConfig::default() }, 7).unwrap();
        let task = separable_task(5);
        let p_init = SoftPrompt::random(&mut Rng::new(5), 16, 8, 0.5);
        let out = prompt_tune(&m, &task, &PromptTuneConfig { steps: 0, ..PromptTuneConfig::default() }, &p_init).unwrap();
        assert_eq!(out.prompt, p_init);
        let tpv = crate::tpv::compute_tpv(&out.prompt, &p_init, "t").unwrap();
        assert_eq!(tpv.delta().max_abs(), 0.0);
    }
}
