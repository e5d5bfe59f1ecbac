//! Weight-update semantics of the pipelining policies, checked on a toy model.
//!
//! The toy model is a chain of dense linear layers with a mean-squared-error
//! loss, so gradients are exact and runs are reproducible bit-for-bit in
//! double precision. [`pipelined_execute`] replays the generated stage
//! programs with real tensors: each stage keeps its own weight versions,
//! stashes the inputs of in-flight microbatches, passes activations and
//! gradients through queues, and applies SGD (optionally with momentum) at
//! every WeightUpdate. The reference loops implement
//!
//! * vanilla: `W(t+1) = W(t) - ν·∇f(W(t))`
//! * delayed by one batch: `W(t+1) = W(t) - ν·∇f(W(t-1))`, with
//!   `W(1) = W(0) - ν·∇f(W(0))`
//!
//! where momentum replaces the gradient by `m_t = β·m_{t-1} + (1-β)·g_t`.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schedule::{generate_schedule, OpKind, PipelinePolicy, VersionRef};

pub type Weights = Vec<DMatrix<f64>>;

/// Chain of linear layers `y = W_L ··· W_1 x` with loss
/// `1/(2b) Σ ||y - target||²` over a microbatch of `b` samples.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub layers: Weights,
    pub microbatch_size: usize,
    data: Data,
}

#[derive(Debug, Clone)]
enum Data {
    /// `y = teacher·x + noise`, with `x` and the noise drawn per microbatch.
    /// Microbatch `k` reuses the data of `(k - 1) % cycle + 1` when `cycle` is set.
    Teacher { teacher: DMatrix<f64>, noise: f64, seed: u64, cycle: Option<u32> },
    /// Every microbatch is the same single sample.
    Fixed { x: f64, y: f64 },
}

impl ToyModel {
    /// `layers` square layers of width `dim`, initialised near the identity.
    pub fn chain(seed: u64, layers: usize, dim: usize, microbatch_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.3 / (dim as f64).sqrt();
        let weights = (0..layers)
            .map(|_| DMatrix::from_fn(dim, dim, |i, j| f64::from(u8::from(i == j)) + scale * rng.gen_range(-1.0..1.0)))
            .collect();
        let teacher = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
        ToyModel {
            layers: weights,
            microbatch_size,
            data: Data::Teacher {
                teacher,
                noise: 0.05,
                seed,
                cycle: None,
            },
        }
    }

    /// Single-layer least squares with fresh samples every microbatch.
    pub fn linear_regression(seed: u64, dim: usize, microbatch_size: usize) -> Self {
        let mut model = Self::chain(seed, 1, dim, microbatch_size);
        model.layers[0] = DMatrix::zeros(dim, dim);
        model
    }

    /// Single-layer least squares over a fixed dataset of `samples` microbatches,
    /// so the batch loss is the same quadratic at every step.
    pub fn quadratic_bowl(seed: u64, dim: usize, microbatch_size: usize, samples: u32) -> Self {
        let mut model = Self::linear_regression(seed, dim, microbatch_size);
        if let Data::Teacher { cycle, .. } = &mut model.data {
            *cycle = Some(samples.max(1));
        }
        model
    }

    /// Scalar layers trained on the single sample `(x, y)`.
    pub fn fixed_sample(layers: Weights, x: f64, y: f64) -> Self {
        ToyModel {
            layers,
            microbatch_size: 1,
            data: Data::Fixed { x, y },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].ncols()
    }

    /// Inputs and targets of global microbatch `k` (1-indexed), one sample per
    /// column. The same `k` always yields the same data.
    pub fn microbatch(&self, k: u32) -> (DMatrix<f64>, DMatrix<f64>) {
        match &self.data {
            Data::Fixed { x, y } => (DMatrix::from_element(1, 1, *x), DMatrix::from_element(1, 1, *y)),
            Data::Teacher { teacher, noise, seed, cycle } => {
                let k = cycle.map_or(k, |c| (k.max(1) - 1) % c + 1);
                let (dim, b) = (self.input_dim(), self.microbatch_size);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(k) << 20) ^ 0x9E37_79B9);
                let x = DMatrix::from_fn(dim, b, |_, _| rng.gen_range(-1.0..1.0));
                let eps = DMatrix::from_fn(teacher.nrows(), b, |_, _| noise * rng.gen_range(-1.0..1.0));
                let y = teacher * &x + eps;
                (x, y)
            }
        }
    }

    /// Loss and per-layer gradients of microbatch `k` at `weights`.
    pub fn loss_and_grad(&self, weights: &[DMatrix<f64>], k: u32) -> (f64, Weights) {
        let (x, y) = self.microbatch(k);
        let mut acts = vec![x];
        for w in weights {
            let next = w * acts.last().unwrap();
            acts.push(next);
        }
        let b = self.microbatch_size as f64;
        let residual = acts.last().unwrap() - &y;
        let loss = residual.norm_squared() / (2.0 * b);
        let mut delta = residual / b;
        let mut grads = vec![DMatrix::zeros(0, 0); weights.len()];
        for i in (0..weights.len()).rev() {
            grads[i] = &delta * acts[i].transpose();
            delta = weights[i].transpose() * delta;
        }
        (loss, grads)
    }

    pub fn loss(&self, weights: &[DMatrix<f64>], k: u32) -> f64 {
        self.loss_and_grad(weights, k).0
    }

    /// Mean loss and gradient over the `m` microbatches of batch `t` (0-indexed).
    pub fn batch_loss_and_grad(&self, weights: &[DMatrix<f64>], t: usize, m: usize) -> (f64, Weights) {
        let mut total_loss = 0.0;
        let mut total: Weights = weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
        for i in 0..m {
            let (l, g) = self.loss_and_grad(weights, (t * m + i + 1) as u32);
            total_loss += l;
            for (acc, gi) in total.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        for acc in &mut total {
            *acc /= m as f64;
        }
        (total_loss / m as f64, total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Microbatches per batch.
    pub m: usize,
    pub num_batches: usize,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.m == 0 {
            return Err(Error::Config("at least one microbatch per batch".into()));
        }
        Ok(())
    }
}

struct Sgd {
    lr: f64,
    beta: f64,
    velocity: Option<Weights>,
}

impl Sgd {
    fn new(cfg: &TrainerConfig) -> Self {
        Sgd {
            lr: cfg.learning_rate,
            beta: cfg.momentum,
            velocity: None,
        }
    }

    fn step(&mut self, weights: &[DMatrix<f64>], grad: Weights) -> Weights {
        let direction = if self.beta == 0.0 {
            grad
        } else {
            let v = match self.velocity.take() {
                None => grad.into_iter().map(|g| g * (1.0 - self.beta)).collect::<Weights>(),
                Some(prev) => prev
                    .into_iter()
                    .zip(grad)
                    .map(|(v, g)| v * self.beta + g * (1.0 - self.beta))
                    .collect(),
            };
            self.velocity = Some(v.clone());
            v
        };
        weights.iter().zip(direction).map(|(w, d)| w - d * self.lr).collect()
    }
}

/// Gradient evaluated `delay` batches behind the weights it is applied to,
/// clamped at version 0. Returns `W(0)..=W(T)`.
pub fn reference_delayed(model: &ToyModel, cfg: &TrainerConfig, delay: usize) -> Result<Vec<Weights>> {
    cfg.validate()?;
    let mut sgd = Sgd::new(cfg);
    let mut history = vec![model.layers.clone()];
    for t in 0..cfg.num_batches {
        let stale = &history[t.saturating_sub(delay)];
        let (_, grad) = model.batch_loss_and_grad(stale, t, cfg.m);
        let next = sgd.step(&history[t], grad);
        history.push(next);
    }
    Ok(history)
}

pub fn reference_vanilla(model: &ToyModel, cfg: &TrainerConfig) -> Result<Vec<Weights>> {
    reference_delayed(model, cfg, 0)
}

pub fn reference_2bw(model: &ToyModel, cfg: &TrainerConfig) -> Result<Vec<Weights>> {
    reference_delayed(model, cfg, 1)
}

/// Outcome of replaying a schedule with real tensors.
#[derive(Debug, Clone)]
pub struct Execution {
    /// Full-model weights for every version produced, starting with version 0.
    pub trajectory: Vec<Weights>,
    /// `(stage, microbatch, forward version, backward version)`.
    pub version_log: Vec<(usize, u32, u32, u32)>,
}

impl Execution {
    /// Weights after each batch: every version for per-batch policies, every
    /// `m`-th version for per-microbatch updates.
    pub fn batch_trajectory(&self, policy: PipelinePolicy, m: usize) -> Vec<Weights> {
        if policy == PipelinePolicy::PipeDream1F1B {
            self.trajectory.iter().step_by(m).cloned().collect()
        } else {
            self.trajectory.clone()
        }
    }
}

struct StageExec {
    range: std::ops::Range<usize>,
    versions: BTreeMap<u32, Weights>,
    sgd: Sgd,
    grad_sum: Option<Weights>,
    grad_count: usize,
    /// microbatch -> (version, input of every layer, output)
    stash: HashMap<u32, (u32, Vec<DMatrix<f64>>)>,
    inbox_act: HashMap<u32, DMatrix<f64>>,
    inbox_grad: HashMap<u32, DMatrix<f64>>,
    outbox_act: HashMap<u32, DMatrix<f64>>,
    outbox_grad: HashMap<u32, DMatrix<f64>>,
    barriers: usize,
    fwd_version: HashMap<u32, u32>,
}

/// Replays `policy`'s programs for `cfg.num_batches` batches on `depth`
/// stages with an equal number of layers each.
pub fn pipelined_execute(model: &ToyModel, cfg: &TrainerConfig, policy: PipelinePolicy, depth: usize) -> Result<Execution> {
    cfg.validate()?;
    let layers = model.layers.len();
    if depth == 0 || !layers.is_multiple_of(depth) {
        return Err(Error::Indivisible { depth, blocks: layers });
    }
    let programs = generate_schedule(policy, depth, cfg.m, cfg.num_batches)?;
    let per = layers / depth;
    let mut stages: Vec<StageExec> = (0..depth)
        .map(|s| {
            let range = s * per..(s + 1) * per;
            let mut versions = BTreeMap::new();
            versions.insert(0, model.layers[range.clone()].to_vec());
            StageExec {
                range,
                versions,
                sgd: Sgd::new(cfg),
                grad_sum: None,
                grad_count: 0,
                stash: HashMap::new(),
                inbox_act: HashMap::new(),
                inbox_grad: HashMap::new(),
                outbox_act: HashMap::new(),
                outbox_grad: HashMap::new(),
                barriers: 0,
                fwd_version: HashMap::new(),
            }
        })
        .collect();
    let mut pcs = vec![0usize; depth];
    let mut version_log = Vec::new();
    // links[s] carries activations s -> s+1; back[s] gradients s+1 -> s
    let mut links: Vec<VecDeque<(u32, DMatrix<f64>)>> = vec![VecDeque::new(); depth];
    let mut back: Vec<VecDeque<(u32, DMatrix<f64>)>> = vec![VecDeque::new(); depth];
    let b = model.microbatch_size as f64;

    loop {
        let mut progressed = false;
        for s in 0..depth {
            while let Some(op) = programs[s].ops.get(pcs[s]).copied() {
                let k = op.microbatch.unwrap_or(0);
                match op.kind {
                    OpKind::ActivationRecv => {
                        let Some(pos) = links[s - 1].iter().position(|(id, _)| *id == k) else { break };
                        let (_, t) = links[s - 1].remove(pos).unwrap();
                        stages[s].inbox_act.insert(k, t);
                    }
                    OpKind::GradRecv => {
                        let Some(pos) = back[s].iter().position(|(id, _)| *id == k) else { break };
                        let (_, t) = back[s].remove(pos).unwrap();
                        stages[s].inbox_grad.insert(k, t);
                    }
                    OpKind::ActivationSend => {
                        let t = stages[s].outbox_act.remove(&k).ok_or_else(|| missing(s, "activation", k))?;
                        links[s].push_back((k, t));
                    }
                    OpKind::GradSend => {
                        let t = stages[s].outbox_grad.remove(&k).ok_or_else(|| missing(s, "gradient", k))?;
                        back[s - 1].push_back((k, t));
                    }
                    OpKind::Forward => {
                        let st = &mut stages[s];
                        let v = match op.version {
                            Some(VersionRef::Fixed(v)) => v,
                            _ => *st.versions.keys().next_back().unwrap(),
                        };
                        let weights = st.versions.get(&v).ok_or_else(|| {
                            Error::Shape(format!("stage {s}: version {v} does not exist when microbatch {k} starts"))
                        })?;
                        let input = if s == 0 {
                            model.microbatch(k).0
                        } else {
                            st.inbox_act.remove(&k).ok_or_else(|| missing(s, "received activation", k))?
                        };
                        let mut inputs = vec![input];
                        for w in weights {
                            let next = w * inputs.last().unwrap();
                            inputs.push(next);
                        }
                        let out = inputs.pop().unwrap();
                        if s + 1 < depth {
                            st.outbox_act.insert(k, out.clone());
                        }
                        inputs.push(out);
                        st.stash.insert(k, (v, inputs));
                        st.fwd_version.insert(k, v);
                    }
                    OpKind::Backward => {
                        let st = &mut stages[s];
                        let (v, mut acts) = st.stash.remove(&k).ok_or_else(|| missing(s, "stash", k))?;
                        if let Some(VersionRef::Fixed(want)) = op.version {
                            if want != v {
                                return Err(Error::Shape(format!(
                                    "stage {s}: microbatch {k} stashed version {v}, backward expects {want}"
                                )));
                            }
                        }
                        let out = acts.pop().unwrap();
                        let mut delta = if s + 1 == depth {
                            (out - model.microbatch(k).1) / b
                        } else {
                            st.inbox_grad.remove(&k).ok_or_else(|| missing(s, "received gradient", k))?
                        };
                        let weights = &st.versions[&v];
                        let mut grads = vec![DMatrix::zeros(0, 0); weights.len()];
                        for i in (0..weights.len()).rev() {
                            grads[i] = &delta * acts[i].transpose();
                            delta = weights[i].transpose() * delta;
                        }
                        match &mut st.grad_sum {
                            None => st.grad_sum = Some(grads),
                            Some(sum) => sum.iter_mut().zip(grads).for_each(|(a, g)| *a += g),
                        }
                        st.grad_count += 1;
                        if s > 0 {
                            st.outbox_grad.insert(k, delta);
                        }
                        version_log.push((s, k, st.fwd_version.remove(&k).unwrap(), v));
                    }
                    OpKind::WeightUpdate => {
                        let st = &mut stages[s];
                        let Some(VersionRef::Fixed(v)) = op.version else {
                            return Err(Error::Shape(format!("stage {s}: update without a version")));
                        };
                        let mut grad = st.grad_sum.take().ok_or_else(|| missing(s, "gradient for update", v))?;
                        for g in &mut grad {
                            *g /= st.grad_count as f64;
                        }
                        st.grad_count = 0;
                        let latest = st.versions.values().next_back().unwrap().clone();
                        let next = st.sgd.step(&latest, grad);
                        st.versions.insert(v, next);
                    }
                    OpKind::FlushBarrier => {
                        let n = stages[s].barriers;
                        // every stage must have reached (or passed) this barrier
                        let arrived = (0..depth).all(|p| {
                            stages[p].barriers > n
                                || programs[p].ops.get(pcs[p]).map(|o| o.kind) == Some(OpKind::FlushBarrier)
                        });
                        if !arrived {
                            break;
                        }
                        stages[s].barriers += 1;
                    }
                    OpKind::AllReduce | OpKind::Recompute => {}
                }
                pcs[s] += 1;
                progressed = true;
            }
        }
        if pcs.iter().zip(&programs).all(|(pc, p)| *pc == p.ops.len()) {
            break;
        }
        if !progressed {
            return Err(Error::Deadlock("semantics replay made no progress".into()));
        }
    }

    let count = stages[0].versions.len();
    let mut trajectory = Vec::with_capacity(count);
    for v in 0..count as u32 {
        let mut full = vec![DMatrix::zeros(0, 0); layers];
        for st in &stages {
            let w = st.versions.get(&v).ok_or_else(|| missing(0, "version", v))?;
            for (i, layer) in st.range.clone().zip(w) {
                full[i] = layer.clone();
            }
        }
        trajectory.push(full);
    }
    Ok(Execution { trajectory, version_log })
}

fn missing(stage: usize, what: &str, k: u32) -> Error {
    Error::Shape(format!("stage {stage}: no {what} for microbatch {k}"))
}

/// Largest relative Frobenius distance between corresponding versions.
pub fn max_relative_error(a: &[Weights], b: &[Weights]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let diff: f64 = x.iter().zip(y).map(|(p, q)| (p - q).norm_squared()).sum();
            let norm: f64 = y.iter().map(|q| q.norm_squared()).sum();
            (diff / norm.max(f64::MIN_POSITIVE)).sqrt()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct LossComparison {
    /// Loss of batch `t+1` evaluated at `W(t)`, for `t = 0..T`.
    pub vanilla: Vec<f64>,
    pub two_bw: Vec<f64>,
    /// Largest `|vanilla - 2bw|` over the second half of training.
    pub max_tail_gap: f64,
    /// Initial loss, the reference scale for the gap.
    pub scale: f64,
}

impl LossComparison {
    pub fn relative_tail_gap(&self) -> f64 {
        if self.scale == 0.0 {
            self.max_tail_gap
        } else {
            self.max_tail_gap / self.scale
        }
    }

    /// `batch,vanilla,2bw` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,vanilla,2bw\n");
        for (t, (a, b)) in self.vanilla.iter().zip(&self.two_bw).enumerate() {
            out.push_str(&format!("{t},{a:e},{b:e}\n"));
        }
        out
    }
}

pub fn loss_curve_compare(model: &ToyModel, cfg: &TrainerConfig) -> Result<LossComparison> {
    let curve = |traj: &[Weights]| -> Vec<f64> {
        (0..cfg.num_batches)
            .map(|t| model.batch_loss_and_grad(&traj[t], t, cfg.m).0)
            .collect()
    };
    let vanilla = curve(&reference_vanilla(model, cfg)?);
    let two_bw = curve(&reference_2bw(model, cfg)?);
    let tail = cfg.num_batches / 2;
    let max_tail_gap = vanilla[tail..]
        .iter()
        .zip(&two_bw[tail..])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = vanilla.first().copied().unwrap_or(0.0);
    Ok(LossComparison {
        vanilla,
        two_bw,
        max_tail_gap,
        scale,
    })
}

/// Size of the equivalence grid run by [`verify_grid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    Small,
    Full,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub passed: bool,
    pub error: f64,
}

pub const EQUIVALENCE_TOLERANCE: f64 = 1e-10;

/// Runs every policy against its reference loop. `reference_delay_override`
/// replaces the one-batch delay of the 2BW reference (a negative control).
pub fn verify_grid(grid: Grid, reference_delay_override: Option<usize>) -> Result<Vec<CaseResult>> {
    let (depths, multiples, batches): (&[usize], &[usize], usize) = match grid {
        Grid::Small => (&[1, 2, 4], &[1, 2], 20),
        Grid::Full => (&[1, 2, 4, 8], &[1, 2, 3, 4], 40),
    };
    let model = ToyModel::chain(7, 8, 4, 2);
    let mut out = Vec::new();
    for &d in depths {
        for &mult in multiples {
            let m = d * mult;
            for beta in [0.0, 0.9] {
                let cfg = TrainerConfig {
                    learning_rate: 0.05,
                    momentum: beta,
                    m,
                    num_batches: batches,
                };
                let vanilla = reference_vanilla(&model, &cfg)?;
                let delayed = reference_delayed(&model, &cfg, reference_delay_override.unwrap_or(1))?;
                for (policy, reference) in [
                    (PipelinePolicy::GPipe, &vanilla),
                    (PipelinePolicy::PipeDreamFlush, &vanilla),
                    (PipelinePolicy::NoPipelining, &vanilla),
                    (PipelinePolicy::TwoBW, &delayed),
                ] {
                    let exec = pipelined_execute(&model, &cfg, policy, d)?;
                    let error = max_relative_error(&exec.trajectory, reference);
                    out.push(CaseResult {
                        name: format!("{policy} d={d} m={m} beta={beta} T={batches}"),
                        passed: error <= EQUIVALENCE_TOLERANCE,
                        error,
                    });
                }
                let exec = pipelined_execute(&model, &cfg, PipelinePolicy::PipeDream1F1B, d)?;
                let consistent = exec.version_log.iter().all(|(_, _, f, b)| f == b)
                    && exec.version_log.len() == d * m * batches;
                out.push(CaseResult {
                    name: format!("pipedream d={d} m={m} beta={beta} version consistency"),
                    passed: consistent,
                    error: 0.0,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, beta: f64, m: usize, t: usize) -> TrainerConfig {
        TrainerConfig {
            learning_rate: lr,
            momentum: beta,
            m,
            num_batches: t,
        }
    }

    #[test]
    fn zero_learning_rate_is_constant() {
        let model = ToyModel::chain(1, 4, 3, 2);
        for traj in [
            reference_vanilla(&model, &cfg(0.0, 0.0, 2, 5)).unwrap(),
            reference_2bw(&model, &cfg(0.0, 0.5, 2, 5)).unwrap(),
        ] {
            for w in &traj {
                assert_eq!(w, &model.layers);
            }
        }
    }

    #[test]
    fn one_step_least_squares() {
        let (x, y) = (2.0, 3.0);
        let model = ToyModel::fixed_sample(vec![DMatrix::from_element(1, 1, 0.25)], x, y);
        let traj = reference_vanilla(&model, &cfg(1.0 / (x * x), 0.0, 1, 1)).unwrap();
        assert!((traj[1][0][(0, 0)] - y / x).abs() < 1e-15);
    }

    #[test]
    fn delay_inactive_on_first_step() {
        let model = ToyModel::chain(3, 2, 3, 2);
        let c = cfg(0.1, 0.0, 3, 1);
        let a = reference_vanilla(&model, &c).unwrap();
        let b = reference_2bw(&model, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let model = ToyModel::chain(11, 3, 3, 4);
        let (_, grads) = model.loss_and_grad(&model.layers, 5);
        let h = 1e-6;
        for l in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    let mut plus = model.layers.clone();
                    let mut minus = model.layers.clone();
                    plus[l][(i, j)] += h;
                    minus[l][(i, j)] -= h;
                    let fd = (model.loss(&plus, 5) - model.loss(&minus, 5)) / (2.0 * h);
                    let an = grads[l][(i, j)];
                    assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "layer {l} ({i},{j}): {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn degenerate_pipeline_matches_reference_exactly() {
        let model = ToyModel::chain(5, 2, 3, 1);
        let c = cfg(0.05, 0.0, 1, 6);
        let exec = pipelined_execute(&model, &c, PipelinePolicy::TwoBW, 1).unwrap();
        assert_eq!(max_relative_error(&exec.trajectory, &reference_2bw(&model, &c).unwrap()), 0.0);
    }

    #[test]
    fn microbatches_are_replayable() {
        let model = ToyModel::chain(9, 2, 3, 2);
        assert_eq!(model.microbatch(4), model.microbatch(4));
        assert_ne!(model.microbatch(4).0, model.microbatch(5).0);
    }

    #[test]
    fn rejects_indivisible_depth() {
        let model = ToyModel::chain(9, 3, 3, 2);
        assert!(pipelined_execute(&model, &cfg(0.1, 0.0, 2, 2), PipelinePolicy::GPipe, 2).is_err());
    }

    #[test]
    fn invalid_trainer_config() {
        let model = ToyModel::chain(9, 2, 3, 2);
        assert!(reference_vanilla(&model, &cfg(0.1, 1.0, 2, 2)).is_err());
        assert!(reference_vanilla(&model, &cfg(-0.1, 0.0, 2, 2)).is_err());
    }

    #[test]
    fn loss_curve_zero_lr_has_zero_gap() {
        let model = ToyModel::linear_regression(2, 3, 4);
        let cmp = loss_curve_compare(&model, &cfg(0.0, 0.0, 2, 10)).unwrap();
        assert_eq!(cmp.max_tail_gap, 0.0);
        assert!(cmp.to_csv().starts_with("batch,vanilla,2bw\n0,"));
    }

    // Scalar layers in plain f64 loops.
    fn scalar_oracle(model: &ToyModel, c: &TrainerConfig, delay: usize) -> Vec<Vec<f64>> {
        let n = model.layers.len();
        let grad = |w: &[f64], t: usize| {
            let mut g = vec![0.0; n];
            for i in 0..c.m {
                let (x, y) = model.microbatch((t * c.m + i + 1) as u32);
                let b = x.ncols() as f64;
                for j in 0..x.ncols() {
                    let prod: f64 = w.iter().product();
                    let r = prod * x[(0, j)] - y[(0, j)];
                    for (l, gl) in g.iter_mut().enumerate() {
                        let others: f64 = (0..n).filter(|&q| q != l).map(|q| w[q]).product();
                        *gl += r * others * x[(0, j)] / b;
                    }
                }
            }
            g.iter().map(|v| v / c.m as f64).collect::<Vec<_>>()
        };
        let mut hist = vec![model.layers.iter().map(|l| l[(0, 0)]).collect::<Vec<_>>()];
        let mut vel = vec![0.0; n];
        for t in 0..c.num_batches {
            let g = grad(&hist[t.saturating_sub(delay)], t);
            let mut next = hist[t].clone();
            for l in 0..n {
                vel[l] = if t == 0 {
                    (1.0 - c.momentum) * g[l]
                } else {
                    c.momentum * vel[l] + (1.0 - c.momentum) * g[l]
                };
                next[l] -= c.learning_rate * vel[l];
            }
            hist.push(next);
        }
        hist
    }

    #[test]
    fn references_match_scalar_oracle() {
        let model = ToyModel::chain(21, 3, 1, 3);
        for (beta, delay) in [(0.0, 0), (0.0, 1), (0.9, 0), (0.9, 1)] {
            let c = cfg(0.1, beta, 2, 20);
            let ours = reference_delayed(&model, &c, delay).unwrap();
            let oracle = scalar_oracle(&model, &c, delay);
            for (w, o) in ours.iter().zip(&oracle) {
                for l in 0..3 {
                    assert!((w[l][(0, 0)] - o[l]).abs() <= 1e-12 * o[l].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn delayed_and_vanilla_share_fixed_point() {
        let model = ToyModel::quadratic_bowl(6, 3, 8, 1);
        let c = cfg(0.2, 0.0, 1, 2000);
        let a = reference_vanilla(&model, &c).unwrap();
        let b = reference_2bw(&model, &c).unwrap();
        let last = |t: &[Weights]| t.last().unwrap()[0].clone();
        assert!((last(&a) - last(&b)).norm() < 1e-8);
        assert!((last(&a) - &a[a.len() - 2][0]).norm() < 1e-12);
    }

    #[test]
    fn small_grid_is_equivalent() {
        let results = verify_grid(Grid::Small, None).unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| (&r.name, r.error)).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn wrong_delay_is_caught() {
        let results = verify_grid(Grid::Small, Some(2)).unwrap();
        assert!(results.iter().any(|r| !r.passed && r.name.starts_with("2bw")));
    }

    #[test]
    fn pipedream_uses_stashed_versions() {
        let model = ToyModel::chain(4, 4, 2, 1);
        let exec = pipelined_execute(&model, &cfg(0.05, 0.0, 4, 3), PipelinePolicy::PipeDream1F1B, 4).unwrap();
        assert!(exec.version_log.iter().all(|(_, _, f, b)| f == b));
        assert!(exec.version_log.iter().any(|(s, k, f, _)| *s == 0 && *k > 1 && *f + 1 < *k));
    }
}
