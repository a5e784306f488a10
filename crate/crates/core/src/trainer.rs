//! Meta-training.
//!
//! One iteration in the default mode:
//!
//! 1. sample a support batch from large-shot relations and take an inner step
//!    `θ_l = θ - α ⊙ Σ ∇L_S(θ)`;
//! 2. sample a query batch from few-shot relations and move the *original*
//!    parameters with the query gradient at the adapted point,
//!    `θ_f = θ - β Σ ∇L_Q(θ_l)`;
//! 3. correct toward the large-shot relations with the same support batch,
//!    `θ ← θ_f - β' Σ ∇L_S(θ_f)`;
//! 4. update the per-parameter inner rates through the first-order chain rule
//!    `∇_α L_Q = ∇L_Q(θ_l) ⊙ (-Σ ∇L_S(θ))`, so `α ← α + β ∇L_Q(θ_l) ⊙ Σ ∇L_S(θ)`.
//!
//! All meta-gradients are first order.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, RelationId, RelationSplit, Triplet};
use crate::mpnn::{accumulate_loss_and_grad, ModelParams, ModelShape, DEFAULT_MARGIN};
use crate::subgraph::{EnclosingSubgraph, ExtractOptions, SubgraphCache};

pub const DEFAULT_BETA: f64 = 0.001;
pub const DEFAULT_BETA_PRIME: f64 = 0.0001;
pub const DEFAULT_ALPHA: f64 = 0.001;
pub const DEFAULT_GAMMA: f64 = 0.1;

const RESAMPLE_ATTEMPTS: usize = 10;
const CORRUPTION_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Per-parameter learnable inner rates, relation split, large-shot correction.
    #[default]
    MetaSgd,
    /// Fixed scalar inner rate.
    Maml,
    /// Meta-SGD without the large-shot correction step.
    NoLrup,
    /// Meta-SGD with support and query batches drawn from all relations.
    NoRpo,
    /// Plain gradient descent on batches from all relations.
    Plain,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::MetaSgd,
        TrainMode::Maml,
        TrainMode::NoLrup,
        TrainMode::NoRpo,
        TrainMode::Plain,
    ];

    pub fn learns_alpha(self) -> bool {
        matches!(
            self,
            TrainMode::MetaSgd | TrainMode::NoLrup | TrainMode::NoRpo
        )
    }

    pub fn uses_split(self) -> bool {
        matches!(
            self,
            TrainMode::MetaSgd | TrainMode::Maml | TrainMode::NoLrup
        )
    }

    pub fn uses_lrup(self) -> bool {
        matches!(
            self,
            TrainMode::MetaSgd | TrainMode::Maml | TrainMode::NoRpo
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::MetaSgd => "meta-sgd",
            TrainMode::Maml => "maml",
            TrainMode::NoLrup => "no-lrup",
            TrainMode::NoRpo => "no-rpo",
            TrainMode::Plain => "plain",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub dim: usize,
    pub layers: usize,
    pub extract: ExtractOptions,
    pub gamma: f64,
    pub beta: f64,
    pub beta_prime: f64,
    pub alpha_init: f64,
    /// Step size of the α update; `None` uses `beta`.
    pub alpha_lr: Option<f64>,
    pub margin: f64,
    pub epochs: usize,
    pub meta_updates: usize,
    pub inner_steps: usize,
    pub support_relations: usize,
    pub query_relations: usize,
    pub instances_per_relation: usize,
    pub negatives_per_positive: usize,
    /// Adam on the large-shot correction step only.
    pub adam_lrup: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::MetaSgd,
            dim: 32,
            layers: 3,
            extract: ExtractOptions::default(),
            gamma: DEFAULT_GAMMA,
            beta: DEFAULT_BETA,
            beta_prime: DEFAULT_BETA_PRIME,
            alpha_init: DEFAULT_ALPHA,
            alpha_lr: None,
            margin: DEFAULT_MARGIN,
            epochs: 20,
            meta_updates: 100,
            inner_steps: 1,
            support_relations: 8,
            query_relations: 4,
            instances_per_relation: 4,
            negatives_per_positive: 1,
            adam_lrup: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("inner_steps", self.inner_steps),
            ("support_relations", self.support_relations),
            ("query_relations", self.query_relations),
            ("instances_per_relation", self.instances_per_relation),
            ("negatives_per_positive", self.negatives_per_positive),
            ("hops", self.extract.hops as usize),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.extract.max_nodes < 2 {
            return Err(Error::Config("max_nodes must be at least 2".into()));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("beta", self.beta),
            ("beta_prime", self.beta_prime),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number"
                )));
            }
        }
        if let Some(lr) = self.alpha_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(
                    "alpha_lr must be a finite non-negative number".into(),
                ));
            }
        }
        if !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return Err(Error::Config("alpha_init must be positive".into()));
        }
        Ok(())
    }

    pub fn alpha_lr(&self) -> f64 {
        self.alpha_lr.unwrap_or(self.beta)
    }

    pub fn total_iterations(&self) -> usize {
        self.epochs * self.meta_updates
    }

    pub fn model_shape(&self, n_relations: usize) -> ModelShape {
        ModelShape {
            n_relations,
            dim: self.dim,
            hops: self.extract.hops,
            layers: self.layers,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    LargeShot,
    FewShot,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub positive: Triplet,
    pub negatives: Vec<Triplet>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub relation: RelationId,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub side: Side,
    pub tasks: Vec<Task>,
}

impl TaskBatch {
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.tasks.iter().flat_map(|t| t.instances.iter())
    }

    pub fn num_instances(&self) -> usize {
        self.tasks.iter().map(|t| t.instances.len()).sum()
    }
}

/// Positive triplets indexed by relation, plus the split.
pub struct TaskPool<'a> {
    graph: &'a KnowledgeGraph,
    by_relation: Vec<Vec<Triplet>>,
    split: RelationSplit,
}

impl<'a> TaskPool<'a> {
    pub fn new(graph: &'a KnowledgeGraph, triplets: &[Triplet], split: RelationSplit) -> Self {
        let mut by_relation = vec![Vec::new(); graph.n_relations()];
        for t in triplets {
            by_relation[t.relation as usize].push(*t);
        }
        Self {
            graph,
            by_relation,
            split,
        }
    }

    pub fn split(&self) -> &RelationSplit {
        &self.split
    }

    pub fn graph(&self) -> &'a KnowledgeGraph {
        self.graph
    }

    pub fn positives(&self, r: RelationId) -> &[Triplet] {
        &self.by_relation[r as usize]
    }

    /// Relations on `side` that have at least one positive.
    pub fn candidates(&self, side: Side) -> Vec<RelationId> {
        (0..self.by_relation.len() as RelationId)
            .filter(|&r| !self.by_relation[r as usize].is_empty())
            .filter(|&r| match side {
                Side::LargeShot => self.split.is_large_shot(r),
                Side::FewShot => self.split.is_few_shot(r),
                Side::All => true,
            })
            .collect()
    }

    /// Samples `n_rel` relations (without replacement when enough exist),
    /// up to `n_inst` positives per relation and `n_neg` corruptions per
    /// positive that are not facts of the graph.
    pub fn sample_tasks<R: Rng>(
        &self,
        side: Side,
        n_rel: usize,
        n_inst: usize,
        n_neg: usize,
        rng: &mut R,
    ) -> Result<TaskBatch> {
        if n_inst == 0 {
            return Err(Error::InvalidArgument(
                "need at least one instance per relation".into(),
            ));
        }
        let candidates = self.candidates(side);
        if candidates.is_empty() {
            return Err(Error::EmptySplit(match side {
                Side::LargeShot => "large-shot",
                Side::FewShot => "few-shot",
                Side::All => "training",
            }));
        }
        let relations: Vec<RelationId> = if n_rel <= candidates.len() {
            candidates.choose_multiple(rng, n_rel).copied().collect()
        } else {
            (0..n_rel)
                .map(|_| *candidates.choose(rng).unwrap())
                .collect()
        };
        let tasks = relations
            .into_iter()
            .map(|r| {
                let instances = self.by_relation[r as usize]
                    .choose_multiple(rng, n_inst)
                    .map(|&positive| Instance {
                        positive,
                        negatives: (0..n_neg)
                            .filter_map(|_| self.corrupt(&positive, rng))
                            .collect(),
                    })
                    .collect();
                Task {
                    relation: r,
                    instances,
                }
            })
            .collect();
        Ok(TaskBatch { side, tasks })
    }

    fn corrupt<R: Rng>(&self, t: &Triplet, rng: &mut R) -> Option<Triplet> {
        let n = self.graph.n_entities() as u32;
        for _ in 0..CORRUPTION_ATTEMPTS {
            let e = rng.gen_range(0..n);
            let c = if rng.gen_bool(0.5) {
                Triplet::new(e, t.relation, t.tail)
            } else {
                Triplet::new(t.head, t.relation, e)
            };
            if c != *t && !self.graph.contains(&c) {
                return Some(c);
            }
        }
        None
    }
}

/// Summed margin loss and gradient over a batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub used: usize,
    pub skipped: usize,
}

/// Instances whose positive has no subgraph are skipped; negatives without
/// a subgraph cannot violate the margin and are dropped. Per-instance
/// gradients are reduced in instance order.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &TaskBatch,
    cache: &SubgraphCache<'_>,
    margin: f64,
) -> Result<BatchGradient> {
    let instances: Vec<&Instance> = batch.instances().collect();
    let results: Vec<Option<(f64, Option<Vec<f64>>)>> = instances
        .par_iter()
        .map(|inst| -> Result<_> {
            let pos = cache.get(&inst.positive)?;
            let Some(pos) = pos.as_ref() else {
                return Ok(None);
            };
            let negs: Vec<EnclosingSubgraph> = inst
                .negatives
                .iter()
                .map(|n| cache.get(n))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .filter_map(|sg| sg.as_ref().clone())
                .collect();
            if negs.is_empty() {
                return Ok(Some((0.0, None)));
            }
            let mut grad = vec![0.0; params.len()];
            let loss = accumulate_loss_and_grad(params, pos, &negs, margin, &mut grad)?;
            Ok(Some((loss, Some(grad))))
        })
        .collect::<Result<_>>()?;

    let mut out = BatchGradient {
        loss: 0.0,
        grad: vec![0.0; params.len()],
        used: 0,
        skipped: 0,
    };
    for r in results {
        match r {
            None => out.skipped += 1,
            Some((loss, grad)) => {
                out.used += 1;
                out.loss += loss;
                if let Some(g) = grad {
                    for (a, b) in out.grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
    }
    if out.used == 0 {
        return Err(Error::DegenerateBatch(instances.len()));
    }
    Ok(out)
}

/// Inner-loop learning rates.
#[derive(Clone, Debug, PartialEq)]
pub enum LearningRates {
    Scalar(f64),
    PerParameter(Vec<f64>),
}

impl LearningRates {
    pub fn at(&self, i: usize) -> f64 {
        match self {
            LearningRates::Scalar(a) => *a,
            LearningRates::PerParameter(v) => v[i],
        }
    }
}

/// `θ - α ⊙ g`
pub fn inner_step(theta: &[f64], alpha: &LearningRates, grad: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .zip(grad)
        .enumerate()
        .map(|(i, (t, g))| t - alpha.at(i) * g)
        .collect()
}

/// `base - lr * g`. A zero rate returns `base` unchanged.
pub fn sgd_step(base: &[f64], grad: &[f64], lr: f64) -> Vec<f64> {
    if lr == 0.0 {
        return base.to_vec();
    }
    base.iter().zip(grad).map(|(b, g)| b - lr * g).collect()
}

/// `α - β (g_query ⊙ (-g_support))`, unclamped.
pub fn alpha_step(
    alpha: &[f64],
    query_grad: &[f64],
    support_grad_sum: &[f64],
    beta: f64,
) -> Vec<f64> {
    alpha
        .iter()
        .zip(query_grad.iter().zip(support_grad_sum))
        .map(|(a, (q, s))| a - beta * (q * -s))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, base: &[f64], grad: &[f64], lr: f64) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t as i32);
        let c2 = 1.0 - Self::B2.powi(self.t as i32);
        let mut out = base.to_vec();
        for i in 0..base.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            if lr != 0.0 {
                out[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
            }
        }
        out
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct MetaState {
    pub params: ModelParams,
    pub alpha: LearningRates,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub adam: Option<AdamState>,
}

impl MetaState {
    pub fn new(config: &TrainConfig, shape: ModelShape) -> Self {
        let params = ModelParams::init(shape, config.seed);
        let alpha = if config.mode.learns_alpha() {
            LearningRates::PerParameter(vec![config.alpha_init; params.len()])
        } else {
            LearningRates::Scalar(config.alpha_init)
        };
        let adam = config.adam_lrup.then(|| AdamState::new(params.len()));
        Self {
            params,
            alpha,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
            adam,
        }
    }
}

pub struct InnerUpdate {
    pub adapted: ModelParams,
    pub support_grad_sum: Vec<f64>,
    pub support_loss: f64,
    pub skipped: usize,
}

/// `θ_l = θ - α ⊙ Σ ∇L_S(θ)`, repeated `inner_steps` times from the adapted
/// point. The returned gradient sum covers every step.
pub fn inner_update(
    state: &MetaState,
    support: &TaskBatch,
    cache: &SubgraphCache<'_>,
    config: &TrainConfig,
) -> Result<InnerUpdate> {
    let mut adapted = state.params.clone();
    let mut grad_sum = vec![0.0; adapted.len()];
    let mut first_loss = None;
    let mut skipped = 0;
    for _ in 0..config.inner_steps.max(1) {
        let bg = batch_gradient(&adapted, support, cache, config.margin)?;
        first_loss.get_or_insert(bg.loss);
        skipped = bg.skipped;
        let next = inner_step(adapted.values(), &state.alpha, &bg.grad);
        adapted = ModelParams::from_values(*adapted.shape(), next)?;
        for (a, g) in grad_sum.iter_mut().zip(&bg.grad) {
            *a += g;
        }
    }
    Ok(InnerUpdate {
        adapted,
        support_grad_sum: grad_sum,
        support_loss: first_loss.unwrap_or(0.0),
        skipped,
    })
}

/// `θ_f = θ - β Σ ∇L_Q(θ_l)`. Returns `θ_f` and the query gradient at `θ_l`.
pub fn fewshot_meta_update(
    state: &MetaState,
    adapted: &ModelParams,
    query: &TaskBatch,
    cache: &SubgraphCache<'_>,
    config: &TrainConfig,
) -> Result<(ModelParams, BatchGradient)> {
    let bg = batch_gradient(adapted, query, cache, config.margin)?;
    let next = sgd_step(state.params.values(), &bg.grad, config.beta);
    Ok((ModelParams::from_values(*state.params.shape(), next)?, bg))
}

/// `θ ← θ_f - β' Σ ∇L_S(θ_f)`, optionally through Adam.
pub fn large_shot_update(
    fewshot: &ModelParams,
    support: &TaskBatch,
    cache: &SubgraphCache<'_>,
    config: &TrainConfig,
    adam: Option<&mut AdamState>,
) -> Result<(ModelParams, BatchGradient)> {
    let bg = batch_gradient(fewshot, support, cache, config.margin)?;
    let next = match adam {
        Some(adam) => adam.step(fewshot.values(), &bg.grad, config.beta_prime),
        None => sgd_step(fewshot.values(), &bg.grad, config.beta_prime),
    };
    Ok((ModelParams::from_values(*fewshot.shape(), next)?, bg))
}

/// First-order update of the per-parameter inner rates.
pub fn alpha_update(
    state: &MetaState,
    query_grad: &[f64],
    support_grad_sum: &[f64],
    beta: f64,
) -> Result<LearningRates> {
    match &state.alpha {
        LearningRates::PerParameter(alpha) => Ok(LearningRates::PerParameter(alpha_step(
            alpha,
            query_grad,
            support_grad_sum,
            beta,
        ))),
        LearningRates::Scalar(_) => Err(Error::Config(
            "the inner learning rate is fixed in this mode".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub iteration: usize,
    pub support_loss: f64,
    pub query_loss: Option<f64>,
    pub lrup_loss: Option<f64>,
    pub skipped_instances: usize,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str =
        "iteration,support_loss,query_loss,lrup_loss,skipped_instances";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.iteration,
            self.support_loss,
            opt(self.query_loss),
            opt(self.lrup_loss),
            self.skipped_instances
        )
    }
}

pub struct Trainer<'a> {
    config: TrainConfig,
    pool: TaskPool<'a>,
    cache: SubgraphCache<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        graph: &'a KnowledgeGraph,
        triplets: &[Triplet],
        split: RelationSplit,
    ) -> Result<Self> {
        config.validate()?;
        let pool = TaskPool::new(graph, triplets, split);
        if config.mode.uses_split() {
            if pool.candidates(Side::LargeShot).is_empty() {
                return Err(Error::EmptySplit("large-shot"));
            }
            if pool.candidates(Side::FewShot).is_empty() {
                return Err(Error::EmptySplit("few-shot"));
            }
        } else if pool.candidates(Side::All).is_empty() {
            return Err(Error::EmptySplit("training"));
        }
        let cache = SubgraphCache::new(graph, config.extract, 200_000);
        Ok(Self {
            config,
            pool,
            cache,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn pool(&self) -> &TaskPool<'a> {
        &self.pool
    }

    pub fn cache(&self) -> &SubgraphCache<'a> {
        &self.cache
    }

    pub fn initial_state(&self) -> MetaState {
        MetaState::new(
            &self.config,
            self.config.model_shape(self.pool.graph().n_relations()),
        )
    }

    fn sample_side(&self, side: Side, n_rel: usize, rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
        let c = &self.config;
        self.pool.sample_tasks(
            side,
            n_rel,
            c.instances_per_relation,
            c.negatives_per_positive,
            rng,
        )
    }

    /// Runs `body` on freshly sampled batches until one has a usable instance.
    fn with_batch<T>(
        &self,
        side: Side,
        n_rel: usize,
        rng: &mut ChaCha8Rng,
        mut body: impl FnMut(&TaskBatch) -> Result<T>,
    ) -> Result<(TaskBatch, T)> {
        let mut last_err = None;
        for _ in 0..RESAMPLE_ATTEMPTS {
            let batch = self.sample_side(side, n_rel, rng)?;
            match body(&batch) {
                Ok(v) => return Ok((batch, v)),
                Err(e @ Error::DegenerateBatch(_)) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last_err.unwrap())
    }

    /// One meta-iteration.
    pub fn step(&self, state: &mut MetaState) -> Result<TrainLogRow> {
        let c = &self.config;
        let mut rng = state.rng.clone();
        let row = if c.mode == TrainMode::Plain {
            let (_, bg) = self.with_batch(Side::All, c.support_relations, &mut rng, |b| {
                batch_gradient(&state.params, b, &self.cache, c.margin)
            })?;
            let next = sgd_step(state.params.values(), &bg.grad, c.beta);
            state.params = ModelParams::from_values(*state.params.shape(), next)?;
            TrainLogRow {
                iteration: state.iteration,
                support_loss: bg.loss,
                query_loss: None,
                lrup_loss: None,
                skipped_instances: bg.skipped,
            }
        } else {
            let (support_side, query_side) = if c.mode.uses_split() {
                (Side::LargeShot, Side::FewShot)
            } else {
                (Side::All, Side::All)
            };
            let (support, inner) =
                self.with_batch(support_side, c.support_relations, &mut rng, |b| {
                    inner_update(state, b, &self.cache, c)
                })?;
            let (_, (fewshot, query_bg)) =
                self.with_batch(query_side, c.query_relations, &mut rng, |b| {
                    fewshot_meta_update(state, &inner.adapted, b, &self.cache, c)
                })?;
            let mut skipped = inner.skipped + query_bg.skipped;
            let (next, lrup_loss) = if c.mode.uses_lrup() {
                let (next, bg) =
                    large_shot_update(&fewshot, &support, &self.cache, c, state.adam.as_mut())?;
                skipped += bg.skipped;
                (next, Some(bg.loss))
            } else {
                (fewshot, None)
            };
            if c.mode.learns_alpha() {
                state.alpha =
                    alpha_update(state, &query_bg.grad, &inner.support_grad_sum, c.alpha_lr())?;
            }
            state.params = next;
            TrainLogRow {
                iteration: state.iteration,
                support_loss: inner.support_loss,
                query_loss: Some(query_bg.loss),
                lrup_loss,
                skipped_instances: skipped,
            }
        };
        state.rng = rng;
        state.iteration += 1;
        Ok(row)
    }

    /// Steps until `state.iteration == until`, calling `on_epoch` whenever an
    /// epoch completes.
    pub fn run(
        &self,
        state: &mut MetaState,
        until: usize,
        mut on_epoch: impl FnMut(&MetaState) -> Result<()>,
    ) -> Result<Vec<TrainLogRow>> {
        let mut log = Vec::new();
        while state.iteration < until {
            let row = self.step(state)?;
            log::debug!(
                "iter {} support {:.4} query {:?} lrup {:?}",
                row.iteration,
                row.support_loss,
                row.query_loss,
                row.lrup_loss
            );
            log.push(row);
            if self.config.meta_updates > 0 && state.iteration % self.config.meta_updates == 0 {
                on_epoch(state)?;
            }
        }
        Ok(log)
    }
}

/// Trains from scratch for `epochs * meta_updates` iterations.
pub fn train(
    config: &TrainConfig,
    graph: &KnowledgeGraph,
    triplets: &[Triplet],
    split: RelationSplit,
) -> Result<(MetaState, Vec<TrainLogRow>)> {
    let trainer = Trainer::new(config.clone(), graph, triplets, split)?;
    let mut state = trainer.initial_state();
    let log = trainer.run(&mut state, config.total_iterations(), |_| Ok(()))?;
    Ok((state, log))
}
