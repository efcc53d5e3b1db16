//! Dynamic assembly: batch-wise cascade construction with weighted
//! re-sampling and layer-level component selection.
//!
//! Each round samples `v` weighted batches (the previous round's assembled
//! model keeps slot 1 after round 0), builds one cascade per batch, probes
//! each new cascade on a small held-out subset to reweight samples, and then
//! picks the best `A` random and `B` completely-random forests of every
//! layer on a validation subset. The result always has the shape of a single
//! cascade. Only one batch, probe or validation subset is resident at a
//! time.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::cascade::{fit_cascade, CascadeLayer, CascadeParams, DeepForestModel};
use crate::data::{Augmented, Features, Matrix};
use crate::error::{DafError, Result};
use crate::metrics;
use crate::residency::{Peak, Residency};
use crate::seed;
use crate::trees::{Forest, ForestKind};

/// Positive per-sample weights driving batch sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights(Vec<f64>);

impl SampleWeights {
    pub fn uniform(n: usize) -> Self {
        SampleWeights(vec![1.0; n])
    }

    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(bad) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(DafError::Config(format!("sample weight {bad} is not positive")));
        }
        Ok(SampleWeights(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fenwick tree over weights supporting removal and prefix search.
struct SumTree {
    tree: Vec<f64>,
    values: Vec<f64>,
}

impl SumTree {
    fn new(values: &[f64]) -> Self {
        let n = values.len();
        let mut tree = vec![0.0; n + 1];
        for (i, &v) in values.iter().enumerate() {
            tree[i + 1] += v;
            let parent = (i + 1) + ((i + 1) & (i + 1).wrapping_neg());
            if parent <= n {
                tree[parent] += tree[i + 1];
            }
        }
        SumTree {
            tree,
            values: values.to_vec(),
        }
    }

    fn total(&self) -> f64 {
        let mut i = self.values.len();
        let mut s = 0.0;
        while i > 0 {
            s += self.tree[i];
            i &= i - 1;
        }
        s
    }

    fn remove(&mut self, idx: usize) {
        let delta = -self.values[idx];
        self.values[idx] = 0.0;
        let mut i = idx + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    /// Smallest index whose inclusive prefix sum exceeds `target`.
    fn find(&self, mut target: f64) -> usize {
        let n = self.values.len();
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= target {
                target -= self.tree[next];
                pos = next;
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }
}

/// `k` distinct indices drawn one at a time with probability proportional
/// to weight among those not yet drawn. Returned in ascending order.
pub fn weighted_sample(weights: &SampleWeights, k: usize, rng_seed: u64) -> Result<Vec<usize>> {
    let n = weights.len();
    if k > n {
        return Err(DafError::InvalidCount {
            requested: k,
            available: n,
        });
    }
    let mut rng = seed::rng(rng_seed);
    let mut tree = SumTree::new(weights.as_slice());
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let target = rng.random::<f64>() * tree.total();
        let mut i = tree.find(target);
        if tree.values[i] <= 0.0 {
            // rounding landed on a removed entry; take the next live one
            i = (0..n)
                .map(|d| (i + d) % n)
                .find(|&j| tree.values[j] > 0.0)
                .expect("k <= n leaves a live entry");
        }
        tree.remove(i);
        out.push(i);
    }
    out.sort_unstable();
    Ok(out)
}

/// Misclassified subset members are multiplied by `theta`, correct ones
/// divided by it; all other weights are unchanged.
pub fn update_weights(
    weights: &SampleWeights,
    predicted: &[u8],
    truth: &[u8],
    subset: &[usize],
    theta: f64,
) -> Result<SampleWeights> {
    if predicted.len() != subset.len() || truth.len() != subset.len() {
        return Err(DafError::LengthMismatch(predicted.len(), truth.len()));
    }
    if !(theta >= 1.0 && theta.is_finite()) {
        return Err(DafError::Config(format!("theta must be >= 1, got {theta}")));
    }
    let mut w = weights.0.clone();
    for ((&i, &p), &t) in subset.iter().zip(predicted).zip(truth) {
        let slot = w.get_mut(i).ok_or(DafError::IndexOutOfRange {
            index: i,
            len: weights.len(),
        })?;
        if p == t {
            *slot /= theta;
        } else {
            *slot *= theta;
        }
        // repeated division can underflow; positivity is a hard contract
        if *slot <= 0.0 {
            *slot = f64::MIN_POSITIVE;
        }
    }
    Ok(SampleWeights(w))
}

/// Which upstream layers feed candidate forests during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpstreamMode {
    /// The already-assembled prefix produces the augmentation vectors.
    #[default]
    Assembled,
    /// Each candidate is evaluated through its own earlier layers.
    Own,
}

impl UpstreamMode {
    pub fn name(&self) -> &'static str {
        match self {
            UpstreamMode::Assembled => "assembled",
            UpstreamMode::Own => "own",
        }
    }
}

impl FromStr for UpstreamMode {
    type Err = DafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assembled" => Ok(UpstreamMode::Assembled),
            "own" => Ok(UpstreamMode::Own),
            _ => Err(DafError::Config(format!(
                "unknown selection upstream '{s}' (known: assembled, own)"
            ))),
        }
    }
}

/// One forest of the selection pool with its validation accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub candidate: usize,
    pub forest: usize,
    pub kind: ForestKind,
    pub accuracy: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSelection {
    pub layer: CascadeLayer,
    pub pool: Vec<PoolEntry>,
}

fn forest_accuracy(forest: &Forest, view: &dyn Features, labels: &[u8]) -> f64 {
    let correct = (0..labels.len())
        .filter(|&r| u8::from(forest.proba_row(view, r)[1] >= metrics::DEFAULT_THRESHOLD) == labels[r])
        .count();
    correct as f64 / labels.len() as f64
}

fn check_pool(candidates: &[&DeepForestModel], layer: usize) -> Result<()> {
    let first = candidates
        .first()
        .ok_or_else(|| DafError::Config("no candidates to assemble".into()))?;
    for c in candidates {
        if c.base_dim() != first.base_dim() || c.kinds() != first.kinds() {
            return Err(DafError::Config(
                "candidates differ in base dimension or layer shape".into(),
            ));
        }
        if c.layers().len() <= layer {
            return Err(DafError::Config(format!(
                "candidate has {} layers, layer {layer} requested",
                c.layers().len()
            )));
        }
    }
    Ok(())
}

/// Picks the top-`A` random and top-`B` completely-random forests of layer
/// `layer` across all candidates by accuracy on the validation rows.
///
/// `upstream` is the augmentation the assembled prefix produces for the
/// validation rows (ignored for layer 0 and in [`UpstreamMode::Own`]).
/// Ties go to the lower (candidate, forest) index; selected forests keep
/// pool order within their kind.
pub fn select_components(
    candidates: &[&DeepForestModel],
    layer: usize,
    val_x: &Matrix,
    val_y: &[u8],
    upstream: Option<&Matrix>,
    mode: UpstreamMode,
) -> Result<LayerSelection> {
    if val_y.is_empty() || val_x.rows() != val_y.len() {
        return Err(DafError::EmptyValidation);
    }
    check_pool(candidates, layer)?;
    let kinds = candidates[0].kinds();
    let mut pool = Vec::new();
    for (c, model) in candidates.iter().enumerate() {
        let own;
        let aug = match (layer, mode) {
            (0, _) => None,
            (_, UpstreamMode::Assembled) => upstream,
            (_, UpstreamMode::Own) => {
                own = model.augmentation_for(layer, val_x)?;
                own.as_ref()
            }
        };
        let view = Augmented::new(val_x, aug);
        for (j, forest) in model.layers()[layer].forests().iter().enumerate() {
            if view.dim() != forest.feature_dim() {
                return Err(DafError::DimensionMismatch {
                    expected: forest.feature_dim(),
                    found: view.dim(),
                });
            }
            pool.push(PoolEntry {
                candidate: c,
                forest: j,
                kind: forest.kind(),
                accuracy: forest_accuracy(forest, &view, val_y),
                selected: false,
            });
        }
    }
    let mut forests = Vec::with_capacity(kinds.len());
    for kind in [ForestKind::Random, ForestKind::CompletelyRandom] {
        let quota = kinds.iter().filter(|&&k| k == kind).count();
        let mut ranked: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].kind == kind).collect();
        ranked.sort_by(|&a, &b| {
            pool[b]
                .accuracy
                .total_cmp(&pool[a].accuracy)
                .then((pool[a].candidate, pool[a].forest).cmp(&(pool[b].candidate, pool[b].forest)))
        });
        let mut chosen: Vec<usize> = ranked.into_iter().take(quota).collect();
        chosen.sort_unstable();
        for i in chosen {
            pool[i].selected = true;
            let e = &pool[i];
            let mut f = candidates[e.candidate].layers()[layer].forests()[e.forest].clone();
            f.set_val_accuracy(Some(e.accuracy));
            forests.push(f);
        }
    }
    Ok(LayerSelection {
        layer: CascadeLayer::new(forests),
        pool,
    })
}

/// Builds one cascade layer by layer from the candidates' components, each
/// layer's selection conditioned on the prefix assembled so far.
pub fn assemble(
    candidates: &[&DeepForestModel],
    val_x: &Matrix,
    val_y: &[u8],
    mode: UpstreamMode,
) -> Result<(DeepForestModel, Vec<LayerSelection>)> {
    check_pool(candidates, 0)?;
    let depth = candidates.iter().map(|c| c.layers().len()).min().unwrap_or(0);
    let mut selections: Vec<LayerSelection> = Vec::with_capacity(depth);
    let mut aug: Option<Matrix> = None;
    for l in 0..depth {
        let sel = select_components(candidates, l, val_x, val_y, aug.as_ref(), mode)?;
        if l + 1 < depth {
            let view = Augmented::new(val_x, aug.as_ref());
            aug = Some(sel.layer.outputs(&view));
        }
        selections.push(sel);
    }
    let layers = selections.iter().map(|s| s.layer.clone()).collect();
    let model = DeepForestModel::from_layers(
        layers,
        candidates[0].base_dim(),
        candidates[0].snapshot().to_string(),
    )?;
    Ok((model, selections))
}

/// Hyperparameters of the assembly loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Batch size as a fraction of the training set.
    pub sample_ratio: f64,
    /// Models per round, counting the carried-over assembled model.
    pub candidates: usize,
    pub cascade: CascadeParams,
    /// Rounds run while the round index is `<= max_rounds`.
    pub max_rounds: usize,
    pub theta: f64,
    pub epsilon: f64,
    pub val_fraction: f64,
    /// Probe subset size; `None` is `min(1000, 2% of the training set)`.
    pub ws_cap: Option<usize>,
    pub upstream: UpstreamMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sample_ratio: 0.1,
            candidates: 3,
            cascade: CascadeParams::default(),
            max_rounds: 10,
            theta: 1.5,
            epsilon: 0.005,
            val_fraction: 0.05,
            ws_cap: None,
            upstream: UpstreamMode::Assembled,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch covers the whole set with a single candidate: no validation or
    /// probe rows exist.
    pub fn is_full_batch(&self) -> bool {
        self.sample_ratio >= 1.0 && self.candidates == 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DafError::Config(m));
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            return bad(format!("sample_ratio must be in (0,1], got {}", self.sample_ratio));
        }
        if self.candidates == 0 {
            return bad("candidates must be at least 1".into());
        }
        if !(self.theta > 1.0 && self.theta.is_finite()) {
            return bad(format!("theta must be > 1, got {}", self.theta));
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must be in (0,1), got {}", self.val_fraction));
        }
        if self.ws_cap == Some(0) {
            return bad("ws_cap must be positive".into());
        }
        if !self.is_full_batch()
            && self.candidates as f64 * self.sample_ratio + self.val_fraction > 1.0 + 1e-12
        {
            return bad(format!(
                "candidates * sample_ratio + val_fraction = {} exceeds 1",
                self.candidates as f64 * self.sample_ratio + self.val_fraction
            ));
        }
        self.cascade.shape.validate()?;
        self.cascade.forest.validate()?;
        if self.cascade.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        Ok(())
    }

    pub fn batch_size(&self, n: usize) -> usize {
        ((self.sample_ratio * n as f64).round() as usize).clamp(1, n.max(1))
    }

    pub fn val_size(&self, n: usize) -> usize {
        ((self.val_fraction * n as f64).round() as usize).max(1)
    }

    pub fn ws_size(&self, n: usize) -> usize {
        self.ws_cap
            .unwrap_or_else(|| 1000.min((0.02 * n as f64).round() as usize))
            .max(1)
    }
}

/// Source of labeled feature rows loaded on demand.
pub trait RowSource: Sync {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn labels(&self) -> &[u8];
    /// Loads the requested rows, in the given order.
    fn load(&self, indices: &[usize]) -> Result<Matrix>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rows already in memory.
#[derive(Debug, Clone)]
pub struct InMemorySource {
    x: Matrix,
    y: Vec<u8>,
}

impl InMemorySource {
    pub fn new(x: Matrix, y: Vec<u8>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(DafError::DimensionMismatch {
                expected: x.rows(),
                found: y.len(),
            });
        }
        Ok(InMemorySource { x, y })
    }
}

impl RowSource for InMemorySource {
    fn len(&self) -> usize {
        self.y.len()
    }

    fn dim(&self) -> usize {
        self.x.cols()
    }

    fn labels(&self) -> &[u8] {
        &self.y
    }

    fn load(&self, indices: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.y.len()) {
            return Err(DafError::IndexOutOfRange {
                index: bad,
                len: self.y.len(),
            });
        }
        Ok(self.x.select(indices))
    }
}

/// A fixed subset of another source, re-indexed from zero.
pub struct SubsetSource<'a> {
    inner: &'a dyn RowSource,
    indices: Vec<usize>,
    labels: Vec<u8>,
}

impl<'a> SubsetSource<'a> {
    pub fn new(inner: &'a dyn RowSource, indices: Vec<usize>) -> Result<Self> {
        let all = inner.labels();
        let labels = indices
            .iter()
            .map(|&i| {
                all.get(i).copied().ok_or(DafError::IndexOutOfRange {
                    index: i,
                    len: all.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SubsetSource {
            inner,
            indices,
            labels,
        })
    }
}

impl RowSource for SubsetSource<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn labels(&self) -> &[u8] {
        &self.labels
    }

    fn load(&self, indices: &[usize]) -> Result<Matrix> {
        let mapped = indices
            .iter()
            .map(|&i| {
                self.indices.get(i).copied().ok_or(DafError::IndexOutOfRange {
                    index: i,
                    len: self.indices.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.inner.load(&mapped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxRounds,
    NoImprovement,
    /// Single-candidate configuration: later rounds cannot add models.
    NoNewCandidates,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxRounds => "max-rounds",
            StopReason::NoImprovement => "no-improvement",
            StopReason::NoNewCandidates => "no-new-candidates",
        })
    }
}

/// Index sets drawn in one round, recorded when auditing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundSets {
    pub batches: Vec<Vec<usize>>,
    pub probes: Vec<Vec<usize>>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// Validation accuracy of each candidate cascade.
    pub candidate_accuracy: Vec<f64>,
    pub assembled_accuracy: Option<f64>,
    pub previous_accuracy: Option<f64>,
    pub stop: Option<StopReason>,
    pub sets: Option<RoundSets>,
    pub weights: Option<SampleWeights>,
}

impl fmt::Display for RoundLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let acc = |a: Option<f64>| a.map_or("-".to_string(), |v| format!("{v:.4}"));
        let cands: Vec<String> = self.candidate_accuracy.iter().map(|a| format!("{a:.4}")).collect();
        write!(
            f,
            "round {} candidates [{}] assembled {} previous {} stop {}",
            self.round,
            cands.join(", "),
            acc(self.assembled_accuracy),
            acc(self.previous_accuracy),
            self.stop.map_or("-".to_string(), |s| s.to_string())
        )
    }
}

/// Instrumentation for [`run_daf`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub residency: Residency,
    /// Record batch, probe and validation index sets plus weights per round.
    pub record_sets: bool,
    /// Keep the cascades built in round 0.
    pub keep_initial_candidates: bool,
    pub on_round: Option<Box<dyn FnMut(&RoundLog) + 'a>>,
}

impl TrainHooks<'_> {
    pub fn peak_residency(&self) -> Peak {
        self.residency.peak()
    }
}

/// Highest number of simultaneously loaded feature rows seen by the hooks.
pub fn peak_residency(hooks: &TrainHooks<'_>) -> Peak {
    hooks.peak_residency()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DeepForestModel,
    pub val_accuracy: Option<f64>,
    pub stop: StopReason,
    pub rounds: Vec<RoundLog>,
    pub initial_candidates: Vec<DeepForestModel>,
}

fn complement(n: usize, exclude: &[&[usize]]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for set in exclude {
        for &i in *set {
            mask[i] = false;
        }
    }
    (0..n).filter(|&i| mask[i]).collect()
}

fn uniform_subset(pool: &[usize], k: usize, rng_seed: u64) -> Vec<usize> {
    let k = k.min(pool.len());
    let mut out: Vec<usize> = index::sample(&mut seed::rng(rng_seed), pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    out.sort_unstable();
    out
}

fn scores_accuracy(scores: &[f64], labels: &[u8]) -> Result<f64> {
    metrics::accuracy(scores, labels, metrics::DEFAULT_THRESHOLD)
}

const TAG_BATCH: u64 = 1;
const TAG_FIT: u64 = 2;
const TAG_PROBE: u64 = 3;
const TAG_VAL: u64 = 4;

/// Runs the dynamic assembly loop and returns the best assembled model.
pub fn run_daf(
    source: &dyn RowSource,
    cfg: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = source.len();
    let labels = source.labels();
    if n == 0 {
        return Err(DafError::EmptyData);
    }
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(DafError::SingleClass);
    }
    let k = cfg.batch_size(n);
    if k < cfg.cascade.folds {
        return Err(DafError::Config(format!(
            "batch of {k} rows is smaller than {} folds",
            cfg.cascade.folds
        )));
    }
    let (val_n, ws_n) = (cfg.val_size(n), cfg.ws_size(n));
    let gather = |idx: &[usize]| -> Vec<u8> { idx.iter().map(|&i| labels[i]).collect() };

    let mut weights = SampleWeights::uniform(n);
    let mut current: Option<(DeepForestModel, Option<f64>)> = None;
    let mut rounds = Vec::new();
    let mut initial = Vec::new();
    let mut round = 0usize;
    let stop = loop {
        let mut candidates: Vec<DeepForestModel> = Vec::with_capacity(cfg.candidates);
        if let Some((prev, _)) = &current {
            candidates.push(prev.clone());
        }
        let mut sets = RoundSets::default();
        let first_new = candidates.len();
        if first_new >= cfg.candidates {
            break StopReason::NoNewCandidates;
        }
        for slot in first_new..cfg.candidates {
            let path = [round as u64, slot as u64];
            let batch = weighted_sample(&weights, k, seed::derive(cfg.seed, &[TAG_BATCH, path[0], path[1]]))?;
            let model = {
                let rows = hooks.residency.hold(source.load(&batch)?);
                fit_cascade(
                    &rows,
                    &gather(&batch),
                    &cfg.cascade,
                    seed::derive(cfg.seed, &[TAG_FIT, path[0], path[1]]),
                )?
            };
            let pool = complement(n, &[&batch]);
            let probe = uniform_subset(&pool, ws_n, seed::derive(cfg.seed, &[TAG_PROBE, path[0], path[1]]));
            if !probe.is_empty() {
                let rows = hooks.residency.hold(source.load(&probe)?);
                let predicted: Vec<u8> = model
                    .predict_scores(&rows)?
                    .iter()
                    .map(|&s| u8::from(s >= metrics::DEFAULT_THRESHOLD))
                    .collect();
                weights = update_weights(&weights, &predicted, &gather(&probe), &probe, cfg.theta)?;
            }
            if round == 0 && hooks.keep_initial_candidates {
                initial.push(model.clone());
            }
            candidates.push(model);
            sets.batches.push(batch);
            sets.probes.push(probe);
        }

        let used: Vec<&[usize]> = sets.batches.iter().map(|b| b.as_slice()).collect();
        let pool = complement(n, &used);
        let validation = uniform_subset(&pool, val_n, seed::derive(cfg.seed, &[TAG_VAL, round as u64]));
        let refs: Vec<&DeepForestModel> = candidates.iter().collect();
        let (assembled, acc, prev_acc, cand_acc) = if validation.is_empty() {
            if !cfg.is_full_batch() {
                return Err(DafError::EmptyValidation);
            }
            (candidates[0].clone(), None, None, Vec::new())
        } else {
            let rows = hooks.residency.hold(source.load(&validation)?);
            let val_y = gather(&validation);
            let (assembled, _) = assemble(&refs, &rows, &val_y, cfg.upstream)?;
            let cand_acc = candidates
                .iter()
                .map(|c| scores_accuracy(&c.predict_scores(&rows)?, &val_y))
                .collect::<Result<Vec<_>>>()?;
            let acc = scores_accuracy(&assembled.predict_scores(&rows)?, &val_y)?;
            let prev_acc = if current.is_some() { Some(cand_acc[0]) } else { None };
            (assembled, Some(acc), prev_acc, cand_acc)
        };
        sets.validation = validation;

        let mut stop = None;
        match (&current, acc, prev_acc) {
            (Some(_), Some(a), Some(p)) => {
                if a >= p {
                    current = Some((assembled, Some(a)));
                }
                if a - p < cfg.epsilon {
                    stop = Some(StopReason::NoImprovement);
                }
            }
            _ => current = Some((assembled, acc)),
        }
        if stop.is_none() && round + 1 > cfg.max_rounds {
            stop = Some(StopReason::MaxRounds);
        }
        let log = RoundLog {
            round,
            candidate_accuracy: cand_acc,
            assembled_accuracy: acc,
            previous_accuracy: prev_acc,
            stop,
            sets: hooks.record_sets.then_some(sets),
            weights: hooks.record_sets.then(|| weights.clone()),
        };
        if let Some(cb) = hooks.on_round.as_mut() {
            cb(&log);
        }
        rounds.push(log);
        if let Some(s) = stop {
            break s;
        }
        round += 1;
    };
    let (model, val_accuracy) = current.expect("round 0 always assembles");
    Ok(TrainOutcome {
        model,
        val_accuracy,
        stop,
        rounds,
        initial_candidates: initial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::CascadeShape;
    use crate::trees::{ForestParams, Node, Tree};
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, d: usize, sep: f64, seed_value: u64) -> (Matrix, Vec<u8>) {
        let mut rng = seed::rng(seed_value);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = (i % 2) as u8;
            let c = if l == 0 { -sep } else { sep };
            rows.push((0..d).map(|j| if j < 2 { c } else { 0.0 } + noise.sample(&mut rng)).collect::<Vec<f64>>());
            labels.push(l);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            sample_ratio: 0.2,
            candidates: 2,
            cascade: CascadeParams {
                shape: CascadeShape {
                    layers: 2,
                    random: 1,
                    completely_random: 1,
                },
                forest: ForestParams {
                    n_trees: 6,
                    ..ForestParams::default()
                },
                ..CascadeParams::default()
            },
            max_rounds: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn stump(kind: ForestKind, threshold: f64, dim: usize) -> Forest {
        // predicts fake iff x[0] >= threshold
        let t = Tree::from_nodes(vec![
            Node::Split { feature: 0, threshold, left: 1, right: 2 },
            Node::Leaf { counts: [1, 0] },
            Node::Leaf { counts: [0, 1] },
        ])
        .unwrap();
        Forest::from_parts(kind, vec![t], dim, None).unwrap()
    }

    #[test]
    fn sample_all_and_distinct() {
        let w = SampleWeights::uniform(10);
        assert_eq!(weighted_sample(&w, 10, 1).unwrap(), (0..10).collect::<Vec<_>>());
        let w = SampleWeights::new((1..=50).map(|i| i as f64).collect()).unwrap();
        for s in 0..20 {
            let mut idx = weighted_sample(&w, 17, s).unwrap();
            assert_eq!(idx.len(), 17);
            idx.dedup();
            assert_eq!(idx.len(), 17);
        }
        assert!(matches!(
            weighted_sample(&w, 51, 0),
            Err(DafError::InvalidCount { requested: 51, available: 50 })
        ));
    }

    #[test]
    fn sample_first_draw_frequency() {
        let w = SampleWeights::new(vec![2.0, 1.0]).unwrap();
        let trials = 30_000;
        let hits = (0..trials)
            .filter(|&t| weighted_sample(&w, 1, t as u64).unwrap() == vec![0])
            .count();
        let freq = hits as f64 / trials as f64;
        assert!((freq - 2.0 / 3.0).abs() < 0.03, "freq {freq}");
    }

    #[test]
    fn inclusion_monotone_in_weight() {
        let w = SampleWeights::new(vec![1.0, 2.0, 4.0, 8.0]).unwrap();
        let mut counts = [0usize; 4];
        for t in 0..4000 {
            for i in weighted_sample(&w, 2, t).unwrap() {
                counts[i] += 1;
            }
        }
        assert!(counts.windows(2).all(|c| c[0] <= c[1]), "{counts:?}");
    }

    #[test]
    fn weight_rule_examples() {
        let w = SampleWeights::uniform(3);
        let out = update_weights(&w, &[1, 0], &[0, 0], &[0, 1], 1.5).unwrap();
        assert_eq!(out.as_slice(), &[1.5, 1.0 / 1.5, 1.0]);
        let same = update_weights(&w, &[1, 1], &[0, 1], &[0, 2], 1.0).unwrap();
        assert_eq!(same, w);
        let correct = update_weights(&w, &[0, 1], &[0, 1], &[1, 2], 1.5).unwrap();
        assert_eq!(correct.as_slice(), &[1.0, 1.0 / 1.5, 1.0 / 1.5]);
        assert!(matches!(
            update_weights(&w, &[0], &[0], &[3], 1.5),
            Err(DafError::IndexOutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn selection_prefers_dominant_candidate_and_ties_are_stable() {
        // validation: x[0] in {0,1,2,3}, label = x >= 2
        let val_x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let val_y = vec![0, 0, 1, 1];
        let model = |thresholds: [f64; 2]| {
            let layer = CascadeLayer::new(vec![
                stump(ForestKind::Random, thresholds[0], 1),
                stump(ForestKind::CompletelyRandom, thresholds[1], 1),
            ]);
            DeepForestModel::from_layers(vec![layer], 1, String::new()).unwrap()
        };
        let c0 = model([0.5, 2.5]);
        let c1 = model([1.5, 3.5]);
        let c2 = model([1.5, 1.5]);
        let sel = select_components(&[&c0, &c1, &c2], 0, &val_x, &val_y, None, UpstreamMode::Assembled).unwrap();
        let picked: Vec<(usize, usize)> = sel.pool.iter().filter(|e| e.selected).map(|e| (e.candidate, e.forest)).collect();
        assert_eq!(picked, vec![(1, 0), (2, 1)]);
        assert_eq!(sel.layer.forests()[0].val_accuracy(), Some(1.0));

        let tie = select_components(&[&c2, &c2, &c2], 0, &val_x, &val_y, None, UpstreamMode::Assembled).unwrap();
        let picked: Vec<(usize, usize)> = tie.pool.iter().filter(|e| e.selected).map(|e| (e.candidate, e.forest)).collect();
        assert_eq!(picked, vec![(0, 0), (0, 1)]);

        assert!(matches!(
            select_components(&[&c0], 0, &Matrix::zeros(0, 1), &[], None, UpstreamMode::Assembled),
            Err(DafError::EmptyValidation)
        ));
    }

    #[test]
    fn singleton_pool_is_identity() {
        let (x, y) = blobs(80, 4, 1.0, 1);
        let m = fit_cascade(&x, &y, &small_cfg().cascade, 4).unwrap();
        let (val_x, val_y) = blobs(30, 4, 1.0, 2);
        let (a, _) = assemble(&[&m], &val_x, &val_y, UpstreamMode::Assembled).unwrap();
        assert_eq!(a.layers().len(), m.layers().len());
        for (la, lm) in a.layers().iter().zip(m.layers()) {
            for (fa, fm) in la.forests().iter().zip(lm.forests()) {
                assert_eq!(fa.trees(), fm.trees());
                assert_eq!(fa.kind(), fm.kind());
                assert!(fa.val_accuracy().is_some());
            }
        }
    }

    #[test]
    fn assembled_shape_matches_single_cascade() {
        let (x, y) = blobs(200, 4, 1.0, 3);
        let cfg = small_cfg();
        let models: Vec<_> = (0..3)
            .map(|s| {
                let idx: Vec<usize> = (s * 50..s * 50 + 50).collect();
                let sub_y: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
                fit_cascade(&x.select(&idx), &sub_y, &cfg.cascade, s as u64).unwrap()
            })
            .collect();
        let refs: Vec<_> = models.iter().collect();
        let val: Vec<usize> = (150..200).collect();
        let val_y: Vec<u8> = val.iter().map(|&i| y[i]).collect();
        for mode in [UpstreamMode::Assembled, UpstreamMode::Own] {
            let (a, sels) = assemble(&refs, &x.select(&val), &val_y, mode).unwrap();
            assert_eq!(a.layers().len(), 2);
            assert_eq!(a.kinds(), cfg.cascade.shape.kinds());
            for sel in &sels {
                for kind in [ForestKind::Random, ForestKind::CompletelyRandom] {
                    let worst_kept = sel.pool.iter().filter(|e| e.kind == kind && e.selected).map(|e| e.accuracy).fold(f64::INFINITY, f64::min);
                    let best_dropped = sel.pool.iter().filter(|e| e.kind == kind && !e.selected).map(|e| e.accuracy).fold(f64::NEG_INFINITY, f64::max);
                    assert!(worst_kept >= best_dropped);
                }
            }
        }
    }

    #[test]
    fn run_daf_contracts() {
        let (x, y) = blobs(400, 5, 0.8, 5);
        let source = InMemorySource::new(x, y.clone()).unwrap();
        let cfg = small_cfg();
        let mut hooks = TrainHooks {
            residency: Residency::enabled(),
            record_sets: true,
            ..TrainHooks::default()
        };
        let out = run_daf(&source, &cfg, &mut hooks).unwrap();
        assert!(!out.rounds.is_empty() && out.rounds.len() <= cfg.max_rounds + 1);
        assert_eq!(out.model.layers().len(), 2);
        assert_eq!(out.model.forests_per_layer(), 2);
        for (r, log) in out.rounds.iter().enumerate() {
            let sets = log.sets.as_ref().unwrap();
            let expected_new = if r == 0 { 2 } else { 1 };
            assert_eq!(sets.batches.len(), expected_new);
            assert_eq!(log.candidate_accuracy.len(), 2);
            for (b, p) in sets.batches.iter().zip(&sets.probes) {
                assert_eq!(b.len(), 80);
                assert!(p.iter().all(|i| !b.contains(i)));
                assert!(sets.validation.iter().all(|i| !b.contains(i)));
            }
            assert_eq!(sets.validation.len(), 20);
            assert!(log.weights.as_ref().unwrap().as_slice().iter().all(|&w| w > 0.0));
        }
        let first = out.rounds[0].assembled_accuracy.unwrap();
        assert!(out.val_accuracy.unwrap() >= first || out.stop == StopReason::NoImprovement);
        let peak = hooks.peak_residency().rows().unwrap();
        assert!(peak <= 80, "peak {peak}");
        assert_eq!(hooks.residency.current(), Some(0));
    }

    #[test]
    fn zero_rounds_runs_once_and_is_deterministic() {
        let (x, y) = blobs(300, 4, 1.0, 6);
        let source = InMemorySource::new(x, y).unwrap();
        let cfg = TrainConfig {
            max_rounds: 0,
            ..small_cfg()
        };
        let a = run_daf(&source, &cfg, &mut TrainHooks::default()).unwrap();
        let b = run_daf(&source, &cfg, &mut TrainHooks::default()).unwrap();
        assert_eq!(a.rounds.len(), 1);
        assert_eq!(a.stop, StopReason::MaxRounds);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn full_batch_mode_holds_everything() {
        let (x, y) = blobs(120, 3, 1.0, 7);
        let source = InMemorySource::new(x, y).unwrap();
        let cfg = TrainConfig {
            sample_ratio: 1.0,
            candidates: 1,
            max_rounds: 0,
            ..small_cfg()
        };
        let mut hooks = TrainHooks {
            residency: Residency::enabled(),
            ..TrainHooks::default()
        };
        let out = run_daf(&source, &cfg, &mut hooks).unwrap();
        assert_eq!(hooks.peak_residency(), Peak::Rows(120));
        assert_eq!(out.val_accuracy, None);
        let none = TrainHooks::default();
        assert_eq!(peak_residency(&none), Peak::Unmeasured);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { theta: 1.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let crowded = TrainConfig { sample_ratio: 0.4, ..TrainConfig::default() };
        assert!(crowded.validate().is_err());
        let t = TrainConfig::default();
        assert_eq!(t.ws_size(4000), 80);
        assert_eq!(t.ws_size(100_000), 1000);
        assert_eq!(t.batch_size(4000), 400);
        assert_eq!(t.val_size(4000), 200);
        let (x, y) = blobs(10, 2, 1.0, 1);
        let single = InMemorySource::new(x, vec![1; y.len()]).unwrap();
        assert!(matches!(
            run_daf(&single, &small_cfg(), &mut TrainHooks::default()),
            Err(DafError::SingleClass)
        ));
    }
}
