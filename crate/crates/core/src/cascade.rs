//! Cascaded forests: each layer's class vectors are appended to the base
//! features and fed to the next layer.
//!
//! Forest `j` of a layer always writes augmentation positions
//! `d + 2j .. d + 2j + 1`, which is what lets layers from different
//! cascades be recombined by the assembly step.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{Augmented, Features, Matrix, SingleRow};
use crate::error::{DafError, Result};
use crate::seed;
use crate::trees::{fit_forest_rows, Forest, ForestKind, ForestParams, CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CascadeShape {
    pub layers: usize,
    pub random: usize,
    pub completely_random: usize,
}

impl Default for CascadeShape {
    fn default() -> Self {
        CascadeShape {
            layers: 3,
            random: 2,
            completely_random: 2,
        }
    }
}

impl CascadeShape {
    pub fn forests_per_layer(&self) -> usize {
        self.random + self.completely_random
    }

    pub fn augmentation_dim(&self) -> usize {
        self.forests_per_layer() * CLASSES
    }

    /// Kind of forest `j` within a layer: `random` first, then
    /// `completely_random`.
    pub fn kinds(&self) -> Vec<ForestKind> {
        std::iter::repeat_n(ForestKind::Random, self.random)
            .chain(std::iter::repeat_n(
                ForestKind::CompletelyRandom,
                self.completely_random,
            ))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.forests_per_layer() == 0 {
            return Err(DafError::Config(
                "cascade needs at least one layer and one forest per layer".into(),
            ));
        }
        Ok(())
    }
}

/// How training-time augmentation vectors are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AugmentationMode {
    /// k-fold: a row's vector comes from forests that never saw it.
    #[default]
    CrossFit,
    /// The persisted forests predict their own training rows.
    InSample,
}

impl AugmentationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AugmentationMode::CrossFit => "crossfit",
            AugmentationMode::InSample => "insample",
        }
    }
}

impl FromStr for AugmentationMode {
    type Err = DafError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossfit" => Ok(AugmentationMode::CrossFit),
            "insample" => Ok(AugmentationMode::InSample),
            _ => Err(DafError::Config(format!(
                "unknown augmentation mode '{s}' (known: crossfit, insample)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeParams {
    pub shape: CascadeShape,
    pub forest: ForestParams,
    pub folds: usize,
    pub augmentation: AugmentationMode,
}

impl Default for CascadeParams {
    fn default() -> Self {
        CascadeParams {
            shape: CascadeShape::default(),
            forest: ForestParams::default(),
            folds: 3,
            augmentation: AugmentationMode::CrossFit,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeLayer {
    forests: Vec<Forest>,
}

impl CascadeLayer {
    pub fn new(forests: Vec<Forest>) -> Self {
        CascadeLayer { forests }
    }

    pub fn forests(&self) -> &[Forest] {
        &self.forests
    }

    pub fn forests_mut(&mut self) -> &mut [Forest] {
        &mut self.forests
    }

    pub fn input_dim(&self) -> usize {
        self.forests.first().map_or(0, |f| f.feature_dim())
    }

    /// Concatenated class vectors of every forest for one row.
    pub fn outputs_row<F: Features + ?Sized>(&self, data: &F, row: usize, out: &mut [f64]) {
        for (j, f) in self.forests.iter().enumerate() {
            let p = f.proba_row(data, row);
            out[j * CLASSES..(j + 1) * CLASSES].copy_from_slice(&p);
        }
    }

    /// Class vectors for every row of `data`.
    pub fn outputs(&self, data: &(dyn Features + Sync)) -> Matrix {
        let width = self.forests.len() * CLASSES;
        let mut out = Matrix::zeros(data.n_rows(), width);
        if width == 0 {
            return out;
        }
        let rows: Vec<Vec<f64>> = (0..data.n_rows())
            .into_par_iter()
            .map(|r| {
                let mut v = vec![0.0; width];
                self.outputs_row(data, r, &mut v);
                v
            })
            .collect();
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).copy_from_slice(&r);
        }
        out
    }

    /// Mean fake-class probability over the layer's forests.
    pub fn fake_score_row<F: Features + ?Sized>(&self, data: &F, row: usize) -> f64 {
        let total: f64 = self.forests.iter().map(|f| f.proba_row(data, row)[1]).sum();
        total / self.forests.len() as f64
    }
}

/// A cascade of forest layers over `base_dim` input features.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepForestModel {
    layers: Vec<CascadeLayer>,
    base_dim: usize,
    snapshot: String,
}

impl DeepForestModel {
    /// Assembles a model, checking the layer-size and dimension contracts.
    pub fn from_layers(layers: Vec<CascadeLayer>, base_dim: usize, snapshot: String) -> Result<Self> {
        if layers.is_empty() {
            return Err(DafError::Format("model without layers".into()));
        }
        let width = layers[0].forests().len();
        if width == 0 {
            return Err(DafError::Format("layer without forests".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.forests().len() != width {
                return Err(DafError::Format(format!(
                    "layer {k} has {} forests, expected {width}",
                    layer.forests().len()
                )));
            }
            let expected = if k == 0 { base_dim } else { base_dim + width * CLASSES };
            for f in layer.forests() {
                if f.feature_dim() != expected {
                    return Err(DafError::DimensionMismatch {
                        expected,
                        found: f.feature_dim(),
                    });
                }
            }
        }
        Ok(DeepForestModel {
            layers,
            base_dim,
            snapshot,
        })
    }

    pub fn layers(&self) -> &[CascadeLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CascadeLayer] {
        &mut self.layers
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    /// Free-form configuration text recorded at training time.
    pub fn snapshot(&self) -> &str {
        &self.snapshot
    }

    pub fn set_snapshot(&mut self, snapshot: String) {
        self.snapshot = snapshot;
    }

    pub fn forests_per_layer(&self) -> usize {
        self.layers[0].forests().len()
    }

    pub fn kinds(&self) -> Vec<ForestKind> {
        self.layers[0].forests().iter().map(|f| f.kind()).collect()
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.base_dim {
            return Err(DafError::DimensionMismatch {
                expected: self.base_dim,
                found,
            });
        }
        Ok(())
    }

    /// Augmentation matrix consumed by layer `layer` (None for layer 0).
    pub fn augmentation_for(&self, layer: usize, x: &Matrix) -> Result<Option<Matrix>> {
        self.check_dim(x.cols())?;
        let mut aug: Option<Matrix> = None;
        for l in &self.layers[..layer] {
            let view = Augmented::new(x, aug.as_ref());
            aug = Some(l.outputs(&view));
        }
        Ok(aug)
    }

    /// Runs one row through every layer, returning the last layer's class
    /// vectors.
    fn propagate(&self, x: &[f64]) -> Vec<f64> {
        let width = self.forests_per_layer() * CLASSES;
        let mut input = x.to_vec();
        let mut out = vec![0.0; width];
        for (k, layer) in self.layers.iter().enumerate() {
            layer.outputs_row(&SingleRow(&input), 0, &mut out);
            if k + 1 < self.layers.len() {
                input.truncate(self.base_dim);
                input.extend_from_slice(&out);
            }
        }
        out
    }

    pub fn predict_score(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        let out = self.propagate(x);
        let n = self.forests_per_layer() as f64;
        Ok(out.chunks(CLASSES).map(|p| p[1]).sum::<f64>() / n)
    }

    pub fn last_layer_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        Ok(self.propagate(x))
    }

    /// Scores for every row of `x`.
    pub fn predict_scores(&self, x: &Matrix) -> Result<Vec<f64>> {
        let last = self.layers.len() - 1;
        let aug = self.augmentation_for(last, x)?;
        let view = Augmented::new(x, aug.as_ref());
        let layer = &self.layers[last];
        Ok((0..x.rows())
            .into_par_iter()
            .map(|r| layer.fake_score_row(&view, r))
            .collect())
    }
}

/// Records produced while fitting, for auditing the layer contracts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CascadeTrace {
    /// Input width seen by each layer.
    pub layer_input_dims: Vec<usize>,
    /// Fold of each training row (cross-fit mode).
    pub fold_of: Vec<usize>,
    /// Rows each fold's forests were trained on, per layer and fold.
    pub augmentation_sources: Vec<Vec<Vec<usize>>>,
}

fn fold_assignment(n: usize, folds: usize, rng_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::child_rng(rng_seed, &[u64::MAX]));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    fold_of
}

pub fn fit_cascade(
    x: &Matrix,
    y: &[u8],
    params: &CascadeParams,
    rng_seed: u64,
) -> Result<DeepForestModel> {
    fit_cascade_traced(x, y, params, rng_seed, None)
}

pub fn fit_cascade_traced(
    x: &Matrix,
    y: &[u8],
    params: &CascadeParams,
    rng_seed: u64,
    mut trace: Option<&mut CascadeTrace>,
) -> Result<DeepForestModel> {
    params.shape.validate()?;
    params.forest.validate()?;
    let n = x.rows();
    if n == 0 {
        return Err(DafError::EmptyData);
    }
    if y.len() != n {
        return Err(DafError::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    if params.folds < 2 {
        return Err(DafError::Config("folds must be at least 2".into()));
    }
    if n < params.folds {
        return Err(DafError::TooFewSamples {
            samples: n,
            folds: params.folds,
        });
    }
    let kinds = params.shape.kinds();
    let all_rows: Vec<usize> = (0..n).collect();
    let fold_of = fold_assignment(n, params.folds, rng_seed);
    let fold_train: Vec<Vec<usize>> = (0..params.folds)
        .map(|f| all_rows.iter().copied().filter(|&i| fold_of[i] != f).collect())
        .collect();
    if let Some(t) = trace.as_deref_mut() {
        t.fold_of = fold_of.clone();
    }

    let mut layers = Vec::with_capacity(params.shape.layers);
    let mut aug: Option<Matrix> = None;
    for k in 0..params.shape.layers {
        let view = Augmented::new(x, aug.as_ref());
        if let Some(t) = trace.as_deref_mut() {
            t.layer_input_dims.push(view.dim());
        }
        let forests = kinds
            .par_iter()
            .enumerate()
            .map(|(j, &kind)| {
                let s = seed::derive(rng_seed, &[k as u64, j as u64, 0]);
                fit_forest_rows(&view, y, &all_rows, kind, &params.forest, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let layer = CascadeLayer::new(forests);
        if k + 1 < params.shape.layers {
            let next = match params.augmentation {
                AugmentationMode::InSample => {
                    if let Some(t) = trace.as_deref_mut() {
                        t.augmentation_sources.push(vec![all_rows.clone()]);
                    }
                    layer.outputs(&view)
                }
                AugmentationMode::CrossFit => {
                    if let Some(t) = trace.as_deref_mut() {
                        t.augmentation_sources.push(fold_train.clone());
                    }
                    crossfit_outputs(&view, y, &kinds, params, &fold_of, &fold_train, rng_seed, k)?
                }
            };
            aug = Some(next);
        }
        layers.push(layer);
    }
    DeepForestModel::from_layers(layers, x.cols(), String::new())
}

#[allow(clippy::too_many_arguments)]
fn crossfit_outputs(
    view: &Augmented<'_>,
    y: &[u8],
    kinds: &[ForestKind],
    params: &CascadeParams,
    fold_of: &[usize],
    fold_train: &[Vec<usize>],
    rng_seed: u64,
    layer: usize,
) -> Result<Matrix> {
    let jobs: Vec<(usize, usize)> = (0..kinds.len())
        .flat_map(|j| (0..params.folds).map(move |f| (j, f)))
        .collect();
    let fitted = jobs
        .par_iter()
        .map(|&(j, f)| {
            let s = seed::derive(rng_seed, &[layer as u64, j as u64, 1 + f as u64]);
            fit_forest_rows(view, y, &fold_train[f], kinds[j], &params.forest, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Matrix::zeros(view.n_rows(), kinds.len() * CLASSES);
    for (&(j, f), forest) in jobs.iter().zip(&fitted) {
        for i in 0..view.n_rows() {
            if fold_of[i] == f {
                let p = forest.proba_row(view, i);
                out.row_mut(i)[j * CLASSES..(j + 1) * CLASSES].copy_from_slice(&p);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::{Node, Tree};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, d: usize, seed_value: u64) -> (Matrix, Vec<u8>) {
        let mut rng = seed::rng(seed_value);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = (i % 2) as u8;
            let c = if l == 0 { -1.5 } else { 1.5 };
            rows.push((0..d).map(|j| if j < 2 { c } else { 0.0 } + noise.sample(&mut rng)).collect::<Vec<f64>>());
            labels.push(l);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    fn small_params(layers: usize, a: usize, b: usize) -> CascadeParams {
        CascadeParams {
            shape: CascadeShape {
                layers,
                random: a,
                completely_random: b,
            },
            forest: ForestParams {
                n_trees: 5,
                ..ForestParams::default()
            },
            ..CascadeParams::default()
        }
    }

    fn leaf_forest(kind: ForestKind, counts: [u32; 2], dim: usize) -> Forest {
        Forest::from_parts(
            kind,
            vec![Tree::from_nodes(vec![Node::Leaf { counts }]).unwrap()],
            dim,
            None,
        )
        .unwrap()
    }

    #[test]
    fn layer_dimension_contract() {
        let (x, y) = blobs(60, 4, 1);
        let mut trace = CascadeTrace::default();
        let model = fit_cascade_traced(&x, &y, &small_params(3, 2, 2), 7, Some(&mut trace)).unwrap();
        assert_eq!(trace.layer_input_dims, vec![4, 12, 12]);
        assert_eq!(model.layers().len(), 3);
        for layer in model.layers() {
            assert_eq!(layer.forests().len(), 4);
            let kinds: Vec<_> = layer.forests().iter().map(|f| f.kind()).collect();
            assert_eq!(kinds, small_params(3, 2, 2).shape.kinds());
        }
        assert_eq!(model.layers()[1].input_dim(), 4 + 8);
    }

    #[test]
    fn single_layer_score_is_forest_mean() {
        let (x, y) = blobs(40, 3, 2);
        let model = fit_cascade(&x, &y, &small_params(1, 1, 1), 3).unwrap();
        for i in 0..5 {
            let row = x.row(i);
            let fs = model.layers()[0].forests();
            let expected = (fs[0].predict_proba(row).unwrap()[1] + fs[1].predict_proba(row).unwrap()[1]) / 2.0;
            assert_eq!(model.predict_score(row).unwrap(), expected);
        }
    }

    #[test]
    fn single_forest_single_layer_equals_forest() {
        let (x, y) = blobs(40, 3, 3);
        let model = fit_cascade(&x, &y, &small_params(1, 1, 0), 3).unwrap();
        let f = &model.layers()[0].forests()[0];
        for i in 0..10 {
            assert_eq!(model.predict_score(x.row(i)).unwrap(), f.predict_proba(x.row(i)).unwrap()[1]);
        }
    }

    #[test]
    fn crossfit_never_scores_own_training_rows() {
        let (mut rows, mut y): (Vec<Vec<f64>>, Vec<u8>) = {
            let (x, y) = blobs(30, 3, 4);
            (x.iter_rows().map(|r| r.to_vec()).collect(), y)
        };
        // duplicate row 0 with the flipped label
        rows.push(rows[0].clone());
        y.push(1 - y[0]);
        let x = Matrix::from_rows(&rows).unwrap();
        let mut trace = CascadeTrace::default();
        fit_cascade_traced(&x, &y, &small_params(2, 1, 1), 5, Some(&mut trace)).unwrap();
        let sources = &trace.augmentation_sources[0];
        for i in 0..x.rows() {
            assert!(!sources[trace.fold_of[i]].contains(&i), "row {i} scored by a model trained on it");
        }
        // every fold model trains on all rows outside its fold
        for (f, src) in sources.iter().enumerate() {
            let expected: Vec<usize> = (0..x.rows()).filter(|&i| trace.fold_of[i] != f).collect();
            assert_eq!(src, &expected);
        }

        let mut naive = CascadeTrace::default();
        let params = CascadeParams {
            augmentation: AugmentationMode::InSample,
            ..small_params(2, 1, 1)
        };
        fit_cascade_traced(&x, &y, &params, 5, Some(&mut naive)).unwrap();
        assert!(naive.augmentation_sources[0][0].contains(&0));
    }

    #[test]
    fn too_few_samples() {
        let (x, y) = blobs(2, 3, 5);
        assert!(matches!(
            fit_cascade(&x, &y, &small_params(1, 1, 1), 0),
            Err(DafError::TooFewSamples { samples: 2, folds: 3 })
        ));
        let empty = Matrix::zeros(0, 3);
        assert!(matches!(
            fit_cascade(&empty, &[], &small_params(1, 1, 1), 0),
            Err(DafError::EmptyData)
        ));
    }

    #[test]
    fn unanimous_and_split_votes() {
        let layer = CascadeLayer::new(vec![
            leaf_forest(ForestKind::Random, [0, 3], 2),
            leaf_forest(ForestKind::CompletelyRandom, [0, 1], 2),
        ]);
        let m = DeepForestModel::from_layers(vec![layer], 2, String::new()).unwrap();
        assert_eq!(m.predict_score(&[0.0, 0.0]).unwrap(), 1.0);
        let layer = CascadeLayer::new(vec![
            leaf_forest(ForestKind::Random, [2, 0], 2),
            leaf_forest(ForestKind::CompletelyRandom, [0, 5], 2),
        ]);
        let m = DeepForestModel::from_layers(vec![layer], 2, String::new()).unwrap();
        assert_eq!(m.predict_score(&[0.0, 0.0]).unwrap(), 0.5);
        let f = m.last_layer_features(&[1.0, 1.0]).unwrap();
        assert_eq!(f, vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            m.predict_score(&[0.0]),
            Err(DafError::DimensionMismatch { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn last_layer_features_and_scores() {
        let (x, y) = blobs(60, 4, 6);
        let model = fit_cascade(&x, &y, &small_params(2, 2, 2), 1).unwrap();
        let batch = model.predict_scores(&x).unwrap();
        let mut rng = seed::rng(8);
        for i in 0..x.rows() {
            let f = model.last_layer_features(x.row(i)).unwrap();
            assert_eq!(f.len(), 8);
            for p in f.chunks(2) {
                assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
            }
            assert_eq!(batch[i], model.predict_score(x.row(i)).unwrap());
        }
        for _ in 0..20 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            let s = model.predict_score(&v).unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn fitting_is_deterministic() {
        let (x, y) = blobs(45, 3, 9);
        let a = fit_cascade(&x, &y, &small_params(2, 1, 1), 11).unwrap();
        let b = fit_cascade(&x, &y, &small_params(2, 1, 1), 11).unwrap();
        assert_eq!(a, b);
    }
}
