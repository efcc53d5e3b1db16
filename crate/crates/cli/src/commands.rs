//! Command implementations. Each writes results to `out`, progress and
//! per-file failures to `err`, and returns an error mapped to exit code 1.

use std::io::Write;
use std::path::{Path, PathBuf};

use daf_core::assembly::{run_daf, TrainHooks, TrainOutcome};
use daf_core::cascade::DeepForestModel;
use daf_core::config::RunConfig;
use daf_core::imageio::PerturbSpec;
use daf_core::metrics::{EvalReport, DEFAULT_THRESHOLD};
use daf_core::patchfeat::PatchConfig;
use daf_core::residency::Residency;
use daf_core::store::{load_model, save_model, CacheWriter, FeatureCache, ModelSummary};
use daf_core::{DafError, Result as CoreResult};
use rayon::prelude::*;

use crate::error::{CliError, CliResult};
use crate::fixture::{self, FixtureSpec};
use crate::manifest::Manifest;
use crate::pipeline::ImagePipeline;

const CHUNK: usize = 64;

/// Output streams of a command.
pub struct Console<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

impl Console<'_> {
    fn say(&mut self, line: std::fmt::Arguments<'_>) {
        let _ = writeln!(self.out, "{line}");
    }

    fn warn(&mut self, line: std::fmt::Arguments<'_>) {
        let _ = writeln!(self.err, "{line}");
    }
}

/// Runs `f` over the manifest in fixed-size parallel chunks, handing each
/// result to `sink` in manifest order.
fn for_each_row<T: Send>(
    manifest: &Manifest,
    f: impl Fn(usize, &Path) -> CoreResult<T> + Sync,
    mut sink: impl FnMut(usize, &Path, CoreResult<T>) -> CliResult<()>,
) -> CliResult<()> {
    let paths: Vec<PathBuf> = manifest.rows.iter().map(|r| manifest.resolve(r)).collect();
    for start in (0..paths.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(paths.len());
        let results: Vec<CoreResult<T>> = (start..end).into_par_iter().map(|i| f(i, &paths[i])).collect();
        for (i, r) in (start..end).zip(results) {
            sink(i, &paths[i], r)?;
        }
    }
    Ok(())
}

/// Extracts every manifest image into a feature cache. On any failure the
/// partial cache is removed after all failures have been listed.
pub fn cmd_extract(manifest: &Manifest, cfg: &RunConfig, out_cache: &Path, con: &mut Console<'_>) -> CliResult<()> {
    let pipeline = ImagePipeline::new(cfg.patch.clone())?.with_augment(cfg.augment.clone(), cfg.train.seed);
    let mut writer = Some(CacheWriter::create(out_cache, &manifest.labels(), pipeline.dim(), manifest.digest())?);
    let total = manifest.len();
    let mut failed = 0usize;
    let result = for_each_row(
        manifest,
        |i, p| pipeline.features(p, i),
        |i, path, r| {
            match r {
                Ok(fv) => {
                    if let Some(w) = writer.as_mut() {
                        w.push_row(fv.as_slice())?;
                    }
                }
                Err(e) => {
                    failed += 1;
                    writer = None;
                    con.warn(format_args!("error: {}: {e}", path.display()));
                }
            }
            if (i + 1) % 500 == 0 || i + 1 == total {
                con.warn(format_args!("extracted {}/{total}", i + 1));
            }
            Ok(())
        },
    );
    let finished = match (result, writer) {
        (Ok(()), Some(w)) if failed == 0 => w.finish().map_err(CliError::from),
        (Ok(()), _) => Err(CliError::Partial { failed, total }),
        (Err(e), _) => Err(e),
    };
    if finished.is_err() {
        let _ = std::fs::remove_file(out_cache);
    } else {
        con.say(format_args!("wrote {} rows of dimension {} to {}", total, pipeline.dim(), out_cache.display()));
    }
    finished
}

/// Training data: an existing cache or a manifest extracted on the fly.
pub enum TrainInput<'a> {
    Cache(&'a Path),
    Manifest(&'a Manifest),
}

pub fn default_log_path(model: &Path) -> PathBuf {
    let mut name = model.file_name().unwrap_or_default().to_os_string();
    name.push(".log");
    model.with_file_name(name)
}

/// Runs dynamic assembly on the input and writes the model and its
/// per-round training log.
pub fn cmd_train(
    input: TrainInput<'_>,
    cfg: &RunConfig,
    out_model: &Path,
    log_path: Option<&Path>,
    residency: Residency,
    con: &mut Console<'_>,
) -> CliResult<TrainOutcome> {
    let temp;
    let cache_path = match input {
        TrainInput::Cache(p) => p.to_path_buf(),
        TrainInput::Manifest(m) => {
            let labels = m.labels();
            if !(labels.contains(&0) && labels.contains(&1)) {
                return Err(DafError::SingleClass.into());
            }
            temp = tempfile::Builder::new()
                .prefix("daf-train-")
                .suffix(".dafc")
                .tempfile()
                .map_err(|e| DafError::io(std::env::temp_dir(), e))?;
            cmd_extract(m, cfg, temp.path(), con)?;
            temp.path().to_path_buf()
        }
    };
    let cache = FeatureCache::open(&cache_path)?;
    let expected = cfg.patch.dim();
    if daf_core::assembly::RowSource::dim(&cache) != expected {
        return Err(DafError::DimensionMismatch {
            expected,
            found: daf_core::assembly::RowSource::dim(&cache),
        }
        .into());
    }
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| default_log_path(out_model));
    let mut log = Vec::<u8>::new();
    let outcome = {
        let mut hooks = TrainHooks {
            residency,
            on_round: Some(Box::new(|r| {
                let _ = writeln!(log, "{r}");
            })),
            ..TrainHooks::default()
        };
        run_daf(&cache, &cfg.train, &mut hooks)?
    };
    let mut model = outcome.model.clone();
    model.set_snapshot(cfg.render());
    save_model(&model, out_model)?;
    let _ = writeln!(
        log,
        "final validation accuracy {} stop {} rounds {}",
        outcome.val_accuracy.map_or("-".to_string(), |a| format!("{a:.4}")),
        outcome.stop,
        outcome.rounds.len()
    );
    std::fs::write(&log_path, &log).map_err(|e| DafError::io(&log_path, e))?;
    con.say(format_args!(
        "validation accuracy {} stop {} after {} round(s); model written to {}",
        outcome.val_accuracy.map_or("-".to_string(), |a| format!("{a:.4}")),
        outcome.stop,
        outcome.rounds.len(),
        out_model.display()
    ));
    Ok(TrainOutcome { model, ..outcome })
}

/// Patch configuration for scoring: the explicit config if given, else the
/// snapshot stored in the model. Must match the model's base dimension.
pub fn scoring_config(model: &DeepForestModel, explicit: Option<&RunConfig>) -> CliResult<PatchConfig> {
    let patch = match explicit {
        Some(c) => c.patch.clone(),
        None if model.snapshot().trim().is_empty() => PatchConfig::default(),
        None => RunConfig::parse(model.snapshot())?.patch,
    };
    if patch.dim() != model.base_dim() {
        return Err(DafError::DimensionMismatch {
            expected: model.base_dim(),
            found: patch.dim(),
        }
        .into());
    }
    Ok(patch)
}

/// Scores image files, printing `path<TAB>score` lines in input order.
pub fn cmd_predict(
    model_path: &Path,
    cfg: Option<&RunConfig>,
    inputs: &[PathBuf],
    con: &mut Console<'_>,
) -> CliResult<Vec<Option<f64>>> {
    let model = load_model(model_path)?;
    let pipeline = ImagePipeline::new(scoring_config(&model, cfg)?)?;
    let scores: Vec<CoreResult<f64>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, p)| model.predict_score(pipeline.features(p, i)?.as_slice()))
        .collect();
    let mut failed = 0;
    let mut out = Vec::with_capacity(inputs.len());
    for (p, s) in inputs.iter().zip(scores) {
        match s {
            Ok(s) => {
                con.say(format_args!("{}\t{s}", p.display()));
                out.push(Some(s));
            }
            Err(e) => {
                failed += 1;
                con.warn(format_args!("error: {}: {e}", p.display()));
                out.push(None);
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Partial { failed, total: inputs.len() });
    }
    Ok(out)
}

/// Fake-class scores for every manifest image, optionally perturbed.
pub fn score_manifest(
    model: &DeepForestModel,
    patch: PatchConfig,
    manifest: &Manifest,
    perturb: Option<PerturbSpec>,
    con: &mut Console<'_>,
) -> CliResult<Vec<f64>> {
    let pipeline = ImagePipeline::new(patch)?.with_perturb(perturb);
    let mut scores = Vec::with_capacity(manifest.len());
    let mut failed = 0;
    for_each_row(
        manifest,
        |i, p| model.predict_score(pipeline.features(p, i)?.as_slice()),
        |_, path, r| {
            match r {
                Ok(s) => scores.push(s),
                Err(e) => {
                    failed += 1;
                    con.warn(format_args!("error: {}: {e}", path.display()));
                }
            }
            Ok(())
        },
    )?;
    if failed > 0 {
        return Err(CliError::Partial { failed, total: manifest.len() });
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Json,
    Table,
}

/// Per-tag and overall accuracy and AUC on a labeled manifest.
pub fn cmd_eval(
    model_path: &Path,
    manifest: &Manifest,
    perturb: Option<PerturbSpec>,
    cfg: Option<&RunConfig>,
    format: ReportFormat,
    con: &mut Console<'_>,
) -> CliResult<(EvalReport, Vec<f64>)> {
    let model = load_model(model_path)?;
    let labels = manifest.labels();
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(DafError::SingleClass.into());
    }
    let scores = score_manifest(&model, scoring_config(&model, cfg)?, manifest, perturb, con)?;
    let report = EvalReport::build(&scores, &labels, &manifest.tags(), DEFAULT_THRESHOLD)?;
    match format {
        ReportFormat::Json => con.say(format_args!("{}", report.to_json())),
        ReportFormat::Table => {
            let _ = write!(con.out, "{}", report.to_table());
        }
    }
    Ok((report, scores))
}

pub fn cmd_fixture(out_dir: &Path, spec: &FixtureSpec, con: &mut Console<'_>) -> CliResult<Manifest> {
    let m = fixture::generate(out_dir, spec)?;
    con.say(format_args!(
        "wrote {} images and {}",
        m.len(),
        out_dir.join("manifest.csv").display()
    ));
    Ok(m)
}

/// Prints the model summary as JSON, or with `dump` one CSV row of
/// last-layer class vectors per manifest image.
pub fn cmd_inspect(
    model_path: &Path,
    dump: Option<&Manifest>,
    cfg: Option<&RunConfig>,
    con: &mut Console<'_>,
) -> CliResult<()> {
    let model = load_model(model_path)?;
    let Some(manifest) = dump else {
        con.say(format_args!("{}", ModelSummary::of(&model).to_json()));
        return Ok(());
    };
    let pipeline = ImagePipeline::new(scoring_config(&model, cfg)?)?;
    let width = model.forests_per_layer() * 2;
    let header: Vec<String> = (0..width).map(|i| format!("f{i}")).collect();
    con.say(format_args!("path,label,{}", header.join(",")));
    let mut failed = 0;
    for_each_row(
        manifest,
        |i, p| model.last_layer_features(pipeline.features(p, i)?.as_slice()),
        |i, path, r| {
            match r {
                Ok(v) => {
                    let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                    con.say(format_args!(
                        "{},{},{}",
                        manifest.rows[i].path.display(),
                        manifest.rows[i].label,
                        vals.join(",")
                    ));
                }
                Err(e) => {
                    failed += 1;
                    con.warn(format_args!("error: {}: {e}", path.display()));
                }
            }
            Ok(())
        },
    )?;
    if failed > 0 {
        return Err(CliError::Partial { failed, total: manifest.len() });
    }
    Ok(())
}

pub fn cmd_manifest_from_dirs(root: &Path, out: &Path, con: &mut Console<'_>) -> CliResult<Manifest> {
    let m = Manifest::from_dirs(root)?;
    m.write(out)?;
    con.say(format_args!("wrote {} rows to {}", m.len(), out.display()));
    Ok(m)
}
