//! Flat `key = value` run configuration.
//!
//! Every key is listed in [`KEYS`]; parsing starts from the shipped
//! defaults, rejects unknown or repeated keys, and validates the result.
//! [`RunConfig::render`] writes a canonical form that parses back to the
//! same value and is stored in model files as the config snapshot.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::assembly::{TrainConfig, UpstreamMode};
use crate::cascade::AugmentationMode;
use crate::error::{DafError, Result};
use crate::imageio::AugmentSpec;
use crate::patchfeat::{FusionMode, PatchConfig, Window};

/// Text of `configs/default.conf`.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.conf");

/// Optional file locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IoPaths {
    pub manifest: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub patch: PatchConfig,
    pub train: TrainConfig,
    pub augment: AugmentSpec,
    pub paths: IoPaths,
}

impl Default for RunConfig {
    /// The shipped default file, parsed.
    fn default() -> Self {
        RunConfig::parse(DEFAULT_CONFIG).expect("shipped default config parses")
    }
}

/// One documented configuration key.
pub struct Key {
    pub name: &'static str,
    set: fn(&mut RunConfig, &str) -> Result<()>,
    get: fn(&RunConfig) -> String,
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| DafError::Config(format!("{key}: cannot parse '{v}': {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(DafError::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

fn parse_auto(key: &str, v: &str) -> Result<Option<usize>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_value(key, v).map(Some)
    }
}

fn render_auto(v: Option<usize>) -> String {
    v.map_or("auto".to_string(), |n| n.to_string())
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn render_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

fn parse_windows(v: &str) -> Result<Vec<Window>> {
    v.split(',').map(str::parse).collect()
}

fn render_windows(ws: &[Window]) -> String {
    ws.iter()
        .map(|w| {
            if w.size == w.stride {
                w.size.to_string()
            } else {
                w.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(",")
}

macro_rules! key {
    ($name:literal, $($field:ident).+) => {
        Key {
            name: $name,
            set: |c, v| {
                c.$($field).+ = parse_value($name, v)?;
                Ok(())
            },
            get: |c| c.$($field).+.to_string(),
        }
    };
    ($name:literal, $($field:ident).+, $parse:expr, $render:expr) => {
        Key {
            name: $name,
            set: |c, v| {
                c.$($field).+ = $parse($name, v)?;
                Ok(())
            },
            get: |c| $render(&c.$($field).+),
        }
    };
}

/// All accepted keys, in rendering order.
pub static KEYS: &[Key] = &[
    key!("input_size", patch.input_size),
    key!("grid", patch.grid),
    key!("hog_cell", patch.hog_cell),
    key!("hog_bins", patch.hog_bins),
    key!(
        "windows",
        patch.windows,
        |_, v| parse_windows(v),
        |w: &Vec<Window>| render_windows(w)
    ),
    key!("lfs_bands", patch.bands),
    key!(
        "fusion",
        patch.fusion,
        |_, v: &str| v.parse::<FusionMode>(),
        |f: &FusionMode| f.name().to_string()
    ),
    key!("layers", train.cascade.shape.layers),
    key!("rf_per_layer", train.cascade.shape.random),
    key!("crf_per_layer", train.cascade.shape.completely_random),
    key!("n_trees", train.cascade.forest.n_trees),
    key!("max_depth", train.cascade.forest.max_depth),
    key!("min_samples_split", train.cascade.forest.min_samples_split),
    key!(
        "max_features",
        train.cascade.forest.candidate_features,
        parse_auto,
        |v: &Option<usize>| render_auto(*v)
    ),
    key!(
        "bootstrap",
        train.cascade.forest.bootstrap,
        parse_bool,
        |b: &bool| b.to_string()
    ),
    key!("folds", train.cascade.folds),
    key!(
        "augmentation_vectors",
        train.cascade.augmentation,
        |_, v: &str| v.parse::<AugmentationMode>(),
        |m: &AugmentationMode| m.name().to_string()
    ),
    key!("candidates", train.candidates),
    key!("sample_ratio", train.sample_ratio),
    key!("max_rounds", train.max_rounds),
    key!("theta", train.theta),
    key!("epsilon", train.epsilon),
    key!("val_fraction", train.val_fraction),
    key!("ws_cap", train.ws_cap, parse_auto, |v: &Option<usize>| render_auto(*v)),
    key!(
        "selection_upstream",
        train.upstream,
        |_, v: &str| v.parse::<UpstreamMode>(),
        |m: &UpstreamMode| m.name().to_string()
    ),
    key!("seed", train.seed),
    key!("augment", augment.enabled, parse_bool, |b: &bool| b.to_string()),
    key!("augment.flip_prob", augment.flip_prob),
    key!("augment.crop_prob", augment.crop_prob),
    key!("augment.crop_factor", augment.crop_factor),
    key!("augment.noise_prob", augment.noise_prob),
    key!("augment.noise_sigma", augment.noise_sigma),
    key!(
        "manifest",
        paths.manifest,
        |_, v| Ok::<_, DafError>(parse_path(v)),
        render_path
    ),
    key!("cache", paths.cache, |_, v| Ok::<_, DafError>(parse_path(v)), render_path),
    key!("model", paths.model, |_, v| Ok::<_, DafError>(parse_path(v)), render_path),
];

impl RunConfig {
    /// Built-in values before any file is applied; equal to the shipped file.
    fn builtin() -> Self {
        RunConfig {
            patch: PatchConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentSpec::default(),
            paths: IoPaths::default(),
        }
    }

    /// Parses a config text; keys not mentioned keep their default values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::builtin();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DafError::io(path, e))?;
        RunConfig::parse(&text)
            .map_err(|e| DafError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                DafError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(DafError::Config(format!("line {}: duplicate key '{k}'", lineno + 1)));
            }
            self.set(k, v.trim())
                .map_err(|e| DafError::Config(format!("line {}: {}", lineno + 1, strip(e))))?;
        }
        self.validate()
    }

    /// Sets a single key, e.g. from a command-line override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let entry = KEYS
            .iter()
            .find(|k| k.name == key)
            .ok_or_else(|| DafError::Config(format!("unknown key '{key}'")))?;
        (entry.set)(self, value)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        KEYS.iter().find(|k| k.name == key).map(|k| (k.get)(self))
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.train.validate()?;
        self.augment.validate()
    }

    /// Canonical text form: one `key = value` line per key.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|k| {
                let v = (k.get)(self);
                if v.is_empty() {
                    format!("{} =\n", k.name)
                } else {
                    format!("{} = {}\n", k.name, v)
                }
            })
            .collect()
    }
}

fn strip(e: DafError) -> String {
    match e {
        DafError::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shipped_defaults_match_builtins() {
        assert_eq!(RunConfig::parse(DEFAULT_CONFIG).unwrap(), RunConfig::builtin());
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_is_in_the_shipped_file() {
        let names: Vec<&str> = DEFAULT_CONFIG
            .lines()
            .filter_map(|l| l.split('#').next()?.split_once('='))
            .map(|(k, _)| k.trim())
            .collect();
        let keys: Vec<&str> = KEYS.iter().map(|k| k.name).collect();
        assert_eq!(names, keys);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        let e = RunConfig::parse("n_tree = 5").unwrap_err().to_string();
        assert!(e.contains("unknown key 'n_tree'"), "{e}");
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
        assert!(RunConfig::parse("theta = abc").is_err());
        assert!(RunConfig::parse("grid = 7").is_err());
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse("grid = 8 # coarse\nwindows = 2, 1:1\nws_cap = 50\nfusion = recalc\nmodel = out.daf").unwrap();
        assert_eq!(c.patch.grid, 8);
        assert_eq!(c.patch.windows, vec![Window::tiled(2), Window::tiled(1)]);
        assert_eq!(c.train.ws_cap, Some(50));
        assert_eq!(c.patch.fusion, FusionMode::Recalc);
        assert_eq!(c.paths.model, Some(PathBuf::from("out.daf")));
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
        assert_eq!(c.get("grid").as_deref(), Some("8"));
    }

    proptest! {
        #[test]
        fn render_round_trips(
            seed in any::<u64>(),
            theta in 1.01f64..4.0,
            trees in 1usize..200,
            ratio in 0.01f64..0.3,
            stride in 1usize..3,
            upstream in prop_oneof![Just("own"), Just("assembled")],
        ) {
            let mut c = RunConfig::default();
            c.set("seed", &seed.to_string()).unwrap();
            c.set("theta", &theta.to_string()).unwrap();
            c.set("n_trees", &trees.to_string()).unwrap();
            c.set("sample_ratio", &ratio.to_string()).unwrap();
            c.set("windows", &format!("4:{stride},1")).unwrap();
            c.set("selection_upstream", upstream).unwrap();
            prop_assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
        }
    }
}
