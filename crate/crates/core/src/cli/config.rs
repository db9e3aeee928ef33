//! Run configuration: a flat TOML file with dotted keys plus `key=value`
//! overrides. Unknown keys and invalid values are collected and reported
//! together.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::losses::{HyperelasticWeights, LossMode};
use crate::nets::NetConfig;
use crate::synth::{FieldKind, SynthSpec};
use crate::train::{FloatMode, RegKind, TrainConfig};

/// Keys under this namespace carry provenance and are ignored on load.
pub const META_PREFIX: &str = "meta.";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Paths {
    pub moving: Option<PathBuf>,
    pub fixed: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub fixed_mask: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TuneMethod {
    Grid,
    Bo,
    /// Run both and record their wall-clock cost side by side.
    Both,
}

impl TuneMethod {
    pub fn name(self) -> &'static str {
        match self {
            TuneMethod::Grid => "grid",
            TuneMethod::Bo => "bo",
            TuneMethod::Both => "both",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneOptions {
    pub method: TuneMethod,
    pub grid: Vec<f64>,
    pub bo_budget: usize,
    pub bo_seed: u64,
    /// Training epochs per optimizer evaluation.
    pub bo_epochs: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            method: TuneMethod::Grid,
            grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            bo_budget: 8,
            bo_seed: 0,
            bo_epochs: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// α used by warp/eval for conditioned checkpoints.
    pub alpha: Option<f64>,
    pub inverse_iterations: usize,
    pub inverse_tolerance: f64,
    pub jacobian_samples: usize,
    pub seed: u64,
    /// Landmark files use 1-based voxel indices.
    pub one_based: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            alpha: None,
            inverse_iterations: 10,
            inverse_tolerance: 1e-4,
            jacobian_samples: 20_000,
            seed: 0,
            one_based: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub paths: Paths,
    pub train: TrainConfig,
    pub tune: TuneOptions,
    pub eval: EvalOptions,
    pub synth: SynthSpec,
    /// Directories aggregated by `report`; empty means `paths.out`.
    pub report_inputs: Vec<PathBuf>,
    /// Baseline-mode weight given explicitly (as opposed to the default).
    pub alpha_given: Option<f64>,
}

/// Flattened `key → value` view of a TOML document.
pub type FlatConfig = BTreeMap<String, toml::Value>;

fn flatten_into(prefix: &str, table: &toml::Table, out: &mut FlatConfig) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten_into(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

pub fn flatten(text: &str) -> Result<FlatConfig, String> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let mut out = FlatConfig::new();
    flatten_into("", &table, &mut out);
    Ok(out)
}

/// Parse a `key=value` override; the value is read as a TOML value and falls
/// back to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("override {s:?} is not of the form key=value"))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(format!("override {s:?} has an empty key"));
    }
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn float(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(f) => Some(*f),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn uint(v: &toml::Value) -> Option<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Some(*i as usize),
        _ => None,
    }
}

fn floats(v: &toml::Value) -> Option<Vec<f64>> {
    v.as_array()?.iter().map(float).collect()
}

fn uints(v: &toml::Value) -> Option<Vec<usize>> {
    v.as_array()?.iter().map(uint).collect()
}

fn triple<T: Copy>(v: Vec<T>) -> Option<[T; 3]> {
    match v.len() {
        1 => Some([v[0]; 3]),
        3 => Some([v[0], v[1], v[2]]),
        _ => None,
    }
}

/// Scalar or 3-element array.
fn uint3(v: &toml::Value) -> Option<[usize; 3]> {
    uint(v).map(|n| [n; 3]).or_else(|| triple(uints(v)?))
}

fn float3(v: &toml::Value) -> Option<[f64; 3]> {
    float(v).map(|n| [n; 3]).or_else(|| triple(floats(v)?))
}

/// Every documented key with its description.
pub const KEYS: &[(&str, &str)] = &[
    ("paths.moving", "moving image header (.vh)"),
    ("paths.fixed", "fixed image header (.vh)"),
    ("paths.mask", "moving-frame mask header (.vh)"),
    ("paths.fixed_mask", "fixed-frame mask header (.vh)"),
    ("paths.landmarks", "landmark CSV mx,my,mz,fx,fy,fz"),
    ("paths.checkpoint", "model checkpoint"),
    ("paths.out", "output directory"),
    ("train.epochs", "training epochs (50000)"),
    ("train.batch_points", "points per epoch (10000)"),
    ("train.learning_rate", "Adam learning rate (1e-4)"),
    ("train.mode", "conditioned | baseline (conditioned)"),
    ("train.alpha", "regularization weight in baseline mode (10)"),
    ("train.reg", "jacobian | hyperelastic | bending (bending)"),
    ("train.seed", "random seed (0)"),
    ("train.checkpoint_every", "epochs between checkpoints; 0 = final only (0)"),
    ("train.float", "f32 | f64 (f32)"),
    ("train.jitter", "jitter samples within voxels (true)"),
    ("train.grad_clip", "maximum global gradient norm (off)"),
    ("hyper.alpha_l", "hyperelastic length weight (1)"),
    ("hyper.alpha_a", "hyperelastic area weight (1)"),
    ("hyper.alpha_v", "hyperelastic volume weight (1)"),
    ("net.main_hidden", "hidden widths of the coordinate network ([256, 256, 256])"),
    ("net.harmonizer_hidden", "hidden widths of the harmonizer ([128, 64, 32])"),
    ("net.omega0", "sine frequency ω₀ (30)"),
    ("net.output_scale", "scale of the initial output layers (0.1)"),
    ("tune.method", "grid | bo | both (grid)"),
    ("tune.grid", "α values for grid search (0, 0.1, …, 1)"),
    ("tune.bo_budget", "objective evaluations for Bayesian optimization (8)"),
    ("tune.bo_seed", "seed of the initial Bayesian-optimization points (0)"),
    ("tune.bo_epochs", "training epochs per Bayesian-optimization evaluation (500)"),
    ("eval.alpha", "α for conditioned checkpoints in warp/eval"),
    ("eval.inverse_iterations", "fixed-point iterations when warping (10)"),
    ("eval.inverse_tolerance", "fixed-point tolerance, normalized units (1e-4)"),
    ("eval.jacobian_samples", "points for Jacobian statistics (20000)"),
    ("eval.seed", "seed for Jacobian sample points (0)"),
    ("eval.one_based", "landmark indices start at 1 (false)"),
    ("synth.dims", "grid size, scalar or [x, y, z] (48)"),
    ("synth.spacing", "voxel spacing in mm, scalar or [x, y, z] (1)"),
    ("synth.kind", "gaussian_bump | sinusoid | affine (gaussian_bump)"),
    ("synth.amplitude", "displacement amplitude, normalized units (0.25)"),
    ("synth.sigma", "Gaussian bump width, normalized units (0.4)"),
    ("synth.translation", "affine translation in voxels ([0, 0, 0])"),
    ("synth.blobs", "texture blob count (40)"),
    ("synth.landmarks", "landmark count (50)"),
    ("synth.seed", "random seed (0)"),
    ("report.inputs", "run directories aggregated by report (paths.out)"),
];

impl RunConfig {
    /// Build from a flattened document; returns every problem found.
    pub fn from_flat(flat: &FlatConfig) -> Result<Self, Vec<String>> {
        let mut cfg = RunConfig::default();
        let mut errors = Vec::new();
        for (key, value) in flat {
            if key.starts_with(META_PREFIX) {
                continue;
            }
            if let Err(e) = cfg.apply(key, value) {
                errors.push(e);
            }
        }
        if cfg.train.mode == LossMode::Conditioned {
            if let Some(a) = cfg.alpha_given {
                if !(0.0..=1.0).contains(&a) {
                    errors.push(format!(
                        "train.alpha = {a}: conditioned mode samples α in [0, 1] and only accepts values in that range"
                    ));
                }
            }
        }
        if let Some(a) = cfg.eval.alpha {
            if !(0.0..=1.0).contains(&a) {
                errors.push(format!("eval.alpha = {a} lies outside [0, 1]"));
            }
        }
        errors.extend(cfg.train.problems());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    fn apply(&mut self, key: &str, v: &toml::Value) -> Result<(), String> {
        let bad = |what: &str| format!("{key}: expected {what}, got {v}");
        let path = || v.as_str().map(PathBuf::from).ok_or_else(|| bad("a path string"));
        let f = || float(v).ok_or_else(|| bad("a number"));
        let u = || uint(v).ok_or_else(|| bad("a non-negative integer"));
        let b = || v.as_bool().ok_or_else(|| bad("true or false"));
        let s = || v.as_str().ok_or_else(|| bad("a string"));
        let t = &mut self.train;
        match key {
            "paths.moving" => self.paths.moving = Some(path()?),
            "paths.fixed" => self.paths.fixed = Some(path()?),
            "paths.mask" => self.paths.mask = Some(path()?),
            "paths.fixed_mask" => self.paths.fixed_mask = Some(path()?),
            "paths.landmarks" => self.paths.landmarks = Some(path()?),
            "paths.checkpoint" => self.paths.checkpoint = Some(path()?),
            "paths.out" => self.paths.out = Some(path()?),
            "train.epochs" => t.epochs = u()?,
            "train.batch_points" => t.batch_points = u()?,
            "train.learning_rate" => t.learning_rate = f()?,
            "train.mode" => {
                t.mode = match s()? {
                    "conditioned" => LossMode::Conditioned,
                    "baseline" => LossMode::Baseline,
                    _ => return Err(bad("conditioned or baseline")),
                }
            }
            "train.alpha" => {
                let a = f()?;
                t.baseline_alpha = a;
                self.alpha_given = Some(a);
            }
            "train.reg" => {
                t.reg = match s()? {
                    "jacobian" => RegKind::Jacobian,
                    "hyperelastic" => RegKind::Hyperelastic,
                    "bending" => RegKind::Bending,
                    _ => return Err(bad("jacobian, hyperelastic or bending")),
                }
            }
            "train.seed" => t.seed = u()? as u64,
            "train.checkpoint_every" => t.checkpoint_every = u()?,
            "train.float" => {
                t.float = match s()? {
                    "f32" => FloatMode::F32,
                    "f64" => FloatMode::F64,
                    _ => return Err(bad("f32 or f64")),
                }
            }
            "train.jitter" => t.jitter = b()?,
            "train.grad_clip" => t.grad_clip = Some(f()?),
            "hyper.alpha_l" => t.hyper.alpha_l = f()?,
            "hyper.alpha_a" => t.hyper.alpha_a = f()?,
            "hyper.alpha_v" => t.hyper.alpha_v = f()?,
            "net.main_hidden" => t.net.main_hidden = uints(v).ok_or_else(|| bad("a list of widths"))?,
            "net.harmonizer_hidden" => t.net.harmonizer_hidden = uints(v).ok_or_else(|| bad("a list of widths"))?,
            "net.omega0" => t.net.omega0 = f()?,
            "net.output_scale" => t.net.output_scale = f()?,
            "tune.method" => {
                self.tune.method = match s()? {
                    "grid" => TuneMethod::Grid,
                    "bo" => TuneMethod::Bo,
                    "both" => TuneMethod::Both,
                    _ => return Err(bad("grid, bo or both")),
                }
            }
            "tune.grid" => self.tune.grid = floats(v).ok_or_else(|| bad("a list of numbers"))?,
            "tune.bo_budget" => self.tune.bo_budget = u()?,
            "tune.bo_seed" => self.tune.bo_seed = u()? as u64,
            "tune.bo_epochs" => self.tune.bo_epochs = u()?,
            "eval.alpha" => self.eval.alpha = Some(f()?),
            "eval.inverse_iterations" => self.eval.inverse_iterations = u()?,
            "eval.inverse_tolerance" => self.eval.inverse_tolerance = f()?,
            "eval.jacobian_samples" => self.eval.jacobian_samples = u()?,
            "eval.seed" => self.eval.seed = u()? as u64,
            "eval.one_based" => self.eval.one_based = b()?,
            "synth.dims" => self.synth.dims = uint3(v).ok_or_else(|| bad("an integer or [x, y, z]"))?,
            "synth.spacing" => self.synth.spacing = float3(v).ok_or_else(|| bad("a number or [x, y, z]"))?,
            "synth.kind" => {
                self.synth.kind = match s()? {
                    "gaussian_bump" => FieldKind::GaussianBump,
                    "sinusoid" => FieldKind::Sinusoid,
                    "affine" => FieldKind::Affine,
                    _ => return Err(bad("gaussian_bump, sinusoid or affine")),
                }
            }
            "synth.amplitude" => self.synth.amplitude = f()?,
            "synth.sigma" => self.synth.bump_sigma = f()?,
            "synth.translation" => self.synth.translation = float3(v).ok_or_else(|| bad("[x, y, z]"))?,
            "synth.blobs" => self.synth.blobs = u()?,
            "synth.landmarks" => self.synth.landmarks = u()?,
            "synth.seed" => self.synth.seed = u()? as u64,
            "report.inputs" => {
                self.report_inputs = v
                    .as_array()
                    .and_then(|a| a.iter().map(|x| x.as_str().map(PathBuf::from)).collect())
                    .ok_or_else(|| bad("a list of directories"))?
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Flat view of every setting, suitable for writing back as a config.
    pub fn to_flat(&self) -> FlatConfig {
        use toml::Value as V;
        let mut m = FlatConfig::new();
        let mut put = |k: &str, v: V| {
            m.insert(k.to_string(), v);
        };
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| V::String(p.display().to_string()));
        for (k, v) in [
            ("paths.moving", &self.paths.moving),
            ("paths.fixed", &self.paths.fixed),
            ("paths.mask", &self.paths.mask),
            ("paths.fixed_mask", &self.paths.fixed_mask),
            ("paths.landmarks", &self.paths.landmarks),
            ("paths.checkpoint", &self.paths.checkpoint),
            ("paths.out", &self.paths.out),
        ] {
            if let Some(v) = p(v) {
                put(k, v);
            }
        }
        let t = &self.train;
        let int = |n: usize| V::Integer(n as i64);
        let ints = |v: &[usize]| V::Array(v.iter().map(|&n| V::Integer(n as i64)).collect());
        let fl = |v: &[f64]| V::Array(v.iter().map(|&n| V::Float(n)).collect());
        put("train.epochs", int(t.epochs));
        put("train.batch_points", int(t.batch_points));
        put("train.learning_rate", V::Float(t.learning_rate));
        put(
            "train.mode",
            V::String(match t.mode {
                LossMode::Conditioned => "conditioned",
                LossMode::Baseline => "baseline",
            }
            .into()),
        );
        // The weight only applies in baseline mode; conditioned runs sample α.
        if t.mode == LossMode::Baseline || self.alpha_given.is_some() {
            put("train.alpha", V::Float(t.baseline_alpha));
        }
        put(
            "train.reg",
            V::String(match t.reg {
                RegKind::Jacobian => "jacobian",
                RegKind::Hyperelastic => "hyperelastic",
                RegKind::Bending => "bending",
            }
            .into()),
        );
        put("train.seed", V::Integer(t.seed as i64));
        put("train.checkpoint_every", int(t.checkpoint_every));
        put(
            "train.float",
            V::String(match t.float {
                FloatMode::F32 => "f32",
                FloatMode::F64 => "f64",
            }
            .into()),
        );
        put("train.jitter", V::Boolean(t.jitter));
        if let Some(c) = t.grad_clip {
            put("train.grad_clip", V::Float(c));
        }
        put("hyper.alpha_l", V::Float(t.hyper.alpha_l));
        put("hyper.alpha_a", V::Float(t.hyper.alpha_a));
        put("hyper.alpha_v", V::Float(t.hyper.alpha_v));
        put("net.main_hidden", ints(&t.net.main_hidden));
        put("net.harmonizer_hidden", ints(&t.net.harmonizer_hidden));
        put("net.omega0", V::Float(t.net.omega0));
        put("net.output_scale", V::Float(t.net.output_scale));
        put("tune.method", V::String(self.tune.method.name().into()));
        put("tune.grid", fl(&self.tune.grid));
        put("tune.bo_budget", int(self.tune.bo_budget));
        put("tune.bo_seed", V::Integer(self.tune.bo_seed as i64));
        put("tune.bo_epochs", int(self.tune.bo_epochs));
        if let Some(a) = self.eval.alpha {
            put("eval.alpha", V::Float(a));
        }
        put("eval.inverse_iterations", int(self.eval.inverse_iterations));
        put("eval.inverse_tolerance", V::Float(self.eval.inverse_tolerance));
        put("eval.jacobian_samples", int(self.eval.jacobian_samples));
        put("eval.seed", V::Integer(self.eval.seed as i64));
        put("eval.one_based", V::Boolean(self.eval.one_based));
        let s = &self.synth;
        put("synth.dims", ints(&s.dims));
        put("synth.spacing", fl(&s.spacing));
        put(
            "synth.kind",
            V::String(match s.kind {
                FieldKind::GaussianBump => "gaussian_bump",
                FieldKind::Sinusoid => "sinusoid",
                FieldKind::Affine => "affine",
            }
            .into()),
        );
        put("synth.amplitude", V::Float(s.amplitude));
        put("synth.sigma", V::Float(s.bump_sigma));
        put("synth.translation", fl(&s.translation));
        put("synth.blobs", int(s.blobs));
        put("synth.landmarks", int(s.landmarks));
        put("synth.seed", V::Integer(s.seed as i64));
        if !self.report_inputs.is_empty() {
            put(
                "report.inputs",
                V::Array(self.report_inputs.iter().map(|p| V::String(p.display().to_string())).collect()),
            );
        }
        m
    }

    pub fn hyper(&self) -> HyperelasticWeights {
        self.train.hyper
    }

    pub fn net(&self) -> &NetConfig {
        &self.train.net
    }
}

/// Render a flat map as TOML with one dotted key per line.
pub fn render_flat(flat: &FlatConfig) -> String {
    flat.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_and_nested_forms_agree() {
        let a = flatten("train.epochs = 5\n[net]\nomega0 = 20\n").unwrap();
        let b = flatten("[train]\nepochs = 5\n[net]\nomega0 = 20.0\n").unwrap();
        let ca = RunConfig::from_flat(&a).unwrap();
        let cb = RunConfig::from_flat(&b).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(ca.train.epochs, 5);
        assert_eq!(ca.train.net.omega0, 20.0);
    }

    #[test]
    fn all_errors_are_listed() {
        let flat = flatten("train.epochs = -1\nbogus.key = 1\ntrain.mode = \"weird\"\nnet.omega0 = \"x\"\n").unwrap();
        let errs = RunConfig::from_flat(&flat).unwrap_err();
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("bogus.key")));
    }

    #[test]
    fn conditioned_mode_rejects_large_alpha() {
        let mut flat = FlatConfig::new();
        for s in ["train.mode=conditioned", "train.alpha=10"] {
            let (k, v) = parse_override(s).unwrap();
            flat.insert(k, v);
        }
        assert!(RunConfig::from_flat(&flat).is_err());
        let (k, v) = parse_override("train.mode=baseline").unwrap();
        flat.insert(k, v);
        assert_eq!(RunConfig::from_flat(&flat).unwrap().train.baseline_alpha, 10.0);
    }

    #[test]
    fn overrides_parse_values_and_bare_strings() {
        assert_eq!(parse_override("a.b=3").unwrap().1, toml::Value::Integer(3));
        assert_eq!(parse_override("a.b = bending").unwrap().1, toml::Value::String("bending".into()));
        assert_eq!(
            parse_override("net.main_hidden=[8, 8]").unwrap().1,
            toml::Value::Array(vec![toml::Value::Integer(8), toml::Value::Integer(8)])
        );
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn flat_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.paths.out = Some(PathBuf::from("/tmp/x"));
        cfg.train.epochs = 17;
        cfg.eval.alpha = Some(0.25);
        let text = render_flat(&cfg.to_flat());
        let back = RunConfig::from_flat(&flatten(&text).unwrap()).unwrap();
        assert_eq!(back.train, cfg.train);
        assert_eq!(back.paths, cfg.paths);
        assert_eq!(back.eval, cfg.eval);
        assert_eq!(back.synth, cfg.synth);
        assert_eq!(back.tune, cfg.tune);
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let defaults = RunConfig::default().to_flat();
        for (k, _) in KEYS {
            if k.starts_with("paths.") || *k == "eval.alpha" || *k == "train.grad_clip" || *k == "report.inputs" || *k == "train.alpha" {
                continue;
            }
            assert!(defaults.contains_key(*k), "{k} missing from to_flat");
        }
        for k in defaults.keys() {
            assert!(KEYS.iter().any(|(d, _)| d == k), "{k} undocumented");
        }
    }
}
