//! Run configuration: a flat TOML document of documented keys. Missing keys
//! take the defaults of the chosen task; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::data::{RegressionKind, Rgb, TextureKind};
use crate::dynet::TrainConfig;
use crate::error::{Error, Result};
use crate::sweep::GRID_CAP;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Content + λ·style, with λ₀ for the main network and λ₁ for tuning.
    Stylize,
    /// Content + λ·style towards one texture in phase 1, another in phase 2.
    TwoStyles,
    /// Like `two-styles`, with the second texture at twice the first's scale.
    TwoScales,
    /// Pointwise 1D regression towards t₀ in phase 1 and t₁ in phase 2.
    Regress1d,
    /// Heavy style weight in phase 1, pure content in phase 2.
    FailureCase,
}

impl TaskKind {
    pub fn is_image(self) -> bool {
        self != TaskKind::Regress1d
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Stylize => "stylize",
            TaskKind::TwoStyles => "two-styles",
            TaskKind::TwoScales => "two-scales",
            TaskKind::Regress1d => "regress1d",
            TaskKind::FailureCase => "failure-case",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    /// Seeds network initialization and batch order. Overridden by the
    /// `DYNANET_SEED` environment variable in the CLI.
    pub seed: u64,
    /// Seeds the content images.
    pub data_seed: u64,
    pub image_size: usize,
    pub train_images: usize,
    pub val_images: usize,

    /// Style weight of the phase-1 objective.
    pub lambda0: f64,
    /// Style weight of the phase-2 objective.
    pub lambda1: f64,
    /// Content weight of both objectives.
    pub content_weight: f64,
    /// λ used for the `total_at_lambda` column of sweep output.
    pub eval_lambda: f64,

    pub style_kind: TextureKind,
    pub style_scale: usize,
    pub style_palette: [Rgb; 2],
    pub style_seed: u64,
    /// Second texture (`two-styles` only; `two-scales` derives it).
    pub style2_kind: TextureKind,
    pub style2_scale: usize,
    pub style2_palette: [Rgb; 2],

    pub regress_kind: RegressionKind,
    pub regress_points: usize,

    pub main_steps: usize,
    pub tuning_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,

    /// Uniform α values for `sweep`.
    pub sweep_alphas: Vec<f64>,
    /// Per-block α values for `grid` (the same list at every block).
    pub grid_values: Vec<f64>,
    pub grid_cap: usize,
    /// Style weights for `train-fixed`.
    pub fixed_lambdas: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl RunConfig {
    /// Fully defaulted configuration for `task`.
    pub fn preset(task: TaskKind) -> Self {
        let mut c = RunConfig {
            task,
            seed: 0,
            data_seed: 1,
            image_size: 64,
            train_images: 16,
            val_images: 8,
            lambda0: 1.0,
            lambda1: 100.0,
            content_weight: 1.0,
            eval_lambda: 10.0,
            style_kind: TextureKind::Checker,
            style_scale: 4,
            style_palette: [[0.1, 0.1, 0.4], [0.95, 0.8, 0.2]],
            style_seed: 7,
            style2_kind: TextureKind::Stripes,
            style2_scale: 8,
            style2_palette: [[0.6, 0.05, 0.1], [0.9, 0.9, 0.85]],
            regress_kind: RegressionKind::ConstantPair,
            regress_points: 64,
            main_steps: 2000,
            tuning_steps: 1000,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            sweep_alphas: linspace(0.0, 1.0, 9),
            grid_values: linspace(0.0, 1.0, 10),
            grid_cap: GRID_CAP,
            fixed_lambdas: vec![3.0, 10.0, 30.0],
        };
        match task {
            TaskKind::Stylize => {}
            TaskKind::TwoStyles | TaskKind::TwoScales => {
                c.lambda0 = 3000.0;
                c.lambda1 = 3000.0;
                c.style_scale = 8;
                c.sweep_alphas = vec![-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0];
                if task == TaskKind::TwoScales {
                    c.style_kind = TextureKind::Stripes;
                    c.style2_kind = TextureKind::Stripes;
                    c.style2_scale = 16;
                    c.style2_palette = c.style_palette;
                }
            }
            TaskKind::Regress1d => {
                c.main_steps = 300;
                c.tuning_steps = 300;
                c.batch_size = 1;
                c.lr = 1e-2;
                c.eval_lambda = 1.0;
                c.sweep_alphas = linspace(0.0, 1.0, 11);
                c.fixed_lambdas = vec![];
            }
            TaskKind::FailureCase => {
                c.lambda0 = 1000.0;
                c.lambda1 = 0.0;
                c.sweep_alphas = linspace(0.0, 1.0, 5);
            }
        }
        c
    }

    /// Parses `text`, filling every missing key from the preset of its
    /// `task` (default `stylize`), then applies `overrides` given as
    /// `key=value` with TOML values.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            // bare words are taken as strings so `task=regress1d` works
            let parsed: toml::Value = match format!("v = {}", value.trim()).parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").expect("key just parsed"),
                Err(_) => toml::Value::String(value.trim().to_string()),
            };
            table.insert(key.to_string(), parsed);
        }
        let task: TaskKind = match table.get("task") {
            Some(v) => v.clone().try_into().map_err(|e| Error::Config(format!("task: {e}")))?,
            None => TaskKind::Stylize,
        };
        let mut merged = toml::Table::try_from(RunConfig::preset(task)).map_err(|e| Error::Config(format!("{e}")))?;
        let derived_scale = task == TaskKind::TwoScales && !table.contains_key("style2_scale");
        for (k, v) in table {
            merged.insert(k, v);
        }
        let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if derived_scale {
            cfg.style2_scale = 2 * cfg.style_scale;
        }
        if task == TaskKind::TwoScales {
            cfg.style2_kind = cfg.style_kind;
            cfg.style2_palette = cfg.style_palette;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The effective configuration as TOML, every key present.
    pub fn dump(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.task.is_image() && (self.image_size < 16 || self.image_size % 4 != 0) {
            return bad(format!("image_size must be a multiple of 4 and ≥ 16, got {}", self.image_size));
        }
        if self.train_images == 0 || self.val_images == 0 {
            return bad("train_images and val_images must be ≥ 1".into());
        }
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("content_weight", self.content_weight),
            ("eval_lambda", self.eval_lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and ≥ 0, got {v}"));
            }
        }
        for (name, s) in [("style_scale", self.style_scale), ("style2_scale", self.style2_scale)] {
            if s == 0 {
                return bad(format!("{name} must be ≥ 1"));
            }
        }
        if self.style_palette.iter().chain(&self.style2_palette).flatten().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("palette colors must lie in [0, 1]".into());
        }
        if self.regress_points < 16 {
            return bad(format!("regress_points must be ≥ 16, got {}", self.regress_points));
        }
        if self.sweep_alphas.is_empty() || self.grid_values.is_empty() {
            return bad("sweep_alphas and grid_values must be non-empty".into());
        }
        if self.sweep_alphas.iter().chain(&self.grid_values).any(|a| !a.is_finite()) {
            return bad("alpha values must be finite".into());
        }
        if self.fixed_lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("fixed_lambdas must be finite and ≥ 0".into());
        }
        self.train_config(self.main_steps)?.validate()?;
        self.train_config(self.tuning_steps)?.validate()
    }

    /// Optimizer settings for a phase of `steps` steps.
    pub fn train_config(&self, steps: usize) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            steps,
            batch_size: self.batch_size,
            seed: self.seed,
        })
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(TaskKind::Stylize)
    }
}
