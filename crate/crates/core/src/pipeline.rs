//! Turns a [`RunConfig`] into data, objectives and trained networks, and
//! fixes the on-disk layout of a run directory:
//!
//! ```text
//! data/train_NNN.ppm  data/val_NNN.ppm  data/style0.ppm  data/style1.ppm
//! data/regress.dynw                      (regress1d instead of images)
//! model/theta.dynw  model/psi.dynw  model/config.toml
//! fixed/lambda_<λ>.dynw
//! ```

use std::path::{Path, PathBuf};

use crate::config::{RunConfig, TaskKind};
use crate::data::{gen_content, gen_texture, load_ppm, make_regression_task, save_ppm, Regression1DTask, TextureSpec};
use crate::dynet::{train_main, train_tuning, Batches, DynamicNet, TrainLog};
use crate::error::{Error, Result};
use crate::nn::{BackboneSpec, ParamStore};
use crate::objectives::{Context, FeatureExtractor, Objective, StyleTarget, Targets, Term, TermKind};
use crate::sweep::{train_fixed, FixedNet, Probe, Sample};
use crate::tensor::Tensor;

/// Offset between the content-image streams of training and validation.
const VAL_SEED_OFFSET: u64 = 0x5EED_0F_7A1;
/// Salt separating the phase-2 batch order from phase 1's.
const TUNING_BATCH_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

pub const STYLE0: &str = "style0";
pub const STYLE1: &str = "style1";
pub const TARGET0: &str = "t0";
pub const TARGET1: &str = "t1";

/// Raw inputs and targets of a task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskData {
    Images {
        train: Vec<Tensor>,
        validation: Vec<Sample>,
        /// Phase-1 and phase-2 style images.
        styles: [Tensor; 2],
    },
    Regression(Regression1DTask),
}

pub fn val_id(i: usize) -> String {
    format!("val_{i:03}")
}

fn texture(cfg: &RunConfig, second: bool) -> Result<Tensor> {
    let spec = if second {
        TextureSpec { kind: cfg.style2_kind, scale: cfg.style2_scale, palette: cfg.style2_palette, seed: cfg.style_seed }
    } else {
        TextureSpec { kind: cfg.style_kind, scale: cfg.style_scale, palette: cfg.style_palette, seed: cfg.style_seed }
    };
    gen_texture(&spec, cfg.image_size)
}

/// Generates a task's data; a pure function of the configuration.
pub fn generate(cfg: &RunConfig) -> Result<TaskData> {
    if cfg.task == TaskKind::Regress1d {
        return Ok(TaskData::Regression(make_regression_task(cfg.regress_kind, cfg.regress_points)?));
    }
    let train = gen_content(cfg.train_images, cfg.image_size, cfg.data_seed)?;
    let validation = gen_content(cfg.val_images, cfg.image_size, cfg.data_seed.wrapping_add(VAL_SEED_OFFSET))?
        .into_iter()
        .enumerate()
        .map(|(i, img)| Sample::new(val_id(i), img))
        .collect();
    let s0 = texture(cfg, false)?;
    let s1 = match cfg.task {
        TaskKind::Stylize | TaskKind::FailureCase => s0.clone(),
        _ => texture(cfg, true)?,
    };
    Ok(TaskData::Images { train, validation, styles: [s0, s1] })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `data` under `dir` (normally `<workdir>/data`).
pub fn write_data(data: &TaskData, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    match data {
        TaskData::Images { train, validation, styles } => {
            for (i, img) in train.iter().enumerate() {
                save_ppm(img, dir.join(format!("train_{i:03}.ppm")))?;
            }
            for s in validation {
                save_ppm(&s.image, dir.join(format!("{}.ppm", s.id)))?;
            }
            save_ppm(&styles[0], dir.join(format!("{STYLE0}.ppm")))?;
            save_ppm(&styles[1], dir.join(format!("{STYLE1}.ppm")))
        }
        TaskData::Regression(t) => {
            let mut store = ParamStore::new();
            store.insert("inputs", t.inputs.clone(), false)?;
            store.insert(TARGET0, t.t0.clone(), false)?;
            store.insert(TARGET1, t.t1.clone(), false)?;
            store.save(dir.join("regress.dynw"))
        }
    }
}

/// Reads the data [`write_data`] stored for `cfg`.
pub fn read_data(cfg: &RunConfig, dir: &Path) -> Result<TaskData> {
    if cfg.task == TaskKind::Regress1d {
        let store = ParamStore::load(dir.join("regress.dynw"))?;
        return Ok(TaskData::Regression(Regression1DTask {
            inputs: store.tensor("inputs")?.clone(),
            t0: store.tensor(TARGET0)?.clone(),
            t1: store.tensor(TARGET1)?.clone(),
        }));
    }
    let train = (0..cfg.train_images)
        .map(|i| load_ppm(dir.join(format!("train_{i:03}.ppm"))))
        .collect::<Result<Vec<_>>>()?;
    let validation = (0..cfg.val_images)
        .map(|i| Ok(Sample::new(val_id(i), load_ppm(dir.join(format!("{}.ppm", val_id(i))))?)))
        .collect::<Result<Vec<_>>>()?;
    let styles = [load_ppm(dir.join(format!("{STYLE0}.ppm")))?, load_ppm(dir.join(format!("{STYLE1}.ppm")))?];
    let expected = [3, cfg.image_size, cfg.image_size];
    if let Some(bad) = train.iter().chain(validation.iter().map(|s| &s.image)).find(|t| t.shape() != expected) {
        return Err(Error::Config(format!("stored image has shape {:?}, config expects {expected:?}", bad.shape())));
    }
    Ok(TaskData::Images { train, validation, styles })
}

/// Everything training and evaluation need for one task.
#[derive(Clone, Debug)]
pub struct Setup {
    pub config: RunConfig,
    pub spec: BackboneSpec,
    pub extractor: FeatureExtractor,
    pub targets: Targets,
    pub train: Vec<Tensor>,
    pub validation: Vec<Sample>,
    pub objective0: Objective,
    pub objective1: Objective,
    pub probe: Probe,
}

impl Setup {
    pub fn new(config: &RunConfig, data: TaskData) -> Result<Self> {
        config.validate()?;
        let extractor = FeatureExtractor::default();
        let mut targets = Targets::default();
        let term = |kind: TermKind, weight: f64| Term { kind, weight };
        let (spec, train, validation, objective0, objective1, probe) = match data {
            TaskData::Regression(task) => {
                targets.pixels.insert(TARGET0.into(), task.t0);
                targets.pixels.insert(TARGET1.into(), task.t1);
                let mse = |t: &str| TermKind::MsePixel(t.into());
                (
                    BackboneSpec::regression(),
                    vec![task.inputs.clone()],
                    vec![Sample::new("grid", task.inputs)],
                    Objective::single(mse(TARGET0)),
                    Objective::single(mse(TARGET1)),
                    Probe::new(mse(TARGET0), mse(TARGET1), config.eval_lambda),
                )
            }
            TaskData::Images { train, validation, styles: [s0, s1] } => {
                targets.styles.insert(STYLE0.into(), StyleTarget::from_image(&extractor, &s0)?);
                targets.styles.insert(STYLE1.into(), StyleTarget::from_image(&extractor, &s1)?);
                let content_style = |lambda: f64, style: &str| {
                    Objective::new(vec![
                        term(TermKind::Content, config.content_weight),
                        term(TermKind::Style(style.into()), lambda),
                    ])
                };
                let mut probe = Probe::new(TermKind::Content, TermKind::Style(STYLE1.into()), config.eval_lambda);
                if matches!(config.task, TaskKind::TwoStyles | TaskKind::TwoScales) {
                    probe.extra.push(TermKind::Style(STYLE0.into()));
                }
                (
                    BackboneSpec::stylization(),
                    train,
                    validation,
                    content_style(config.lambda0, STYLE0)?,
                    content_style(config.lambda1, STYLE1)?,
                    probe,
                )
            }
        };
        Ok(Setup { config: config.clone(), spec, extractor, targets, train, validation, objective0, objective1, probe })
    }

    /// Generates the data in memory and builds the setup.
    pub fn generate(config: &RunConfig) -> Result<Self> {
        Setup::new(config, generate(config)?)
    }

    pub fn context(&self) -> Context<'_> {
        Context { extractor: &self.extractor, targets: &self.targets, reference: None }
    }

    /// Objective of a conventionally trained network at style weight λ.
    pub fn fixed_objective(&self, lambda: f64) -> Result<Objective> {
        if self.objective0.terms().len() != 2 {
            return Err(Error::Config(format!("task {:?} has no style weight to fix", self.config.task)));
        }
        self.objective0.reweighted(|i, w| if i == 1 { lambda } else { w })
    }

    /// Phase 1 from a fresh network.
    pub fn train_main(&self) -> Result<(DynamicNet, TrainLog)> {
        let mut net = DynamicNet::new(self.spec.clone(), self.config.seed)?;
        let cfg = self.config.train_config(self.config.main_steps)?;
        let mut batches = Batches::new(self.train.clone(), cfg.batch_size, cfg.seed)?;
        let log = train_main(&mut net, &mut batches, &self.objective0, &self.context(), &cfg)?;
        Ok((net, log))
    }

    /// Phase 2: freezes θ and trains ψ.
    pub fn train_tuning(&self, net: &mut DynamicNet) -> Result<TrainLog> {
        net.theta_mut().freeze("*")?;
        let cfg = self.config.train_config(self.config.tuning_steps)?;
        let mut batches = Batches::new(self.train.clone(), cfg.batch_size, cfg.seed ^ TUNING_BATCH_SALT)?;
        train_tuning(net, &mut batches, &self.objective1, &self.context(), &cfg)
    }

    /// A backbone trained for `content + λ·style0`, seeded like phase 1.
    pub fn train_fixed(&self, lambda: f64) -> Result<FixedNet> {
        let net = DynamicNet::new(self.spec.clone(), self.config.seed)?;
        let cfg = self.config.train_config(self.config.main_steps)?;
        let mut batches = Batches::new(self.train.clone(), cfg.batch_size, cfg.seed)?;
        train_fixed(net, &mut batches, &self.fixed_objective(lambda)?, &self.context(), &cfg, &self.validation, &self.probe)
    }
}

/// Paths inside a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn theta(&self) -> PathBuf {
        self.root.join("model").join("theta.dynw")
    }

    pub fn psi(&self) -> PathBuf {
        self.root.join("model").join("psi.dynw")
    }

    pub fn model_config(&self) -> PathBuf {
        self.root.join("model").join("config.toml")
    }

    pub fn fixed(&self, lambda: f64) -> PathBuf {
        self.root.join("fixed").join(format!("lambda_{lambda}.dynw"))
    }

    /// Saves θ, ψ and the effective configuration.
    pub fn save_model(&self, net: &DynamicNet, cfg: &RunConfig) -> Result<()> {
        let dir = self.root.join("model");
        create_dir(&dir)?;
        net.save(self.theta(), self.psi())?;
        let path = self.model_config();
        std::fs::write(&path, cfg.dump()).map_err(|e| Error::io(&path, e))
    }

    pub fn load_model(&self, spec: &BackboneSpec) -> Result<DynamicNet> {
        DynamicNet::load(spec.clone(), self.theta(), self.psi())
    }

    pub fn save_fixed(&self, lambda: f64, net: &DynamicNet) -> Result<()> {
        create_dir(&self.root.join("fixed"))?;
        net.theta().save(self.fixed(lambda))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: TaskKind) -> RunConfig {
        RunConfig { image_size: 16, train_images: 2, val_images: 2, ..RunConfig::preset(task) }
    }

    #[test]
    fn data_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        for task in [TaskKind::Stylize, TaskKind::TwoScales, TaskKind::Regress1d] {
            let cfg = small(task);
            let data = generate(&cfg).unwrap();
            let sub = dir.path().join(format!("{task:?}"));
            write_data(&data, &sub).unwrap();
            assert_eq!(read_data(&cfg, &sub).unwrap(), data);
        }
    }

    #[test]
    fn validation_differs_from_training() {
        let TaskData::Images { train, validation, .. } = generate(&small(TaskKind::Stylize)).unwrap() else {
            panic!("image task")
        };
        assert!(!train[0].bit_eq(&validation[0].image));
        assert_eq!(validation[1].id, "val_001");
    }

    #[test]
    fn objectives_follow_the_config() {
        let setup = Setup::generate(&small(TaskKind::Stylize)).unwrap();
        let weights = |o: &Objective| o.terms().iter().map(|t| t.weight).collect::<Vec<_>>();
        assert_eq!(weights(&setup.objective0), vec![1.0, 1.0]);
        assert_eq!(weights(&setup.objective1), vec![1.0, 100.0]);
        assert_eq!(weights(&setup.fixed_objective(30.0).unwrap()), vec![1.0, 30.0]);
        let fc = Setup::generate(&small(TaskKind::FailureCase)).unwrap();
        assert_eq!(weights(&fc.objective1), vec![1.0, 0.0]);
    }
}
