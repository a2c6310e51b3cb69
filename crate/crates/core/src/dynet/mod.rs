//! The dynamic network: a frozen main network whose latents at each
//! insertion point are shifted by `α·ψ(z)`, with ψ a trained tuning-block.

mod adam;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use train::{train_main, train_tuning, Batches, StepLog, TrainConfig, TrainLog};

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{forward_block, init_backbone, init_tuning, main_prefix, tuning_prefix, BackboneSpec, Bound, ParamStore};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Salt mixed into the seed for tuning-block initialization, so θ and ψ
/// draw from different streams.
const TUNING_SEED_SALT: u64 = 0x7475_6e69_6e67;

/// One α per insertion point. Any finite value is allowed; values outside
/// `[0, 1]` extrapolate.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaVector(Vec<f64>);

impl AlphaVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Usage(format!("alpha values must be finite, got {v}")));
        }
        Ok(AlphaVector(values))
    }

    pub fn uniform(blocks: usize, value: f64) -> Self {
        AlphaVector(vec![value; blocks])
    }

    pub fn zeros(blocks: usize) -> Self {
        Self::uniform(blocks, 0.0)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl fmt::Display for AlphaVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|a| a.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

/// Latent values around one insertion point.
#[derive(Clone, Debug)]
pub struct Latent {
    /// `z`, the main-network latent arriving at the insertion point.
    pub base: Tensor,
    /// `ψ(z)`.
    pub residual: Tensor,
    /// `z + α·ψ(z)`, passed on to the next main block.
    pub shifted: Tensor,
}

/// Tape handles recorded by [`DynamicNet::record`].
#[derive(Clone, Debug)]
pub struct Recorded {
    pub output: Var,
    /// `(z, ψ(z), z + α·ψ(z))` per insertion point; empty for the pure
    /// main network.
    pub latents: Vec<(Var, Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicNet {
    spec: BackboneSpec,
    theta: ParamStore,
    psi: ParamStore,
}

impl DynamicNet {
    /// Fresh network; θ is He-initialized and every ψ outputs zeros.
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let theta = init_backbone(&spec, seed)?;
        let psi = init_tuning(&spec, seed ^ TUNING_SEED_SALT)?;
        Ok(DynamicNet { spec, theta, psi })
    }

    /// Assembles a network from stored parameters, checking that every
    /// parameter the spec needs is present with the right shape.
    pub fn from_parts(spec: BackboneSpec, theta: ParamStore, psi: ParamStore) -> Result<Self> {
        let reference = DynamicNet::new(spec.clone(), 0)?;
        for (what, want, got) in [("θ", &reference.theta, &theta), ("ψ", &reference.psi, &psi)] {
            if want.len() != got.len() {
                return Err(Error::Config(format!("{what} has {} tensors, spec needs {}", got.len(), want.len())));
            }
            for (name, p) in want.iter() {
                let t = got.tensor(name)?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Config(format!(
                        "{what} `{name}` has shape {:?}, spec needs {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
            }
        }
        Ok(DynamicNet { spec, theta, psi })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn theta(&self) -> &ParamStore {
        &self.theta
    }

    pub fn psi(&self) -> &ParamStore {
        &self.psi
    }

    pub fn theta_mut(&mut self) -> &mut ParamStore {
        &mut self.theta
    }

    pub fn psi_mut(&mut self) -> &mut ParamStore {
        &mut self.psi
    }

    /// Number of insertion points (and tuning-blocks).
    pub fn blocks(&self) -> usize {
        self.spec.insertion_points.len()
    }

    pub fn save(&self, theta_path: impl AsRef<Path>, psi_path: impl AsRef<Path>) -> Result<()> {
        self.theta.save(theta_path)?;
        self.psi.save(psi_path)
    }

    pub fn load(spec: BackboneSpec, theta_path: impl AsRef<Path>, psi_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_parts(spec, ParamStore::load(theta_path)?, ParamStore::load(psi_path)?)
    }

    /// Records a forward pass. With `alpha == None` the tuning-blocks are
    /// not part of the graph at all (the pure main network).
    pub fn record(
        &self,
        tape: &mut Tape,
        theta: &Bound,
        psi: &Bound,
        x: Var,
        alpha: Option<&AlphaVector>,
    ) -> Result<Recorded> {
        if let Some(a) = alpha {
            if a.len() != self.blocks() {
                return Err(Error::Usage(format!(
                    "alpha has {} entries but the network has {} insertion points",
                    a.len(),
                    self.blocks()
                )));
            }
        }
        let tuning = self.spec.tuning_blocks();
        let mut latents = Vec::new();
        let mut z = x;
        let mut next = 0;
        for (i, block) in self.spec.blocks.iter().enumerate() {
            z = forward_block(tape, block, &main_prefix(i), theta, z)?;
            if let Some(a) = alpha {
                if self.spec.insertion_points.get(next) == Some(&(i + 1)) {
                    let r = forward_block(tape, &tuning[next], &tuning_prefix(next), psi, z)?;
                    let scaled = tape.scale(r, a.values()[next] as Elem);
                    let shifted = tape.add(z, scaled)?;
                    latents.push((z, r, shifted));
                    z = shifted;
                    next += 1;
                }
            }
        }
        Ok(Recorded { output: z, latents })
    }

    fn run(&self, x: &Tensor, alpha: Option<&AlphaVector>) -> Result<(Tape, Recorded)> {
        let mut tape = Tape::new();
        let theta = self.theta.bind(&mut tape, false);
        let psi = self.psi.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let rec = self.record(&mut tape, &theta, &psi, xv, alpha)?;
        Ok((tape, rec))
    }

    /// Output for `x` with every latent shifted by `α^l·ψ^l(z)`.
    pub fn forward(&self, x: &Tensor, alpha: &AlphaVector) -> Result<Tensor> {
        let (tape, rec) = self.run(x, Some(alpha))?;
        Ok(tape.value(rec.output).clone())
    }

    /// Output of the main network alone.
    pub fn forward_main(&self, x: &Tensor) -> Result<Tensor> {
        let (tape, rec) = self.run(x, None)?;
        Ok(tape.value(rec.output).clone())
    }

    /// Latent values at every insertion point for the given α.
    pub fn latents(&self, x: &Tensor, alpha: &AlphaVector) -> Result<Vec<Latent>> {
        let (tape, rec) = self.run(x, Some(alpha))?;
        Ok(rec
            .latents
            .iter()
            .map(|&(b, r, s)| Latent {
                base: tape.value(b).clone(),
                residual: tape.value(r).clone(),
                shifted: tape.value(s).clone(),
            })
            .collect())
    }
}
