//! Finite-difference verification of every differentiable op, loss and
//! block, on small seeded inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::Result;
use crate::nn::{forward_block, init_block, BlockSpec, Bound, ParamStore};
use crate::objectives::{evaluate, Context, FeatureExtractor, Objective, StyleTarget, Targets, TermKind};
use crate::tensor::{grad_check, Elem, Tape, Tensor, Var};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = if cfg!(feature = "f64") { 1e-6 } else { 1e-3 };

/// Central-difference step.
pub const GRAD_STEP: f64 = if cfg!(feature = "f64") { 1e-5 } else { 1e-2 };

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < GRAD_TOLERANCE
    }
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One check: a scalar function and its seeded inputs.
struct Case {
    f: CaseFn,
    inputs: Vec<Tensor>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v as Elem
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let d = Uniform::new(lo, hi).expect("valid range");
    Tensor::from_fn(shape.to_vec(), |_| d.sample(rng) as Elem)
}

/// `Σ wᵢ·yᵢ` with fixed random weights, turning any output into a scalar
/// whose gradient reaches every element.
fn project(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn unary(rng: &mut ChaCha8Rng, shape: &[usize], op: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    let x = normal(rng, shape);
    let w = normal(rng, &output_shape(op, &x));
    Case { f: Box::new(move |t, v| {
        let y = op(t, v[0])?;
        project(t, y, &w)
    }), inputs: vec![x] }
}

fn output_shape(op: fn(&mut Tape, Var) -> Result<Var>, x: &Tensor) -> Vec<usize> {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = op(&mut t, v).expect("shape probe");
    t.value(y).shape().to_vec()
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Case {
    let (a, b) = (normal(rng, &[2, 3, 3]), normal(rng, &[2, 3, 3]));
    let shape = {
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let y = op(&mut t, va, vb).expect("shape probe");
        t.value(y).shape().to_vec()
    };
    let w = normal(rng, &shape);
    Case { f: Box::new(move |t, v| {
        let y = op(t, v[0], v[1])?;
        project(t, y, &w)
    }), inputs: vec![a, b] }
}

fn conv_case(rng: &mut ChaCha8Rng, k: usize, stride: usize, pad: usize) -> Case {
    let x = normal(rng, &[2, 6, 6]);
    let kernel = normal(rng, &[3, 2, k, k]);
    let bias = normal(rng, &[3]);
    let out = (6 + 2 * pad - k) / stride + 1;
    let w = normal(rng, &[3, out, out]);
    Case {
        f: Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
            project(t, y, &w)
        }),
        inputs: vec![x, kernel, bias],
    }
}

fn block_case(rng: &mut ChaCha8Rng, spec: BlockSpec, size: usize) -> Result<Case> {
    let mut store = ParamStore::new();
    init_block(&spec, "b", rng, &mut store)?;
    // randomize every parameter so zero-initialized ones are exercised too
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut inputs = vec![normal(rng, &[spec.in_channels(), size, size])];
    for name in &names {
        let shape = store.tensor(name)?.shape().to_vec();
        inputs.push(uniform(rng, &shape, -0.5, 0.5));
    }
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let bound: Bound = names.iter().cloned().zip(vars[1..].iter().copied()).collect();
        let y = forward_block(&mut t, &spec, "b", &bound, vars[0])?;
        t.value(y).shape().to_vec()
    };
    let w = normal(rng, &probe);
    Ok(Case {
        f: Box::new(move |t, v| {
            let bound: Bound = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            let y = forward_block(t, &spec, "b", &bound, v[0])?;
            project(t, y, &w)
        }),
        inputs,
    })
}

/// Loss of an 8×8 image under a one-term objective, scaled so gradients are
/// well above the comparison floor.
fn loss_case(rng: &mut ChaCha8Rng, kind: TermKind, scale: f64) -> Result<Case> {
    let extractor = FeatureExtractor::default();
    let mut targets = Targets::default();
    let style = uniform(rng, &[3, 8, 8], 0.0, 1.0);
    targets.styles.insert("s".into(), StyleTarget::from_image(&extractor, &style)?);
    targets.pixels.insert("p".into(), uniform(rng, &[3, 8, 8], 0.0, 1.0));
    let reference = uniform(rng, &[3, 8, 8], 0.0, 1.0);
    let x = uniform(rng, &[3, 8, 8], 0.0, 1.0);
    let objective = Objective::single(kind);
    Ok(Case {
        f: Box::new(move |t, v| {
            let ctx = Context { extractor: &extractor, targets: &targets, reference: Some(&reference) };
            let e = evaluate(t, &objective, v[0], &ctx)?;
            Ok(t.scale(e.total, scale as Elem))
        }),
        inputs: vec![x],
    })
}

/// Names of every check, in run order.
pub fn suite_names() -> Vec<&'static str> {
    SUITE.iter().map(|(n, _)| *n).collect()
}

type Builder = fn(&mut ChaCha8Rng) -> Result<Case>;

const SUITE: &[(&str, Builder)] = &[
    ("add", |r| Ok(binary(r, |t, a, b| t.add(a, b)))),
    ("sub", |r| Ok(binary(r, |t, a, b| t.sub(a, b)))),
    ("mul", |r| Ok(binary(r, |t, a, b| t.mul(a, b)))),
    ("mse", |r| Ok(binary(r, |t, a, b| t.mse(a, b)))),
    ("scale", |r| Ok(unary(r, &[2, 3, 3], |t, x| Ok(t.scale(x, -1.75))))),
    ("relu", |r| Ok(unary(r, &[2, 3, 3], |t, x| Ok(t.relu(x))))),
    ("abs", |r| Ok(unary(r, &[2, 3, 3], |t, x| Ok(t.abs(x))))),
    ("squash", |r| Ok(unary(r, &[2, 3, 3], |t, x| Ok(t.squash(x))))),
    ("square", |r| Ok(unary(r, &[2, 3, 3], |t, x| Ok(t.square(x))))),
    ("sum", |r| Ok(unary(r, &[2, 3, 3], |t, x| Ok(t.sum(x))))),
    ("mean", |r| Ok(unary(r, &[2, 3, 3], |t, x| Ok(t.mean(x))))),
    ("conv2d k3 s1 p1", |r| Ok(conv_case(r, 3, 1, 1))),
    ("conv2d k3 s2 p1", |r| Ok(conv_case(r, 3, 2, 1))),
    ("conv2d k1 s1 p0", |r| Ok(conv_case(r, 1, 1, 0))),
    ("conv2d k2 s2 p0", |r| Ok(conv_case(r, 2, 2, 0))),
    ("instance_norm", |r| {
        let (x, g, s) = (normal(r, &[3, 4, 4]), normal(r, &[3]), normal(r, &[3]));
        let w = normal(r, &[3, 4, 4]);
        Ok(Case {
            f: Box::new(move |t, v| {
                let y = t.instance_norm(v[0], v[1], v[2], crate::nn::NORM_EPS)?;
                project(t, y, &w)
            }),
            inputs: vec![x, g, s],
        })
    }),
    ("upsample_nearest", |r| Ok(unary(r, &[2, 3, 3], |t, x| t.upsample_nearest(x, 2)))),
    ("gram", |r| Ok(unary(r, &[3, 4, 5], |t, x| t.gram(x)))),
    ("content loss", |r| loss_case(r, TermKind::Content, 100.0)),
    ("style loss", |r| loss_case(r, TermKind::Style("s".into()), 1e4)),
    ("l1 pixel loss", |r| loss_case(r, TermKind::L1Pixel("p".into()), 100.0)),
    ("mse pixel loss", |r| loss_case(r, TermKind::MsePixel("p".into()), 100.0)),
    ("block conv-in-relu", |r| block_case(r, BlockSpec::ConvINRelu { in_ch: 2, out_ch: 3, kernel: 3, stride: 2 }, 6)),
    ("block conv-relu", |r| block_case(r, BlockSpec::ConvRelu { in_ch: 1, out_ch: 3, kernel: 1 }, 4)),
    ("block residual", |r| block_case(r, BlockSpec::Residual { channels: 2, kernel: 3 }, 6)),
    ("block upsample-conv", |r| block_case(r, BlockSpec::UpsampleConv { in_ch: 2, out_ch: 2, kernel: 3, factor: 2 }, 3)),
    ("block output-conv", |r| block_case(r, BlockSpec::OutputConv { in_ch: 2, out_ch: 3, kernel: 3 }, 4)),
    ("block tuning", |r| block_case(r, BlockSpec::Tuning { channels: 2, kernel: 3 }, 4)),
];

/// Runs every check (or those whose name contains `filter`) on `seeds`
/// seeded inputs each.
pub fn gradient_suite(seeds: usize, filter: Option<&str>) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for (i, (name, build)) in SUITE.iter().enumerate() {
        if filter.is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let mut report = OpReport { name: name.to_string(), seeds, max_rel_error: 0.0, checked: 0, skipped: 0 };
        for seed in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64((i as u64) << 32 | seed);
            let case = build(&mut rng)?;
            let r = grad_check(&case.f, &case.inputs, GRAD_STEP)?;
            report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
            report.checked += r.checked;
            report.skipped += r.skipped;
        }
        out.push(report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_three_seeds() {
        for r in gradient_suite(3, None).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn filter_selects_by_substring() {
        let r = gradient_suite(1, Some("conv2d")).unwrap();
        assert_eq!(r.len(), 4);
    }
}
