//! Loss terms and weighted-sum objectives.
//!
//! Perceptual features come from a small convolutional extractor with
//! fixed, seeded random weights. Style is compared through channel Gram
//! matrices of all three extractor layers, content through the layer-2
//! feature maps.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{init_block, BlockSpec, ParamStore};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Seed of the extractor weights. Changing it changes every loss value.
pub const EXTRACTOR_SEED: u64 = 0x00D1_4A3E_7F0C_A1E5;

/// Extractor layer (0-based) compared by the content loss.
pub const CONTENT_LAYER: usize = 1;

const LAYERS: [(usize, usize, usize); 3] = [(3, 8, 1), (8, 16, 2), (16, 16, 2)];

/// Three conv+relu layers (3→8 s1, 8→16 s2, 16→16 s2, kernel 3), never
/// trained.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    params: ParamStore,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(EXTRACTOR_SEED)
    }
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (i, &(in_ch, out_ch, _)) in LAYERS.iter().enumerate() {
            let spec = BlockSpec::ConvRelu { in_ch, out_ch, kernel: 3 };
            init_block(&spec, &format!("feat.{i}"), &mut rng, &mut params).expect("valid extractor layer");
        }
        params.freeze("*").expect("extractor has parameters");
        FeatureExtractor { params }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Records the three feature maps of a 3×H×W image on `tape`.
    pub fn extract(&self, tape: &mut Tape, img: Var) -> Result<[Var; 3]> {
        let (c, h, w) = tape.value(img).chw()?;
        if c != 3 || h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "feature extractor needs a 3×H×W image with H, W ≥ 8 and divisible by 4, got {c}×{h}×{w}"
            )));
        }
        let bound = self.params.bind(tape, false);
        let mut x = img;
        let mut out = [img; 3];
        for (i, &(_, _, stride)) in LAYERS.iter().enumerate() {
            let wv = bound.get(&format!("feat.{i}.conv.weight"))?;
            let bv = bound.get(&format!("feat.{i}.conv.bias"))?;
            let y = tape.conv2d(x, wv, bv, stride, 1)?;
            x = tape.relu(y);
            out[i] = x;
        }
        Ok(out)
    }

    /// Feature maps of `img`, off-tape.
    pub fn features(&self, img: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let v = tape.constant(img.clone());
        let f = self.extract(&mut tape, v)?;
        Ok(f.iter().map(|&v| tape.value(v).clone()).collect())
    }
}

/// Gram matrices of a style image, one per extractor layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTarget {
    grams: Vec<Tensor>,
}

impl StyleTarget {
    pub fn from_image(extractor: &FeatureExtractor, img: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let v = tape.constant(img.clone());
        let feats = extractor.extract(&mut tape, v)?;
        let mut grams = Vec::with_capacity(3);
        for f in feats {
            let g = tape.gram(f)?;
            grams.push(tape.value(g).clone());
        }
        Ok(StyleTarget { grams })
    }

    pub fn grams(&self) -> &[Tensor] {
        &self.grams
    }
}

/// Off-tape Gram matrix of a C×H×W feature map.
pub fn gram(feature: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(feature.clone());
    let g = tape.gram(v)?;
    Ok(tape.value(g).clone())
}

/// Sum over extractor layers of the mean squared Gram difference.
pub fn style_loss(tape: &mut Tape, extractor: &FeatureExtractor, img: Var, target: &StyleTarget) -> Result<Var> {
    let feats = extractor.extract(tape, img)?;
    style_loss_from_features(tape, &feats, target)
}

fn style_loss_from_features(tape: &mut Tape, feats: &[Var; 3], target: &StyleTarget) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (f, tg) in feats.iter().zip(&target.grams) {
        let g = tape.gram(*f)?;
        let t = tape.constant(tg.clone());
        let l = tape.mse(g, t)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    Ok(total.expect("extractor has layers"))
}

/// Mean squared difference between layer-2 features of `img` and `reference`.
pub fn content_loss(tape: &mut Tape, extractor: &FeatureExtractor, img: Var, reference: Var) -> Result<Var> {
    let fi = extractor.extract(tape, img)?[CONTENT_LAYER];
    let fr = extractor.extract(tape, reference)?[CONTENT_LAYER];
    tape.mse(fi, fr)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TermKind {
    /// Perceptual distance to the network input.
    Content,
    /// Gram distance to a named style target.
    Style(String),
    /// Mean absolute pixel difference to a named pixel target.
    L1Pixel(String),
    /// Mean squared pixel difference to a named pixel target.
    MsePixel(String),
}

impl TermKind {
    pub fn label(&self) -> String {
        match self {
            TermKind::Content => "content".into(),
            TermKind::Style(t) => format!("style:{t}"),
            TermKind::L1Pixel(t) => format!("l1:{t}"),
            TermKind::MsePixel(t) => format!("mse:{t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub kind: TermKind,
    pub weight: f64,
}

/// `O = Σ wᵢ·Lᵢ` with non-negative finite weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    terms: Vec<Term>,
}

impl Objective {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("objective needs at least one term".into()));
        }
        if let Some(t) = terms.iter().find(|t| !t.weight.is_finite() || t.weight < 0.0) {
            return Err(Error::Config(format!("weight of {} must be finite and ≥ 0, got {}", t.kind.label(), t.weight)));
        }
        Ok(Objective { terms })
    }

    /// `L_content + λ·L_style(style)`.
    pub fn content_style(lambda: f64, style: &str) -> Result<Self> {
        Objective::new(vec![
            Term { kind: TermKind::Content, weight: 1.0 },
            Term { kind: TermKind::Style(style.into()), weight: lambda },
        ])
    }

    pub fn single(kind: TermKind) -> Self {
        Objective { terms: vec![Term { kind, weight: 1.0 }] }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Same terms with each weight replaced by `f(old)`.
    pub fn reweighted(&self, f: impl Fn(usize, f64) -> f64) -> Result<Self> {
        Objective::new(
            self.terms
                .iter()
                .enumerate()
                .map(|(i, t)| Term { kind: t.kind.clone(), weight: f(i, t.weight) })
                .collect(),
        )
    }
}

/// Named targets an objective may refer to.
#[derive(Clone, Debug, Default)]
pub struct Targets {
    pub styles: BTreeMap<String, StyleTarget>,
    pub pixels: BTreeMap<String, Tensor>,
}

/// Everything needed to score one output.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub extractor: &'a FeatureExtractor,
    pub targets: &'a Targets,
    /// Content reference, normally the network input.
    pub reference: Option<&'a Tensor>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub total: Var,
    pub terms: Vec<Var>,
}

/// Recorded objective value and every term. Terms are added in declared
/// order; zero-weight terms are computed and reported but left out of the
/// total.
pub fn evaluate(tape: &mut Tape, objective: &Objective, output: Var, ctx: &Context) -> Result<Evaluation> {
    let mut terms = Vec::with_capacity(objective.terms.len());
    let mut total: Option<Var> = None;
    let mut features: Option<[Var; 3]> = None;
    for term in &objective.terms {
        let value = match &term.kind {
            TermKind::Content => {
                let r = ctx.reference.ok_or_else(|| Error::MissingTarget("content reference".into()))?;
                let rv = tape.constant(r.clone());
                let fo = match features {
                    Some(f) => f,
                    None => *features.insert(ctx.extractor.extract(tape, output)?),
                };
                let fr = ctx.extractor.extract(tape, rv)?;
                tape.mse(fo[CONTENT_LAYER], fr[CONTENT_LAYER])?
            }
            TermKind::Style(name) => {
                let t = ctx.targets.styles.get(name).ok_or_else(|| Error::MissingTarget(format!("style:{name}")))?;
                let fo = match features {
                    Some(f) => f,
                    None => *features.insert(ctx.extractor.extract(tape, output)?),
                };
                style_loss_from_features(tape, &fo, t)?
            }
            TermKind::L1Pixel(name) | TermKind::MsePixel(name) => {
                let t = ctx.targets.pixels.get(name).ok_or_else(|| Error::MissingTarget(format!("pixels:{name}")))?;
                let tv = tape.constant(t.clone());
                let d = tape.sub(output, tv)?;
                let e = if matches!(term.kind, TermKind::L1Pixel(_)) { tape.abs(d) } else { tape.square(d) };
                tape.mean(e)
            }
        };
        terms.push(value);
        if term.weight != 0.0 {
            let weighted = tape.scale(value, term.weight as Elem);
            total = Some(match total {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => {
            let zero = tape.constant(Tensor::scalar(0.0));
            tape.scale(zero, 0.0)
        }
    };
    Ok(Evaluation { total, terms })
}

/// Off-tape values `(total, per-term)`.
pub fn evaluate_values(objective: &Objective, output: &Tensor, ctx: &Context) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let v = tape.constant(output.clone());
    let e = evaluate(&mut tape, objective, v, ctx)?;
    Ok((
        tape.value(e.total).item() as f64,
        e.terms.iter().map(|&t| tape.value(t).item() as f64).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![3, size, size], |_| rng.random::<f64>() as Elem)
    }

    #[test]
    fn feature_shapes_follow_conv_arithmetic() {
        let ex = FeatureExtractor::default();
        let f = ex.features(&image(1, 64)).unwrap();
        let shapes: Vec<_> = f.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 64, 64], vec![16, 32, 32], vec![16, 16, 16]]);
        assert!(ex.features(&image(1, 6)).is_err());
        assert!(ex.features(&Tensor::zeros(vec![3, 10, 10])).is_err());
    }

    #[test]
    fn features_are_deterministic_and_zero_for_zero_input() {
        let ex = FeatureExtractor::default();
        let a = ex.features(&image(4, 16)).unwrap();
        let b = FeatureExtractor::default().features(&image(4, 16)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
        let z = ex.features(&Tensor::zeros(vec![3, 8, 8])).unwrap();
        assert!(z.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn gram_cases() {
        assert!(gram(&Tensor::zeros(vec![3, 2, 2])).unwrap().data().iter().all(|&v| v == 0.0));
        let g = gram(&Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.5, 1.0, 1.0, 2.0]);

        // reversing the spatial order leaves the Gram matrix unchanged
        let f = image(2, 4);
        let mut flipped = f.clone();
        for c in 0..3 {
            flipped.data_mut()[c * 16..(c + 1) * 16].reverse();
        }
        assert!(gram(&f).unwrap().max_abs_diff(&gram(&flipped).unwrap()) < 1e-6);
    }

    #[test]
    fn style_loss_zero_at_own_target() {
        let ex = FeatureExtractor::default();
        let img = image(3, 16);
        let target = StyleTarget::from_image(&ex, &img).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(img);
        let l = style_loss(&mut tape, &ex, v, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let other = tape.constant(image(4, 16));
        let l = style_loss(&mut tape, &ex, other, &target).unwrap();
        assert!(tape.value(l).item() > 0.0);
    }

    #[test]
    fn content_loss_symmetry_and_zero() {
        let ex = FeatureExtractor::default();
        let mut tape = Tape::new();
        let a = tape.constant(image(5, 8));
        let b = tape.constant(image(6, 8));
        let ab = content_loss(&mut tape, &ex, a, b).unwrap();
        let ba = content_loss(&mut tape, &ex, b, a).unwrap();
        let aa = content_loss(&mut tape, &ex, a, a).unwrap();
        assert_eq!(tape.value(ab).item(), tape.value(ba).item());
        assert_eq!(tape.value(aa).item(), 0.0);
    }

    #[test]
    fn objective_validation() {
        assert!(Objective::new(vec![]).is_err());
        assert!(Objective::content_style(-1.0, "s").is_err());
        assert!(Objective::content_style(f64::NAN, "s").is_err());
    }

    #[test]
    fn zero_weight_term_is_reported_not_summed() {
        let ex = FeatureExtractor::default();
        let img = image(7, 8);
        let mut targets = Targets::default();
        targets.styles.insert("s".into(), StyleTarget::from_image(&ex, &image(8, 8)).unwrap());
        let ctx = Context { extractor: &ex, targets: &targets, reference: Some(&img) };
        let out = image(9, 8);
        let obj = Objective::content_style(0.0, "s").unwrap();
        let (total, terms) = evaluate_values(&obj, &out, &ctx).unwrap();
        assert_eq!(total, terms[0]);
        assert!(terms[1] > 0.0);
    }

    #[test]
    fn missing_targets() {
        let ex = FeatureExtractor::default();
        let targets = Targets::default();
        let ctx = Context { extractor: &ex, targets: &targets, reference: None };
        let out = image(1, 8);
        for obj in [
            Objective::single(TermKind::Content),
            Objective::single(TermKind::Style("x".into())),
            Objective::single(TermKind::MsePixel("t".into())),
        ] {
            assert!(matches!(evaluate_values(&obj, &out, &ctx), Err(Error::MissingTarget(_))));
        }
    }
}
