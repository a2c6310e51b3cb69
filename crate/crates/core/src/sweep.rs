//! Objective-space evaluation: uniform and per-block α sweeps, fixed-net
//! and image-interpolation baselines, Pareto fronts and CSV export.

use std::fmt::Write as _;
use std::path::Path;

use crate::dynet::{train_main, AlphaVector, Batches, DynamicNet, TrainConfig, TrainLog};
use crate::error::{Error, Result};
use crate::objectives::{evaluate_values, Context, Objective, Term, TermKind};
use crate::tensor::{Elem, Tensor};

/// Default upper bound on the number of grid combinations.
pub const GRID_CAP: usize = 10_000;

/// Image id used for records averaged over a whole evaluation set.
pub const MEAN_ID: &str = "mean";

/// A named network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor) -> Self {
        Sample { id: id.into(), image }
    }
}

/// The two loss axes of the objective space, `A + λ·B`, plus any further
/// terms to report alongside them. For stylization tasks `A` is the content
/// loss and `B` the style loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub content: TermKind,
    pub style: TermKind,
    pub extra: Vec<TermKind>,
    pub lambda: f64,
}

impl Probe {
    pub fn new(content: TermKind, style: TermKind, lambda: f64) -> Self {
        Probe { content, style, extra: Vec::new(), lambda }
    }

    fn objective(&self) -> Result<Objective> {
        let mut terms = vec![
            Term { kind: self.content.clone(), weight: 1.0 },
            Term { kind: self.style.clone(), weight: 0.0 },
        ];
        terms.extend(self.extra.iter().map(|k| Term { kind: k.clone(), weight: 0.0 }));
        Objective::new(terms)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRecord {
    pub alpha: Vec<f64>,
    pub content_loss: f64,
    pub style_loss: f64,
    /// Values of the probe's extra terms, labelled.
    pub extra: Vec<(String, f64)>,
    /// `content_loss + λ·style_loss` at the probe's λ.
    pub total_at_lambda: f64,
    pub image_id: String,
}

/// Per-insertion-point α values; the grid is their Cartesian product.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    lists: Vec<Vec<f64>>,
}

impl GridSpec {
    pub fn new(lists: Vec<Vec<f64>>) -> Result<Self> {
        if lists.is_empty() || lists.iter().any(Vec::is_empty) {
            return Err(Error::Usage("every insertion point needs at least one grid value".into()));
        }
        if lists.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Usage("grid values must be finite".into()));
        }
        Ok(GridSpec { lists })
    }

    /// The same list for each of `blocks` insertion points.
    pub fn uniform(blocks: usize, values: Vec<f64>) -> Result<Self> {
        GridSpec::new(vec![values; blocks])
    }

    pub fn lists(&self) -> &[Vec<f64>] {
        &self.lists
    }

    /// Number of combinations, saturating on overflow.
    pub fn size(&self) -> usize {
        self.lists.iter().fold(1usize, |acc, l| acc.saturating_mul(l.len()))
    }

    /// Combinations in lexicographic order: the last block varies fastest.
    pub fn combinations(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::with_capacity(self.lists.len())];
        for list in &self.lists {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    list.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

/// Losses of one output image against the probe.
fn score(output: &Tensor, input: &Tensor, probe: &Probe, ctx: &Context) -> Result<(f64, f64, Vec<f64>)> {
    let objective = probe.objective()?;
    let ctx = Context { reference: Some(input), ..*ctx };
    let (_, terms) = evaluate_values(&objective, output, &ctx)?;
    Ok((terms[0], terms[1], terms[2..].to_vec()))
}

fn record(probe: &Probe, alpha: Vec<f64>, image_id: String, losses: (f64, f64, Vec<f64>)) -> SweepRecord {
    let (content, style, extra) = losses;
    SweepRecord {
        alpha,
        content_loss: content,
        style_loss: style,
        extra: probe.extra.iter().map(TermKind::label).zip(extra).collect(),
        total_at_lambda: content + probe.lambda * style,
        image_id,
    }
}

/// Record for `output`, the network's response to `sample` at `alpha`.
pub fn score_output(output: &Tensor, sample: &Sample, alpha: &AlphaVector, probe: &Probe, ctx: &Context) -> Result<SweepRecord> {
    let losses = score(output, &sample.image, probe, ctx)?;
    Ok(record(probe, alpha.values().to_vec(), sample.id.clone(), losses))
}

/// Record for one sample at one α.
pub fn evaluate_point(net: &DynamicNet, sample: &Sample, alpha: &AlphaVector, probe: &Probe, ctx: &Context) -> Result<SweepRecord> {
    score_output(&net.forward(&sample.image, alpha)?, sample, alpha, probe, ctx)
}

/// Mean of per-sample records sharing one α, labelled [`MEAN_ID`].
pub fn mean_record(records: &[SweepRecord]) -> Result<SweepRecord> {
    let first = records.first().ok_or_else(|| Error::Usage("cannot average zero records".into()))?;
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&SweepRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(SweepRecord {
        alpha: first.alpha.clone(),
        content_loss: mean(&|r| r.content_loss),
        style_loss: mean(&|r| r.style_loss),
        extra: first
            .extra
            .iter()
            .enumerate()
            .map(|(i, (label, _))| (label.clone(), mean(&|r| r.extra[i].1)))
            .collect(),
        total_at_lambda: mean(&|r| r.total_at_lambda),
        image_id: MEAN_ID.into(),
    })
}

/// Runs `f` over `items` on up to `threads` scoped workers, keeping input
/// order in the output.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("sweep worker panicked")?);
        }
        Ok(out)
    })
}

/// One record per (α, sample), α-major, with every insertion point at the
/// same α.
pub fn sweep_uniform(
    net: &DynamicNet,
    samples: &[Sample],
    alphas: &[f64],
    probe: &Probe,
    ctx: &Context,
    threads: usize,
) -> Result<Vec<SweepRecord>> {
    let jobs: Vec<(AlphaVector, &Sample)> = alphas
        .iter()
        .map(|&a| AlphaVector::new(vec![a; net.blocks()]))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flat_map(|a| samples.iter().map(move |s| (a.clone(), s)))
        .collect();
    parallel_map(&jobs, threads, |(a, s)| evaluate_point(net, s, a, probe, ctx))
}

/// Per-α means of [`sweep_uniform`]'s records, in α order.
pub fn sweep_uniform_mean(
    net: &DynamicNet,
    samples: &[Sample],
    alphas: &[f64],
    probe: &Probe,
    ctx: &Context,
    threads: usize,
) -> Result<Vec<SweepRecord>> {
    if samples.is_empty() {
        return Err(Error::Usage("sweep needs at least one sample".into()));
    }
    sweep_uniform(net, samples, alphas, probe, ctx, threads)?
        .chunks(samples.len())
        .map(mean_record)
        .collect()
}

/// One sample-averaged record per grid combination, in lexicographic order.
pub fn grid_search(
    net: &DynamicNet,
    samples: &[Sample],
    grid: &GridSpec,
    cap: usize,
    probe: &Probe,
    ctx: &Context,
    threads: usize,
) -> Result<Vec<SweepRecord>> {
    if grid.lists().len() != net.blocks() {
        return Err(Error::Usage(format!(
            "grid has {} lists but the network has {} insertion points",
            grid.lists().len(),
            net.blocks()
        )));
    }
    if grid.size() > cap {
        return Err(Error::Usage(format!("grid has {} combinations, cap is {cap}", grid.size())));
    }
    if samples.is_empty() {
        return Err(Error::Usage("grid search needs at least one sample".into()));
    }
    let combos = grid.combinations();
    parallel_map(&combos, threads, |combo| {
        let alpha = AlphaVector::new(combo.clone())?;
        let per_sample = samples
            .iter()
            .map(|s| evaluate_point(net, s, &alpha, probe, ctx))
            .collect::<Result<Vec<_>>>()?;
        mean_record(&per_sample)
    })
}

/// A backbone trained conventionally for one objective, with its
/// sample-averaged working point.
#[derive(Clone, Debug)]
pub struct FixedNet {
    pub net: DynamicNet,
    pub log: TrainLog,
    pub record: SweepRecord,
}

/// Trains `net`'s backbone alone under `objective` and scores the result on
/// `validation`. The record's α is all zeros.
pub fn train_fixed(
    mut net: DynamicNet,
    data: &mut Batches,
    objective: &Objective,
    ctx: &Context,
    cfg: &TrainConfig,
    validation: &[Sample],
    probe: &Probe,
) -> Result<FixedNet> {
    let log = train_main(&mut net, data, objective, ctx, cfg)?;
    let zeros = AlphaVector::zeros(net.blocks());
    let per_sample = validation
        .iter()
        .map(|s| {
            let out = net.forward_main(&s.image)?;
            Ok(record(probe, zeros.values().to_vec(), s.id.clone(), score(&out, &s.image, probe, ctx)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let record = mean_record(&per_sample)?;
    Ok(FixedNet { net, log, record })
}

/// Pixelwise `(1−α)·A + α·B`.
pub fn image_interp(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("cannot blend {:?} with {:?}", a.shape(), b.shape())));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| ((1.0 - alpha) * x as f64 + alpha * y as f64) as Elem)
            .collect(),
    )
}

/// Sample-averaged records for blends of two networks' main outputs. The
/// record's α holds the blend weight at every position.
pub fn interp_sweep(
    net_a: &DynamicNet,
    net_b: &DynamicNet,
    samples: &[Sample],
    alphas: &[f64],
    probe: &Probe,
    ctx: &Context,
) -> Result<Vec<SweepRecord>> {
    let outputs = samples
        .iter()
        .map(|s| Ok((net_a.forward_main(&s.image)?, net_b.forward_main(&s.image)?)))
        .collect::<Result<Vec<_>>>()?;
    alphas
        .iter()
        .map(|&a| {
            let per_sample = samples
                .iter()
                .zip(&outputs)
                .map(|(s, (oa, ob))| {
                    let blended = image_interp(oa, ob, a)?;
                    Ok(record(probe, vec![a; net_a.blocks()], s.id.clone(), score(&blended, &s.image, probe, ctx)?))
                })
                .collect::<Result<Vec<_>>>()?;
            mean_record(&per_sample)
        })
        .collect()
}

/// Records not strictly dominated in (content, style), in input order.
/// Records with identical coordinates are all kept.
pub fn pareto_front(records: &[SweepRecord]) -> Vec<SweepRecord> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&records[i], &records[j]);
        a.content_loss.total_cmp(&b.content_loss).then(a.style_loss.total_cmp(&b.style_loss))
    });
    let mut keep = vec![false; records.len()];
    // best style seen among strictly smaller content, and within the
    // current equal-content run
    let mut best_before = f64::INFINITY;
    let mut k = 0;
    while k < order.len() {
        let c = records[order[k]].content_loss;
        let run_end = order[k..].iter().position(|&i| records[i].content_loss != c).map_or(order.len(), |p| k + p);
        let run_min = records[order[k]].style_loss;
        for &i in &order[k..run_end] {
            let s = records[i].style_loss;
            keep[i] = s == run_min && s < best_before;
        }
        best_before = best_before.min(run_min);
        k = run_end;
    }
    records.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.clone()).collect()
}

/// Every point of `b` is matched or beaten in both coordinates by some
/// point of `a`.
pub fn weakly_dominates(a: &[SweepRecord], b: &[SweepRecord]) -> bool {
    b.iter()
        .all(|q| a.iter().any(|p| p.content_loss <= q.content_loss && p.style_loss <= q.style_loss))
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros dropped,
/// exponent form outside `[1e-4, 1e9)`.
pub fn format_g9(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{v:.*}", (8 - exp) as usize))
    }
}

/// CSV text for `records`: alpha columns (one per insertion point), the two
/// loss axes, the λ-total and the image id.
pub fn to_csv(records: &[SweepRecord]) -> Result<String> {
    let blocks = records.first().map_or(3, |r| r.alpha.len());
    if records.iter().any(|r| r.alpha.len() != blocks) {
        return Err(Error::Usage("records disagree on the number of alpha values".into()));
    }
    if let Some(r) = records.iter().find(|r| r.image_id.contains([',', '"', '\n', '\r'])) {
        return Err(Error::Usage(format!("image id {:?} cannot be written unquoted", r.image_id)));
    }
    let mut out = String::new();
    for i in 0..blocks {
        write!(out, "alpha_{i},").expect("writing to a String");
    }
    out.push_str("content_loss,style_loss,total_at_lambda,image_id\n");
    for r in records {
        for a in &r.alpha {
            out.push_str(&format_g9(*a));
            out.push(',');
        }
        writeln!(
            out,
            "{},{},{},{}",
            format_g9(r.content_loss),
            format_g9(r.style_loss),
            format_g9(r.total_at_lambda),
            r.image_id
        )
        .expect("writing to a String");
    }
    Ok(out)
}

pub fn export_csv(records: &[SweepRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(records)?).map_err(|e| Error::io(path, e))
}

/// Spearman rank correlation, with ties given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Usage("spearman needs two equally long series of length ≥ 2".into()));
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}
