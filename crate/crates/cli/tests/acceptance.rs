//! Acceptance suite: one PASS/FAIL line per criterion, with the measured
//! values next to the thresholds.
//!
//! Run a subset by number: `cargo test --test acceptance -- 4 9`.
//! `DYNANET_ACCEPTANCE_FULL=1` trains the stylization nets for the full
//! preset step counts instead of the shortened default.

use std::cell::OnceCell;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use dynanet::config::{RunConfig, TaskKind};
use dynanet::data::{to_rgb_bytes, transition_count};
use dynanet::dynet::{AlphaVector, DynamicNet};
use dynanet::nn::ParamStore;
use dynanet::objectives::{evaluate_values, Objective};
use dynanet::pipeline::{generate, write_data, RunPaths, Setup};
use dynanet::selfcheck::{gradient_suite, GRAD_TOLERANCE};
use dynanet::sweep::{
    format_g9, grid_search, pareto_front, spearman, sweep_uniform, sweep_uniform_mean, to_csv, weakly_dominates,
    GridSpec, SweepRecord,
};
use dynanet::tensor::{Elem, Tensor};
use dynanet_server::SessionState;

const SEEDS: [u64; 3] = [0, 1, 2];
const SHORT_STEPS: usize = 300;
const FULL_ENV: &str = "DYNANET_ACCEPTANCE_FULL";

struct Trained {
    setup: Setup,
    net: DynamicNet,
    theta_before_tuning: ParamStore,
    train_secs: f64,
}

fn train(cfg: &RunConfig) -> Trained {
    let start = Instant::now();
    let setup = Setup::generate(cfg).unwrap();
    let (mut net, _) = setup.train_main().unwrap();
    let theta_before_tuning = net.theta().clone();
    setup.train_tuning(&mut net).unwrap();
    Trained { setup, net, theta_before_tuning, train_secs: start.elapsed().as_secs_f64() }
}

fn stylize_config(seed: u64) -> RunConfig {
    let base = RunConfig { seed, ..RunConfig::preset(TaskKind::Stylize) };
    if std::env::var_os(FULL_ENV).is_some() {
        base
    } else {
        RunConfig { main_steps: SHORT_STEPS, tuning_steps: SHORT_STEPS, ..base }
    }
}

#[derive(Default)]
struct Fixtures {
    stylize: OnceCell<Vec<Trained>>,
    regress: OnceCell<Trained>,
    two_scales: OnceCell<Trained>,
}

impl Fixtures {
    fn stylize(&self) -> &[Trained] {
        self.stylize.get_or_init(|| SEEDS.iter().map(|&s| train(&stylize_config(s))).collect())
    }

    fn regress(&self) -> &Trained {
        self.regress.get_or_init(|| train(&RunConfig::preset(TaskKind::Regress1d)))
    }

    fn two_scales(&self) -> &Trained {
        self.two_scales.get_or_init(|| train(&RunConfig::preset(TaskKind::TwoScales)))
    }
}

/// Outcome of one criterion: pass flag and a one-line measurement summary.
type Verdict = (bool, String);

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Validation-mean objective value at a uniform α.
fn objective_at(t: &Trained, objective: &Objective, alpha: f64) -> f64 {
    let a = AlphaVector::uniform(t.net.blocks(), alpha);
    let total: f64 = t
        .setup
        .validation
        .iter()
        .map(|s| {
            let out = t.net.forward(&s.image, &a).unwrap();
            let ctx = dynanet::objectives::Context { reference: Some(&s.image), ..t.setup.context() };
            evaluate_values(objective, &out, &ctx).unwrap().0
        })
        .sum();
    total / t.setup.validation.len() as f64
}

/// Seed-averaged validation-mean sweep over uniform α.
fn seed_mean_sweep(nets: &[Trained], alphas: &[f64]) -> Vec<(f64, f64)> {
    let per_seed: Vec<Vec<SweepRecord>> = nets
        .iter()
        .map(|t| sweep_uniform_mean(&t.net, &t.setup.validation, alphas, &t.setup.probe, &t.setup.context(), 1).unwrap())
        .collect();
    (0..alphas.len())
        .map(|i| {
            let n = per_seed.len() as f64;
            (
                per_seed.iter().map(|r| r[i].content_loss).sum::<f64>() / n,
                per_seed.iter().map(|r| r[i].style_loss).sum::<f64>() / n,
            )
        })
        .collect()
}

fn gradient_suite_passes(_: &Fixtures) -> Verdict {
    let start = Instant::now();
    let reports = gradient_suite(10, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    (
        failed.is_empty() && secs < 60.0,
        format!(
            "{} checks x 10 seeds, worst {} = {:.2e} (< {GRAD_TOLERANCE:e}), failed {failed:?}, {secs:.1} s (< 60 s)",
            reports.len(),
            worst.name,
            worst.max_rel_error
        ),
    )
}

fn zero_alpha_is_identity(fx: &Fixtures) -> Verdict {
    let t = &fx.stylize()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let size = t.setup.config.image_size;
    let zeros = AlphaVector::zeros(t.net.blocks());
    let start = Instant::now();
    let identical = (0..20)
        .filter(|_| {
            let x = Tensor::from_fn(vec![3, size, size], |_| rng.random::<f64>() as Elem);
            t.net.forward(&x, &zeros).unwrap().bit_eq(&t.net.forward_main(&x).unwrap())
        })
        .count();
    (identical == 20, format!("{identical}/20 random inputs bit-identical, {:.1} s", start.elapsed().as_secs_f64()))
}

fn latents_are_affine(fx: &Fixtures) -> Verdict {
    let t = &fx.stylize()[0];
    let k = t.net.blocks();
    let mut worst = 0.0f64;
    for s in &t.setup.validation {
        for m in 0..k {
            let at = |a: f64| {
                let mut v = vec![0.0; k];
                v[m] = a;
                t.net.latents(&s.image, &AlphaVector::new(v).unwrap()).unwrap().swap_remove(m).shifted
            };
            let (z0, zh, z1) = (at(0.0), at(0.5), at(1.0));
            let scale = z1.data().iter().chain(z0.data()).fold(0.0f64, |m, &v| m.max((v as f64).abs()));
            for i in 0..zh.len() {
                let mid = 0.5 * z0.data()[i] as f64 + 0.5 * z1.data()[i] as f64;
                worst = worst.max((zh.data()[i] as f64 - mid).abs() / scale.max(1e-30));
            }
        }
    }
    let tol = 4.0 * Elem::EPSILON as f64;
    (worst <= tol, format!("max |z(0.5) - (z(0)+z(1))/2| / max|z| = {worst:.2e} (<= {tol:.1e}) over {k} points x 8 images"))
}

fn one_d_oracle(fx: &Fixtures) -> Verdict {
    let start = Instant::now();
    let t = fx.regress();
    let x = &t.setup.validation[0].image;
    let means: Vec<f64> = linspace(0.0, 1.0, 11)
        .iter()
        .map(|&a| t.net.forward(x, &AlphaVector::uniform(t.net.blocks(), a)).unwrap().mean())
        .collect();
    let span = 0.6;
    let (m0, m1) = (means[0], means[10]);
    let drops: Vec<f64> = means.windows(2).filter(|w| w[1] < w[0]).map(|w| w[0] - w[1]).collect();
    let secs = start.elapsed().as_secs_f64();
    let ok = (m0 - 0.2).abs() <= 0.05 * span
        && (m1 - 0.8).abs() <= 0.05 * span
        && drops.len() <= 1
        && drops.iter().all(|&d| d < 0.01 * span)
        && secs < 120.0;
    (
        ok,
        format!(
            "mean(0) = {m0:.4} (0.2 ± 0.03), mean(1) = {m1:.4} (0.8 ± 0.03), {} decreases {drops:?}, {secs:.1} s",
            drops.len()
        ),
    )
}

fn stylization_trade_off(fx: &Fixtures) -> Verdict {
    let start = Instant::now();
    let alphas = linspace(0.0, 1.0, 9);
    let curve = seed_mean_sweep(fx.stylize(), &alphas);
    let c: Vec<f64> = curve.iter().map(|p| p.0).collect();
    let s: Vec<f64> = curve.iter().map(|p| p.1).collect();
    let (rc, rs) = (spearman(&alphas, &c).unwrap(), spearman(&alphas, &s).unwrap());
    let cfg = &fx.stylize()[0].setup.config;
    let (main, tuning) = (cfg.main_steps, cfg.tuning_steps);
    let secs = start.elapsed().as_secs_f64() + fx.stylize().iter().map(|t| t.train_secs).sum::<f64>();
    (
        rc >= 0.9 && rs <= -0.9 && secs < 900.0,
        format!(
            "rho(content) = {rc:.3} (>= 0.9), rho(style) = {rs:.3} (<= -0.9); content {} -> {}, style {} -> {}; 3 seeds x {main}+{tuning} steps, {secs:.0} s (< 900 s)",
            format_g9(c[0]),
            format_g9(c[8]),
            format_g9(s[0]),
            format_g9(s[8]),
        ),
    )
}

fn tuning_is_effective(fx: &Fixtures) -> Verdict {
    let reduction = |t: &Trained| {
        let (o0, o1) = (objective_at(t, &t.setup.objective1, 0.0), objective_at(t, &t.setup.objective1, 1.0));
        1.0 - o1 / o0
    };
    let r1d = reduction(fx.regress());
    let rst: Vec<f64> = fx.stylize().iter().map(reduction).collect();
    let ok = r1d >= 0.2 && rst.iter().all(|&r| r >= 0.2);
    let pct: Vec<String> = rst.iter().map(|r| format!("{:.1}%", 100.0 * r)).collect();
    (ok, format!("O1 reduction at alpha=1: 1D {:.1}%, stylization per seed [{}] (>= 20%)", 100.0 * r1d, pct.join(", ")))
}

fn fixed_net_correspondence(fx: &Fixtures) -> Verdict {
    let start = Instant::now();
    let nets = fx.stylize();
    let alphas = linspace(0.0, 1.0, 21);
    let curve = seed_mean_sweep(nets, &alphas);
    let mut ok = true;
    let mut parts = Vec::new();
    for lambda in [3.0, 10.0, 30.0] {
        let fixed: f64 = nets
            .iter()
            .map(|t| {
                let r = t.setup.train_fixed(lambda).unwrap().record;
                r.content_loss + lambda * r.style_loss
            })
            .sum::<f64>()
            / nets.len() as f64;
        let (best_alpha, best) = alphas
            .iter()
            .zip(&curve)
            .map(|(&a, &(c, s))| (a, c + lambda * s))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let ratio = best / fixed;
        ok &= (ratio - 1.0).abs() <= 0.25;
        parts.push(format!("lambda={lambda}: best alpha {best_alpha:.2} ratio {ratio:.3}"));
    }
    (ok, format!("{} (within 1 ± 0.25), {:.0} s", parts.join("; "), start.elapsed().as_secs_f64()))
}

fn grid_front_dominates(fx: &Fixtures) -> Verdict {
    let t = &fx.stylize()[0];
    let values = linspace(0.0, 1.0, 5);
    let grid = GridSpec::uniform(t.net.blocks(), values.clone()).unwrap();
    let ctx = t.setup.context();
    let records = grid_search(&t.net, &t.setup.validation, &grid, 10_000, &t.setup.probe, &ctx, 1).unwrap();
    let uniform = sweep_uniform_mean(&t.net, &t.setup.validation, &values, &t.setup.probe, &ctx, 1).unwrap();
    let (gf, uf) = (pareto_front(&records), pareto_front(&uniform));
    let ok = weakly_dominates(&gf, &uf);
    (ok, format!("{} grid points, grid front {} points weakly dominates uniform front {} points: {ok}", records.len(), gf.len(), uf.len()))
}

fn extrapolation_is_safe(fx: &Fixtures) -> Verdict {
    let t = fx.two_scales();
    let images: Vec<&Tensor> = t.setup.validation.iter().map(|s| &s.image).collect();
    let outputs = |a: f64| -> Vec<Tensor> {
        let alpha = AlphaVector::uniform(t.net.blocks(), a);
        images.iter().map(|x| t.net.forward(x, &alpha).unwrap()).collect()
    };
    let in_range = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0]
        .iter()
        .all(|&a| outputs(a).iter().all(|o| o.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))));
    let probe = [-0.25, 0.0, 0.25, 0.5, 0.75, 1.0, 1.25];
    let counts: Vec<f64> = probe.iter().map(|&a| transition_count(&outputs(a)).unwrap()).collect();
    let inner = &counts[1..6];
    let sign = (inner[4] - inner[0]).signum();
    let monotone = sign != 0.0 && inner.windows(2).all(|w| (w[1] - w[0]) * sign >= 0.0);
    let persists = (counts[1] - counts[0]) * sign > 0.0 && (counts[6] - counts[5]) * sign > 0.0;
    let shown: Vec<String> = probe.iter().zip(&counts).map(|(a, c)| format!("{a}: {c:.2}")).collect();
    (
        in_range && monotone && persists,
        format!("outputs finite in [0,1]: {in_range}; transitions/row {{{}}}; monotone on [0,1]: {monotone}; persists at -0.25/1.25: {persists}", shown.join(", ")),
    )
}

/// Runs a pipeline under `dir` and returns every produced file's bytes.
fn pipeline_artifacts(cfg: &RunConfig, dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let paths = RunPaths::new(dir);
    write_data(&generate(cfg).unwrap(), &paths.data()).unwrap();
    let t = train(cfg);
    paths.save_model(&t.net, cfg).unwrap();
    let records =
        sweep_uniform(&t.net, &t.setup.validation, &cfg.sweep_alphas, &t.setup.probe, &t.setup.context(), 1).unwrap();
    std::fs::write(dir.join("sweep.csv"), to_csv(&records).unwrap()).unwrap();
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn determinism_and_serialization(fx: &Fixtures) -> Verdict {
    let image_cfg = RunConfig {
        image_size: 32,
        train_images: 4,
        val_images: 2,
        main_steps: 15,
        tuning_steps: 15,
        ..RunConfig::preset(TaskKind::Stylize)
    };
    let mut rerun_identical = true;
    let mut files = 0;
    for cfg in [RunConfig::preset(TaskKind::Regress1d), image_cfg] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let (fa, fb) = (pipeline_artifacts(&cfg, a.path()), pipeline_artifacts(&cfg, b.path()));
        files += fa.len();
        rerun_identical &= fa == fb;
    }

    let t = &fx.stylize()[0];
    let dir = tempfile::tempdir().unwrap();
    let (tp, pp) = (dir.path().join("t.dynw"), dir.path().join("p.dynw"));
    t.net.save(&tp, &pp).unwrap();
    let back = DynamicNet::load(t.setup.spec.clone(), &tp, &pp).unwrap();
    let round_trip = back.theta().bit_eq(t.net.theta())
        && back.psi().bit_eq(t.net.psi())
        && back.theta().to_bytes().unwrap() == std::fs::read(&tp).unwrap();
    // phase 2 flips the trainable flags, the values must not move
    let same_values = |t: &Trained| {
        let after = t.net.theta();
        t.theta_before_tuning.len() == after.len()
            && t.theta_before_tuning.iter().zip(after.iter()).all(|((na, a), (nb, b))| na == nb && a.value.bit_eq(&b.value))
    };
    let theta_frozen = fx.stylize().iter().all(same_values) && same_values(fx.regress());

    let threads_agree = {
        let run = |n| {
            to_csv(&sweep_uniform(&t.net, &t.setup.validation, &[0.0, 0.5, 1.0], &t.setup.probe, &t.setup.context(), n).unwrap())
                .unwrap()
        };
        run(1) == run(3)
    };
    (
        rerun_identical && round_trip && theta_frozen && threads_agree,
        format!(
            "re-run bit-identical over {files} files: {rerun_identical}; weight round trip: {round_trip}; theta unchanged by phase 2: {theta_frozen}; 1 vs 3 threads: {threads_agree}"
        ),
    )
}

fn http(addr: SocketAddr, method: &str, path: &str, body: &str) -> (u16, Value) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let status = resp[9..12].parse().unwrap();
    let json = serde_json::from_str(&resp[resp.find("\r\n\r\n").unwrap() + 4..]).unwrap_or(Value::Null);
    (status, json)
}

fn service_contract(fx: &Fixtures) -> Verdict {
    let t = &fx.stylize()[0];
    let setup = Setup::generate(&t.setup.config).unwrap();
    let state = Arc::new(SessionState::new(t.net.clone(), setup).unwrap());
    let (tx, rx) = std::sync::mpsc::channel();
    let served = state.clone();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(dynanet_server::serve(served, "127.0.0.1:0".parse().unwrap(), move |a| tx.send(a).unwrap())).unwrap();
    });
    let addr = rx.recv_timeout(Duration::from_secs(30)).unwrap();

    let sample = &t.setup.validation[3];
    let (status, body) = http(addr, "POST", "/api/infer", &format!(r#"{{"image_id":"{}","alpha":[0,0,0]}}"#, sample.id));
    let bytes = BASE64.decode(body["rgb_base64"].as_str().unwrap_or_default()).unwrap_or_default();
    let identity = status == 200 && bytes == to_rgb_bytes(&t.net.forward_main(&sample.image).unwrap()).unwrap();

    let (status, body) = http(addr, "GET", &format!("/api/sweep?image_id={}&steps=9&lo=0&hi=1", sample.id), "");
    let records = sweep_uniform(
        &t.net,
        std::slice::from_ref(sample),
        &dynanet_server::sweep_alphas(0.0, 1.0, 9),
        &t.setup.probe,
        &t.setup.context(),
        1,
    )
    .unwrap();
    let csv = to_csv(&records).unwrap();
    let served: Vec<String> = body
        .as_array()
        .map(|pts| {
            pts.iter()
                .map(|p| {
                    let g = |k: &str| format_g9(p[k].as_f64().unwrap());
                    format!("{a},{a},{a},{},{}", g("content_loss"), g("style_loss"), a = g("alpha"))
                })
                .collect()
        })
        .unwrap_or_default();
    let expected: Vec<String> = csv.lines().skip(1).map(|l| l.split(',').take(5).collect::<Vec<_>>().join(",")).collect();
    let sweep_match = status == 200 && served == expected;

    let req = format!(r#"{{"image_id":"{}","alpha":[0.5,0.5,0.5]}}"#, sample.id);
    http(addr, "POST", "/api/infer", &req);
    let mut times: Vec<f64> = (0..7)
        .map(|_| {
            let start = Instant::now();
            assert_eq!(http(addr, "POST", "/api/infer", &req).0, 200);
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[3];
    (
        identity && sweep_match && median < 200.0,
        format!("alpha=0 bytes match quantized main output: {identity}; sweep equals CSV at 9 digits: {sweep_match}; median /api/infer latency {median:.1} ms (< 200 ms)"),
    )
}

type Criterion = (u8, &'static str, fn(&Fixtures) -> Verdict);

const CRITERIA: &[Criterion] = &[
    (1, "gradient suite", gradient_suite_passes),
    (2, "alpha=0 identity", zero_alpha_is_identity),
    (3, "latent affinity", latents_are_affine),
    (4, "1D oracle", one_d_oracle),
    (5, "stylization trade-off", stylization_trade_off),
    (6, "tuning effectiveness", tuning_is_effective),
    (7, "fixed-net correspondence", fixed_net_correspondence),
    (8, "grid-front weak dominance", grid_front_dominates),
    (9, "extrapolation safety", extrapolation_is_safe),
    (10, "determinism and serialization", determinism_and_serialization),
    (11, "service contract", service_contract),
];

fn main() {
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let fx = Fixtures::default();
    let mut failed = 0;
    let mut ran = 0;
    for (id, name, check) in CRITERIA {
        if !selected.is_empty() && !selected.contains(id) {
            continue;
        }
        ran += 1;
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(|| check(&fx))) {
            Ok(v) => v,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        if !ok {
            failed += 1;
        }
        println!("{} {id:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
