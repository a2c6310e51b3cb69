use std::fmt::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use dynanet::config::{RunConfig, TaskKind};
use dynanet::data::{load_ppm, save_ppm};
use dynanet::dynet::{AlphaVector, TrainLog};
use dynanet::pipeline::{read_data, write_data, RunPaths, Setup};
use dynanet::selfcheck::{gradient_suite, GRAD_TOLERANCE};
use dynanet::sweep::{
    format_g9, grid_search, interp_sweep, pareto_front, score_output, spearman, sweep_uniform,
    sweep_uniform_mean, to_csv, weakly_dominates, GridSpec, Sample, SweepRecord,
};
use dynanet::{Error, Result};
use dynanet_server::SessionState;

use crate::{Cli, Command, Global, GradcheckArgs, InferArgs, ServeArgs, CONFIG_FILE, SEED_ENV};

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    if cli.global.print_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let command = cli.command.ok_or_else(|| Error::Usage("no subcommand given; see --help".into()))?;
    if cli.global.threads == 0 {
        return Err(Error::Usage("--threads must be ≥ 1".into()));
    }
    let ctx = Run { paths: RunPaths::new(&cli.global.workdir), cfg, threads: cli.global.threads };
    match command {
        Command::GenData => ctx.gen_data(),
        Command::TrainMain => ctx.train_main(),
        Command::TrainTuning => ctx.train_tuning(),
        Command::TrainFixed => ctx.train_fixed(),
        Command::Sweep => ctx.sweep(),
        Command::Grid => ctx.grid(),
        Command::Infer(a) => ctx.infer(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Serve(a) => ctx.serve(&a),
    }
}

/// File, then `DYNANET_SEED`, then `--set` overrides.
pub fn load_config(g: &Global) -> Result<RunConfig> {
    let (path, required) = match &g.config {
        Some(p) => (g.workdir.join(p), true),
        None => (g.workdir.join(CONFIG_FILE), false),
    };
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && !required => String::new(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Config(format!("config file {} not found", path.display())))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut overrides = Vec::new();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{seed}`")))?;
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(g.overrides.iter().cloned());
    RunConfig::parse(&text, &overrides)
}

struct Run {
    paths: RunPaths,
    cfg: RunConfig,
    threads: usize,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn log_csv(log: &TrainLog) -> String {
    let mut s = String::from("step,total");
    for l in &log.term_labels {
        write!(s, ",{l}").unwrap();
    }
    s.push('\n');
    for step in &log.steps {
        write!(s, "{},{}", step.step, format_g9(step.total)).unwrap();
        for t in &step.terms {
            write!(s, ",{}", format_g9(*t)).unwrap();
        }
        s.push('\n');
    }
    s
}

fn summarize(phase: &str, log: &TrainLog) {
    if let (Some(first), Some(last)) = (log.steps.first(), log.steps.last()) {
        eprintln!("{phase}: {} steps, objective {} -> {}", log.steps.len(), format_g9(first.total), format_g9(last.total));
    }
}

impl Run {
    fn results(&self, name: &str) -> PathBuf {
        self.paths.root.join("results").join(name)
    }

    fn write_csv(&self, records: &[SweepRecord], name: &str) -> Result<()> {
        write_file(&self.results(name), &to_csv(records)?)
    }

    fn setup(&self) -> Result<Setup> {
        let data = read_data(&self.cfg, &self.paths.data())?;
        Setup::new(&self.cfg, data)
    }

    fn session(&self) -> Result<(Setup, dynanet::dynet::DynamicNet)> {
        let setup = self.setup()?;
        let net = self.paths.load_model(&setup.spec)?;
        Ok((setup, net))
    }

    fn gen_data(&self) -> Result<()> {
        let data = dynanet::pipeline::generate(&self.cfg)?;
        write_data(&data, &self.paths.data())?;
        println!("wrote {} data to {}", self.cfg.task.name(), self.paths.data().display());
        Ok(())
    }

    fn train_main(&self) -> Result<()> {
        let setup = self.setup()?;
        let (net, log) = setup.train_main()?;
        summarize("main", &log);
        self.paths.save_model(&net, &self.cfg)?;
        write_file(&self.results("train_main.csv"), &log_csv(&log))?;
        println!("saved {}", self.paths.theta().display());
        Ok(())
    }

    fn train_tuning(&self) -> Result<()> {
        let (setup, mut net) = self.session()?;
        let log = setup.train_tuning(&mut net)?;
        summarize("tuning", &log);
        net.psi().save(self.paths.psi())?;
        write_file(&self.results("train_tuning.csv"), &log_csv(&log))?;
        println!("saved {}", self.paths.psi().display());
        Ok(())
    }

    fn train_fixed(&self) -> Result<()> {
        let setup = self.setup()?;
        let mut lambdas = self.cfg.fixed_lambdas.clone();
        if !lambdas.contains(&self.cfg.lambda1) {
            lambdas.push(self.cfg.lambda1);
        }
        let mut records = Vec::new();
        let mut endpoint = None;
        for &lambda in &lambdas {
            let fixed = setup.train_fixed(lambda)?;
            summarize(&format!("fixed λ={lambda}"), &fixed.log);
            self.paths.save_fixed(lambda, &fixed.net)?;
            println!(
                "λ={lambda}: content {} style {} total {}",
                format_g9(fixed.record.content_loss),
                format_g9(fixed.record.style_loss),
                format_g9(fixed.record.content_loss + lambda * fixed.record.style_loss)
            );
            let mut rec = fixed.record.clone();
            rec.image_id = format!("lambda_{lambda}");
            records.push(rec);
            if lambda == self.cfg.lambda1 {
                endpoint = Some(fixed.net);
            }
        }
        self.write_csv(&records, "fixed.csv")?;

        // output interpolation between the main network and the λ₁ network
        let main = self.paths.load_model(&setup.spec)?;
        let endpoint = endpoint.expect("λ₁ is always trained");
        let interp = interp_sweep(&main, &endpoint, &setup.validation, &self.cfg.sweep_alphas, &setup.probe, &setup.context())?;
        self.write_csv(&interp, "interp.csv")?;
        let dynamic = sweep_uniform_mean(&main, &setup.validation, &self.cfg.sweep_alphas, &setup.probe, &setup.context(), self.threads)?;
        println!("{:>8} {:>14} {:>14} {:>14} {:>14}", "alpha", "dyn content", "dyn style", "interp content", "interp style");
        for (d, i) in dynamic.iter().zip(&interp) {
            println!(
                "{:>8} {:>14} {:>14} {:>14} {:>14}",
                format_g9(d.alpha[0]),
                format_g9(d.content_loss),
                format_g9(d.style_loss),
                format_g9(i.content_loss),
                format_g9(i.style_loss)
            );
        }
        Ok(())
    }

    fn sweep(&self) -> Result<()> {
        let (setup, net) = self.session()?;
        let alphas = &self.cfg.sweep_alphas;
        let records = sweep_uniform(&net, &setup.validation, alphas, &setup.probe, &setup.context(), self.threads)?;
        self.write_csv(&records, "sweep.csv")?;
        let mean = mean_per_alpha(&records, setup.validation.len())?;
        self.write_csv(&mean, "sweep_mean.csv")?;
        print_records(&mean);
        if alphas.len() >= 2 {
            let c: Vec<f64> = mean.iter().map(|r| r.content_loss).collect();
            let s: Vec<f64> = mean.iter().map(|r| r.style_loss).collect();
            println!("spearman(alpha, content) = {}", format_g9(spearman(alphas, &c)?));
            println!("spearman(alpha, style)   = {}", format_g9(spearman(alphas, &s)?));
        }
        Ok(())
    }

    fn grid(&self) -> Result<()> {
        let (setup, net) = self.session()?;
        let grid = GridSpec::uniform(net.blocks(), self.cfg.grid_values.clone())?;
        let records = grid_search(&net, &setup.validation, &grid, self.cfg.grid_cap, &setup.probe, &setup.context(), self.threads)?;
        self.write_csv(&records, "grid.csv")?;
        let front = pareto_front(&records);
        self.write_csv(&front, "grid_front.csv")?;
        let uniform = sweep_uniform_mean(&net, &setup.validation, &self.cfg.grid_values, &setup.probe, &setup.context(), self.threads)?;
        let uniform_front = pareto_front(&uniform);
        println!("grid: {} points, {} on the Pareto front", records.len(), front.len());
        print_records(&front);
        println!("grid front weakly dominates uniform front: {}", weakly_dominates(&front, &uniform_front));
        Ok(())
    }

    fn infer(&self, args: &InferArgs) -> Result<()> {
        let (setup, net) = self.session()?;
        let alpha = parse_alpha(&args.alpha, net.blocks())?;
        let sample = match setup.validation.iter().find(|s| s.id == args.image) {
            Some(s) => s.clone(),
            None if self.cfg.task.is_image() => {
                let path = self.paths.root.join(&args.image);
                if !path.is_file() {
                    return Err(Error::Usage(format!("`{}` is neither a validation id nor a file", args.image)));
                }
                Sample::new(args.image.clone(), load_ppm(&path)?)
            }
            None => return Err(Error::Usage(format!("unknown input `{}`", args.image))),
        };
        let out = net.forward(&sample.image, &alpha)?;
        let rec = score_output(&out, &sample, &alpha, &setup.probe, &setup.context())?;
        let path = match &args.out {
            Some(p) => self.paths.root.join(p),
            None if self.cfg.task.is_image() => self.paths.root.join("infer.ppm"),
            None => self.paths.root.join("infer.csv"),
        };
        if self.cfg.task == TaskKind::Regress1d {
            let mut s = String::from("x,y\n");
            for (x, y) in sample.image.data().iter().zip(out.data()) {
                writeln!(s, "{},{}", format_g9(*x as f64), format_g9(*y as f64)).unwrap();
            }
            write_file(&path, &s)?;
        } else {
            save_ppm(&out, &path)?;
        }
        println!(
            "wrote {} (content {} style {})",
            path.display(),
            format_g9(rec.content_loss),
            format_g9(rec.style_loss)
        );
        Ok(())
    }

    fn serve(&self, args: &ServeArgs) -> Result<()> {
        let (setup, net) = self.session()?;
        let state = std::sync::Arc::new(SessionState::new(net, setup)?);
        let host: IpAddr = args.host.parse().map_err(|_| Error::Usage(format!("invalid host `{}`", args.host)))?;
        let addr = SocketAddr::new(host, args.port);
        let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
        rt.block_on(dynanet_server::serve(state, addr, |a| println!("listening on http://{a}")))
            .map_err(|e| Error::io(addr.to_string(), e))
    }
}

/// Sample-averaged records of an α-major per-sample sweep.
fn mean_per_alpha(records: &[SweepRecord], samples: usize) -> Result<Vec<SweepRecord>> {
    records.chunks(samples.max(1)).map(dynanet::sweep::mean_record).collect()
}

fn print_records(records: &[SweepRecord]) {
    for r in records {
        let alpha: Vec<String> = r.alpha.iter().map(|a| format_g9(*a)).collect();
        println!(
            "alpha [{}]  content {}  style {}  total {}",
            alpha.join(", "),
            format_g9(r.content_loss),
            format_g9(r.style_loss),
            format_g9(r.total_at_lambda)
        );
    }
}

/// A single value for every block, or one comma-separated value per block.
pub fn parse_alpha(text: &str, blocks: usize) -> Result<AlphaVector> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Usage(format!("invalid alpha `{v}`"))))
        .collect::<Result<Vec<_>>>()?;
    match values.len() {
        1 => AlphaVector::new(vec![values[0]; blocks]),
        n if n == blocks => AlphaVector::new(values),
        n => Err(Error::Usage(format!("alpha has {n} values, model has {blocks} blocks"))),
    }
    .map_err(|e| match e {
        Error::Usage(_) => e,
        other => Error::Usage(other.to_string()),
    })
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(Error::Usage("--seeds must be ≥ 1".into()));
    }
    let reports = gradient_suite(args.seeds, args.filter.as_deref())?;
    if reports.is_empty() {
        return Err(Error::Usage("no check matches the filter".into()));
    }
    println!("{:<24} {:>14} {:>8} {:>8}  result", "op", "max rel error", "checked", "skipped");
    for r in &reports {
        println!(
            "{:<24} {:>14.3e} {:>8} {:>8}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Error::CheckFailed(format!("{failed} gradient checks exceed tolerance {GRAD_TOLERANCE:e}")));
    }
    println!("all {} checks under {GRAD_TOLERANCE:e}", reports.len());
    Ok(())
}
