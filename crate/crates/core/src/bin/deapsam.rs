use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use deapsam::checkpoint::{peek_precision, Checkpoint};
use deapsam::config::RunConfig;
use deapsam::cost::{count_cost, prompter_cost, sharing_reduction, CostOptions, CostReport, PrompterVariant, Scope};
use deapsam::gradsuite::{run_gradcheck_suite, SUITE_INSTANCES, SUITE_TOL};
use deapsam::metrics::MetricReport;
use deapsam::train::{crossvalidate, load_dataset, save_dataset, Case, CaseReport, EpochLog, Trainer};
use deapsam::volume::{generate_phantom, split_dataset, PhantomSpec};
use deapsam::{init_threads, Error, Precision, Result, Scalar};

#[derive(Parser)]
#[command(name = "deapsam", version, about = "3D lesion segmentation: data synthesis, training, evaluation and cost accounting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a phantom dataset.
    Synth {
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// Volume edge length, or H,W,D.
        #[arg(long, default_value = "32")]
        size: String,
        #[arg(long, default_value_t = 1)]
        lesions: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
    },
    /// Train a model, or cross-validate with --folds.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Cross-validate with this many folds instead of a single run.
        #[arg(long)]
        folds: Option<usize>,
        /// Fraction of cases held out for validation in a single run.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        /// Config override, `key=value`; may repeat.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Override the NSD tolerance stored in the checkpoint config.
        #[arg(long)]
        tau: Option<f64>,
        /// Also write the report as CSV.
        #[arg(long)]
        emit_csv: Option<PathBuf>,
    },
    /// Analytic FLOP and parameter counts.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Prompter input H,W,D,C; reports the prompter alone.
        #[arg(long)]
        feature_shape: Option<String>,
        #[arg(long)]
        prompter: Option<String>,
        /// Reduced token count for --feature-shape.
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        /// FLOPs per multiply-accumulate.
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..=2))]
        mac: u64,
        #[arg(long, value_enum, default_value_t = ScopeArg::Weighted)]
        scope: ScopeArg,
    },
    /// Run the full gradient-check suite.
    Gradcheck {
        #[arg(long, default_value_t = SUITE_INSTANCES)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SUITE_TOL)]
        tol: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Weighted,
    All,
}

fn echo(pairs: &[(&str, String)]) {
    println!("# resolved config");
    for (k, v) in pairs {
        println!("# {k}={v}");
    }
}

fn echo_config(cfg: &RunConfig) {
    let pairs: Vec<(&str, String)> = cfg.entries();
    echo(&pairs);
}

fn parse_dims<const N: usize>(what: &str, s: &str) -> Result<[usize; N]> {
    let xs: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::InvalidArgument(format!("{what}: bad value {p:?}"))))
        .collect::<Result<_>>()?;
    if N == 3 && xs.len() == 1 {
        return Ok([xs[0]; N]);
    }
    xs.try_into()
        .map_err(|_| Error::InvalidArgument(format!("{what}: expected {N} comma-separated values, got {s:?}")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(cases: usize, seed: u64, out: &Path, size: &str, lesions: usize, noise: f64) -> Result<()> {
    let dims: [usize; 3] = parse_dims("--size", size)?;
    echo(&[
        ("synth.cases", cases.to_string()),
        ("synth.seed", seed.to_string()),
        ("synth.out", out.display().to_string()),
        ("synth.size", format!("{},{},{}", dims[0], dims[1], dims[2])),
        ("synth.lesions", lesions.to_string()),
        ("synth.noise", noise.to_string()),
    ]);
    if cases == 0 {
        return Err(Error::InvalidArgument("--cases must be >= 1".into()));
    }
    let set = (0..cases)
        .map(|i| {
            let spec = PhantomSpec::new(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), dims, lesions, noise);
            let (image, mask) = generate_phantom(&spec)?;
            Case::new(format!("case{i:03}"), image, mask)
        })
        .collect::<Result<Vec<_>>>()?;
    save_dataset(out, &set)?;
    for c in &set {
        println!("{}\t{} lesion voxels", c.id, c.mask.count());
    }
    Ok(())
}

fn fmt_log(log: &EpochLog) -> String {
    match log.val {
        Some(v) => format!("{}\t{:.6}\t{:.6}\t{:.6}", log.epoch, log.train_loss, v.dice, v.nsd),
        None => format!("{}\t{:.6}\t\t", log.epoch, log.train_loss),
    }
}

fn train_single<T: Scalar>(cfg: RunConfig, cases: Vec<Case>, out: &Path, val_fraction: f64) -> Result<()> {
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let split = split_dataset(&ids, (1.0 - val_fraction, val_fraction, 0.0), cfg.train.seed)?;
    let pick = |names: &[String]| -> Vec<Case> {
        names
            .iter()
            .map(|n| cases.iter().find(|c| &c.id == n).unwrap().clone())
            .collect()
    };
    let (train, val) = (pick(&split.train), pick(&split.val));
    if train.is_empty() {
        return Err(Error::InvalidArgument("validation split leaves no training cases".into()));
    }
    println!("train cases {} val cases {}", train.len(), val.len());
    let spe = train.len().div_ceil(cfg.train.batch_size) as u64;
    let mut trainer = Trainer::<T>::new(cfg)?;
    let mut log_text = String::from("epoch\ttrain_loss\tval_dice\tval_nsd\n");
    let result = trainer.fit(&train, &val, &mut |log| {
        let line = fmt_log(log);
        println!("epoch {line}");
        log_text.push_str(&line);
        log_text.push('\n');
    });
    write_file(&out.join("train_log.tsv"), &log_text)?;
    match result {
        Ok(outcome) => {
            outcome.best.write(out.join("best.ckpt"))?;
            trainer.checkpoint(trainer.cfg.train.epochs as u64).write(out.join("last.ckpt"))?;
            match outcome.best.best_dice {
                Some(d) => println!("best val dice {d:.6} at epoch {}", outcome.best.epoch),
                None => println!("no validation cases; best.ckpt is the final state"),
            }
            Ok(())
        }
        Err(e) => {
            // Parameters are untouched by the failed step.
            let path = out.join("last_good.ckpt");
            trainer.checkpoint(trainer.step_count() / spe).write(&path)?;
            eprintln!("wrote {}", path.display());
            Err(e)
        }
    }
}

fn train_cv<T: Scalar>(cfg: &RunConfig, cases: &[Case], k: usize, out: &Path) -> Result<()> {
    let report = crossvalidate::<T>(cfg, cases, k, &mut |fold, log| println!("fold {fold} epoch {}", fmt_log(log)))?;
    let mut text = String::from("fold\tcase_id\tdice\tnsd\ttau\n");
    for f in &report.folds {
        for c in &f.cases {
            text.push_str(&format!("{}\t{}\n", f.fold, report_line(c)));
        }
        println!("fold {} mean dice {:.6} nsd {:.6}", f.fold, f.mean.dice, f.mean.nsd);
    }
    let m = report.mean;
    text.push_str(&format!("mean\tmean\t{:.6}\t{:.6}\t{}\n", m.dice, m.nsd, m.tau));
    println!("cv mean dice {:.6} nsd {:.6}", m.dice, m.nsd);
    write_file(&out.join("cv_report.tsv"), &text)
}

fn train(config: Option<&Path>, data: &Path, out: &Path, folds: Option<usize>, val_fraction: f64, sets: &[String]) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(p) = config {
        cfg.apply_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?;
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {s:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    echo_config(&cfg);
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!("--val-fraction {val_fraction} must lie in [0, 1)")));
    }
    let cases = load_dataset(data)?;
    create_dir(out)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    match (folds, cfg.train.precision) {
        (Some(k), Precision::F32) => train_cv::<f32>(&cfg, &cases, k, out),
        (Some(k), Precision::F64) => train_cv::<f64>(&cfg, &cases, k, out),
        (None, Precision::F32) => train_single::<f32>(cfg, cases, out, val_fraction),
        (None, Precision::F64) => train_single::<f64>(cfg, cases, out, val_fraction),
    }
}

fn report_line(r: &CaseReport) -> String {
    let m = &r.metrics;
    format!("{}\t{:.6}\t{:.6}\t{}", r.id, m.dice, m.nsd, m.tau)
}

fn eval_with<T: Scalar>(bytes: &[u8], cases: &[Case], tau: Option<f64>, csv: Option<&Path>) -> Result<()> {
    let mut trainer = Trainer::from_checkpoint(Checkpoint::<T>::decode(bytes)?)?;
    if let Some(t) = tau {
        trainer.cfg.set("eval.tau", &t.to_string())?;
        trainer.cfg.validate()?;
    }
    echo_config(&trainer.cfg);
    let reports = trainer.evaluate(cases)?;
    let mut csv_text = String::from("case_id,dice,nsd,tau\n");
    for r in &reports {
        println!("{}", report_line(r));
        let m = &r.metrics;
        csv_text.push_str(&format!("{},{:.6},{:.6},{}\n", r.id, m.dice, m.nsd, m.tau));
    }
    let metrics: Vec<MetricReport> = reports.iter().map(|r| r.metrics).collect();
    if let Some(m) = MetricReport::mean(&metrics) {
        println!("{}", report_line(&CaseReport { id: "mean".into(), metrics: m }));
    }
    if let Some(p) = csv {
        write_file(p, &csv_text)?;
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, tau: Option<f64>, csv: Option<&Path>) -> Result<()> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let cases = load_dataset(data)?;
    match peek_precision(&bytes)? {
        Precision::F32 => eval_with::<f32>(&bytes, &cases, tau, csv),
        Precision::F64 => eval_with::<f64>(&bytes, &cases, tau, csv),
    }
}

fn print_cost(r: &CostReport) {
    println!("module\tflops\tparams");
    for m in &r.modules {
        println!("{}\t{}\t{}", m.name, m.flops, m.params);
    }
    println!("total\t{}\t{}", r.total_flops, r.total_params);
}

fn flops(
    config: Option<&Path>,
    feature: Option<&str>,
    prompter: Option<&str>,
    tokens: usize,
    mac: u64,
    scope: ScopeArg,
) -> Result<()> {
    let o = CostOptions {
        flops_per_mac: mac,
        scope: match scope {
            ScopeArg::Weighted => Scope::Weighted,
            ScopeArg::All => Scope::AllProducts,
        },
    };
    let variant: Option<PrompterVariant> = prompter.map(str::parse).transpose()?;
    let scope_name = match scope {
        ScopeArg::Weighted => "weighted",
        ScopeArg::All => "all",
    };
    match feature {
        Some(f) => {
            let shape: [usize; 4] = parse_dims("--feature-shape", f)?;
            if shape.contains(&0) || tokens == 0 || tokens > shape[..3].iter().product() {
                return Err(Error::InvalidArgument(format!("feature shape {f:?} with {tokens} tokens is not valid")));
            }
            let variant = variant.unwrap_or(PrompterVariant::DualShared);
            echo(&[
                ("flops.feature_shape", format!("{},{},{},{}", shape[0], shape[1], shape[2], shape[3])),
                ("flops.prompter", variant.to_string()),
                ("flops.tokens", tokens.to_string()),
                ("flops.mac", mac.to_string()),
                ("flops.scope", scope_name.into()),
            ]);
            println!("variant\tflops\tparams");
            for v in PrompterVariant::ALL {
                let c = prompter_cost(shape, tokens, v, o);
                let mark = if v == variant { "\t*" } else { "" };
                println!("{v}\t{}\t{}{mark}", c.flops, c.params);
            }
            let r = sharing_reduction(shape, tokens, o);
            println!("shared vs full FLOP reduction: {:.2}%", 100.0 * r);
        }
        None => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(v) = variant {
                let (kind, share) = match v {
                    PrompterVariant::SpatialOnly => ("spatial", "false"),
                    PrompterVariant::DualShared => ("dual", "true"),
                    PrompterVariant::DualFull => ("dual", "false"),
                };
                cfg.set("prompter.kind", kind)?;
                cfg.set("prompter.share_qk", share)?;
            }
            let mut pairs = cfg.entries();
            pairs.push(("flops.mac", mac.to_string()));
            pairs.push(("flops.scope", scope_name.into()));
            echo(&pairs);
            print_cost(&count_cost(&cfg.model, o)?);
        }
    }
    Ok(())
}

fn gradcheck(instances: usize, seed: u64, tol: f64) -> Result<bool> {
    echo(&[
        ("gradcheck.instances", instances.to_string()),
        ("gradcheck.seed", seed.to_string()),
        ("gradcheck.tol", tol.to_string()),
    ]);
    let r = run_gradcheck_suite(instances, seed, tol)?;
    println!("case\tinstances\tchecked\tflagged\tmax_rel_error\tstatus");
    for c in &r.cases {
        let ok = c.max_rel_error <= r.tol && c.checked > 0;
        println!(
            "{}\t{}\t{}\t{}\t{:.3e}\t{}",
            c.name,
            c.instances,
            c.checked,
            c.flagged,
            c.max_rel_error,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    let failed = r.failures().len();
    println!("{} of {} cases passed", r.cases.len() - failed, r.cases.len());
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    let threads = init_threads()?;
    eprintln!("threads {threads}");
    match cli.cmd {
        Cmd::Synth { cases, seed, out, size, lesions, noise } => synth(cases, seed, &out, &size, lesions, noise)?,
        Cmd::Train { config, data, out, folds, val_fraction, sets } => {
            train(config.as_deref(), &data, &out, folds, val_fraction, &sets)?
        }
        Cmd::Eval { checkpoint, data, tau, emit_csv } => eval(&checkpoint, &data, tau, emit_csv.as_deref())?,
        Cmd::Flops { config, feature_shape, prompter, tokens, mac, scope } => {
            flops(config.as_deref(), feature_shape.as_deref(), prompter.as_deref(), tokens, mac, scope)?
        }
        Cmd::Gradcheck { instances, seed, tol } => return gradcheck(instances, seed, tol),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = run(cli);
    let _ = std::io::stdout().flush();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
