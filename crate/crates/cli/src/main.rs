use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use clinix_core::harness::checks::{self, Scope};
use clinix_core::harness::train::{resume, write_steps_csv};
use clinix_core::harness::{
    bench, evaluate, read_sample, synth_generate, train, write_sample, Adam, Checkpoint, SynthSpec, TrainConfig,
    VolumeSample,
};
use clinix_core::net::{derive_plan, preset_plan, Fingerprint, Variant};
use clinix_core::ScanMode;

#[derive(Parser)]
#[command(name = "clinix", version, about = "3D segmentation networks with gated convolution and selective scans")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file, or directory for `synth`. Standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print a network plan as TOML. `--config` reads a dataset fingerprint.
    Plan {
        #[arg(long)]
        preset: Option<String>,
        /// plain, all-h, all-m, stagewise or order-N.
        #[arg(long)]
        variant: Option<String>,
        /// Print the per-stage extents as CSV instead.
        #[arg(long)]
        trace: bool,
    },
    /// Generate synthetic samples into the `--out` directory.
    Synth {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train on sample files; `--out` names the checkpoint.
    Train {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-step log.
        #[arg(long)]
        steps_csv: Option<PathBuf>,
    },
    /// Per-class metrics of a checkpoint on sample files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long, default_value = "parallel")]
        scan_mode: String,
        /// Also print one table per sample.
        #[arg(long)]
        per_sample: bool,
    },
    /// Compare reverse-mode gradients with central differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = ScopeArg::Op)]
        scope: ScopeArg,
        #[arg(long, default_value_t = checks::DEFAULT_RTOL)]
        rtol: f64,
    },
    /// Throughput tables.
    Bench {
        #[arg(value_enum)]
        kind: BenchKind,
        /// `L,C,N` triples for scan, or `D,H,W` extents for hgconv, separated by `;`.
        #[arg(long)]
        sizes: Option<String>,
        /// hgconv width; must be divisible by 32.
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Op,
    Block,
    Network,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Scan,
    Hgconv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let c = &cli.common;
    match &cli.command {
        Command::Plan { preset, variant, trace } => plan(c, preset.as_deref(), variant.as_deref(), *trace)?,
        Command::Synth { count } => synth(c, *count)?,
        Command::Train { data, resume, steps_csv } => train_cmd(c, data, resume.as_deref(), steps_csv.as_deref())?,
        Command::Eval { checkpoint, data, scan_mode, per_sample } => {
            eval(c, checkpoint, data, scan_mode, *per_sample)?
        }
        Command::Gradcheck { scope, rtol } => return gradcheck(c, *scope, *rtol),
        Command::Bench { kind, sizes, channels, reps } => bench_cmd(c, *kind, sizes.as_deref(), *channels, *reps)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn plan(c: &Common, preset: Option<&str>, variant: Option<&str>, trace: bool) -> Result<()> {
    let mut plan = match (preset, &c.config) {
        (Some(_), Some(_)) => bail!("give either --preset or --config, not both"),
        (Some(name), None) => preset_plan(name)?,
        (None, Some(path)) => {
            let fp: Fingerprint = toml::from_str(&read_config(path)?).context("parsing fingerprint")?;
            derive_plan(&fp)?
        }
        (None, None) => preset_plan("toy")?,
    };
    if let Some(v) = variant {
        plan = plan.with_variant(v.parse::<Variant>()?)?;
    }
    let mut out = output(c.out.as_deref())?;
    if trace {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["stage", "block", "d", "h", "w"])?;
        for (i, e) in plan.stage_extents().iter().enumerate() {
            w.write_record([i.to_string(), plan.blocks[i].to_string(), e[0].to_string(), e[1].to_string(), e[2].to_string()])?;
        }
        w.flush()?;
    } else {
        out.write_all(plan.to_toml()?.as_bytes())?;
    }
    Ok(())
}

fn synth(c: &Common, count: usize) -> Result<()> {
    let mut spec = match &c.config {
        Some(p) => toml::from_str::<SynthSpec>(&read_config(p)?).context("parsing synth spec")?,
        None => SynthSpec::default(),
    };
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let dir = c.out.as_deref().context("synth needs --out DIR")?;
    fs::create_dir_all(dir)?;
    let samples = synth_generate(&spec, count)?;
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    w.write_record(["id", "path", "tw"])?;
    for s in &samples {
        let path = dir.join(format!("{}.mcvx", s.id));
        write_sample(&path, s)?;
        w.write_record([s.id.clone(), path.display().to_string(), s.target_fraction().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Sample files, expanding directories to their sorted `.mcvx` entries.
fn load_samples(paths: &[PathBuf]) -> Result<Vec<VolumeSample>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<io::Result<_>>()?;
            entries.retain(|e| e.extension().is_some_and(|x| x == "mcvx"));
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no sample files found");
    }
    files.iter().map(|f| read_sample(f).with_context(|| format!("reading {}", f.display()))).collect()
}

fn train_cmd(c: &Common, data: &[PathBuf], resume_from: Option<&Path>, steps_csv: Option<&Path>) -> Result<()> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::from_toml(&read_config(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.checkpoint = Some(o.clone());
    }
    let samples = load_samples(data)?;
    let outcome = match resume_from {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let adam = Adam::with_state(cfg.adam_config(), ck.optimizer.clone())?;
            resume(&cfg, ck.network()?, ck.params, adam, &samples)?
        }
        None => train(&cfg, &cfg.resolve_plan()?, &samples)?,
    };
    if let Some(p) = steps_csv {
        write_steps_csv(&outcome.steps, File::create(p)?)?;
    }
    eprintln!("trained {} steps, final train DSC {:.4}", outcome.steps.len(), outcome.final_dsc());
    Ok(())
}

fn eval(c: &Common, checkpoint: &Path, data: &[PathBuf], scan_mode: &str, per_sample: bool) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.network()?;
    let samples = load_samples(data)?;
    let report = evaluate(&net, &ck.params, &samples, scan_mode.parse::<ScanMode>()?)?;
    let mut out = output(c.out.as_deref())?;
    report.pooled.write_csv(&mut out)?;
    if per_sample {
        for (id, m) in &report.per_sample {
            writeln!(out, "\n# {id}")?;
            m.write_csv(&mut out)?;
        }
    }
    Ok(())
}

fn gradcheck(c: &Common, scope: ScopeArg, rtol: f64) -> Result<ExitCode> {
    let scope = match scope {
        ScopeArg::Op => Scope::Op,
        ScopeArg::Block => Scope::Block,
        ScopeArg::Network => Scope::Network,
    };
    let rows = checks::run(scope, c.seed.unwrap_or(0), rtol)?;
    checks::write_csv(&rows, output(c.out.as_deref())?)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("{failed} of {} gradient groups exceed rtol {rtol}", rows.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_triples(text: &str) -> Result<Vec<[usize; 3]>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|t| {
            let v: Vec<usize> = t.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>()?;
            <[usize; 3]>::try_from(v).map_err(|v| anyhow::anyhow!("expected three values, got {v:?}"))
        })
        .collect()
}

fn bench_cmd(c: &Common, kind: BenchKind, sizes: Option<&str>, channels: usize, reps: usize) -> Result<()> {
    let seed = c.seed.unwrap_or(0);
    let out = output(c.out.as_deref())?;
    match kind {
        BenchKind::Scan => {
            let sizes = parse_triples(sizes.unwrap_or("256,4,16;1024,8,16;4096,8,16"))?;
            bench::write_scan_csv(&bench::bench_scan(&sizes, reps, seed)?, out)?;
        }
        BenchKind::Hgconv => {
            let sizes = parse_triples(sizes.unwrap_or("8,8,8"))?;
            let mut rows = Vec::new();
            for e in sizes {
                rows.extend(bench::bench_hgconv(channels, e, reps, seed)?);
            }
            bench::write_hgconv_csv(&rows, out)?;
        }
    }
    Ok(())
}
