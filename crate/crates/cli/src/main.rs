use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hcp_core::config::RunConfig;
use hcp_core::pipeline::{self, RUN_FILE};
use hcp_core::report::{self, Series};

#[derive(Parser, Debug)]
#[command(name = "hcp", version, about = "Hypernym class prediction: class maps, curriculum training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Count corpus frequencies and write the WordNet class map.
    BuildClassmap {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a language model under the configured objective.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Stratified perplexity of one checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report directory (default: the output directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-occurrence pairwise comparison of two checkpoints.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long = "model-a")]
        model_a: PathBuf,
        #[arg(long = "model-b")]
        model_b: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Figure data from run directories, metrics logs, curve CSVs or compare CSVs.
    Plot {
        /// Inputs as `[name=]path`.
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Also render SVG.
        #[arg(long)]
        svg: bool,
        #[arg(long, default_value = "Validation perplexity")]
        title: String,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Arbitrary override, `key.path=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// baseline | hcp | multi_objective | adaptive_softmax
    #[arg(long)]
    objective: Option<String>,
    /// WordNet dict directory or fixture file (falls back to HCP_WORDNET_DIR).
    #[arg(long)]
    wordnet: Option<PathBuf>,
    #[arg(long)]
    train_file: Option<PathBuf>,
    #[arg(long)]
    valid_file: Option<PathBuf>,
    #[arg(long)]
    test_file: Option<PathBuf>,
    #[arg(long)]
    depth: Option<usize>,
    /// Integer or `inf`.
    #[arg(long)]
    freq_threshold: Option<String>,
    /// constant | linear
    #[arg(long)]
    pacing: Option<String>,
    #[arg(long)]
    pacing_a: Option<f64>,
    #[arg(long)]
    pacing_b: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        let s = |v: &Option<String>| v.as_ref().map(|x| format!("{x:?}"));
        let p = |v: &Option<PathBuf>| v.as_ref().map(|x| x.to_string_lossy().into_owned());
        put("seed", self.seed.map(|v| v.to_string()));
        put("output_dir", p(&self.output_dir));
        put("objective", s(&self.objective));
        put("data.wordnet", p(&self.wordnet));
        put("data.train", p(&self.train_file));
        put("data.valid", p(&self.valid_file));
        put("data.test", p(&self.test_file));
        put("classmap.depth", self.depth.map(|v| v.to_string()));
        put(
            "classmap.freq_threshold",
            self.freq_threshold.as_ref().map(|v| match v.parse::<u64>() {
                Ok(n) => n.to_string(),
                Err(_) => format!("{v:?}"),
            }),
        );
        put("pacing.kind", s(&self.pacing));
        put("pacing.a", self.pacing_a.map(|v| format!("{v:?}")));
        put("pacing.b", self.pacing_b.map(|v| format!("{v:?}")));
        put("train.steps", self.steps.map(|v| v.to_string()));
        put("train.batch_size", self.batch_size.map(|v| v.to_string()));
        put("train.eval_every", self.eval_every.map(|v| v.to_string()));
        put("train.checkpoint_every", self.checkpoint_every.map(|v| v.to_string()));
        put("optimizer.lr", self.lr.map(|v| format!("{v:?}")));
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                return Err(hcp_core::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")).into());
            };
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    fn load(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load_with_overrides(self.config.as_deref(), &self.overrides()?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn build_classmap(args: &ConfigArgs) -> Result<()> {
    let cfg = args.load()?;
    let (_, stats) = pipeline::build_classmap_stage(&cfg)?;
    println!(
        "classmap: {} classes, {} mapped tokens (depth {}, f {}) -> {}",
        stats.num_classes,
        stats.num_mapped_tokens,
        stats.depth,
        stats.freq_threshold,
        cfg.output_dir.display()
    );
    Ok(())
}

fn train(args: &ConfigArgs, resume: bool) -> Result<()> {
    let cfg = args.load()?;
    let outcome = pipeline::train_stage(&cfg, resume)?;
    let last = outcome.records.iter().rev().find_map(|r| match r {
        hcp_core::train::MetricRecord::Valid { valid_ppl, .. } => Some(*valid_ppl),
        _ => None,
    });
    println!(
        "trained {} steps ({}), config {}{}",
        outcome.state.step,
        cfg.objective.as_str(),
        &outcome.config_hash[..12],
        last.map(|p| format!(", final valid ppl {p:.3}")).unwrap_or_default()
    );
    Ok(())
}

fn eval(args: &ConfigArgs, checkpoint: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let cfg = args.load()?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    let file = pipeline::eval_stage(&cfg, checkpoint, split, &out)?;
    let r = &file.report;
    println!("{split}: ppl {:.4} over {} tokens", r.overall_ppl(), r.overall.tokens);
    for s in &r.strata {
        if let Some(p) = s.ppl {
            println!("  {:>8}: ppl {:.4} ({} tokens)", s.label, p, s.tokens);
        }
    }
    Ok(())
}

fn compare(args: &ConfigArgs, a: &Path, b: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let cfg = args.load()?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    let file = pipeline::compare_stage(&cfg, a, b, split, &out)?;
    print!("{}", file.report);
    Ok(())
}

fn split_input(s: &str) -> (String, PathBuf) {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(s);
            let stem = if p.is_dir() { p.file_name() } else { p.file_stem() };
            let name = stem.map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            (name, p)
        }
    }
}

fn plot(inputs: &[String], out: &Path, svg: bool, title: &str) -> Result<()> {
    let mut curves: Vec<Series> = Vec::new();
    let mut stamps: Vec<String> = Vec::new();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for input in inputs {
        let (name, path) = split_input(input);
        if !path.exists() {
            bail!(hcp_core::Error::Validation(format!("plot input {} does not exist", path.display())));
        }
        let is_metrics = path.is_dir() || path.extension().is_some_and(|e| e == "jsonl");
        if is_metrics {
            let records = pipeline::load_metrics(&path)?;
            let run_json = if path.is_dir() { path.join(RUN_FILE) } else { path.with_file_name(RUN_FILE) };
            if let Ok(info) = pipeline::read_run_info(&run_json) {
                stamps.push(format!("# {name} config_hash={}", info.config_hash));
            }
            curves.push(report::valid_curve(&name, &records));
            continue;
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        if text.lines().any(|l| l.starts_with("stratum,")) {
            let rows = report::parse_pairwise_csv(&text)?;
            fs::write(out.join("pairwise.csv"), &text)?;
            if svg {
                fs::write(out.join("pairwise.svg"), report::pairwise_svg(&rows, "A", "B"))?;
            }
            println!("pairwise: {} strata -> {}", rows.len(), out.display());
            continue;
        }
        stamps.extend(text.lines().filter(|l| l.starts_with('#')).map(str::to_string));
        curves.extend(report::parse_curves_csv(&text, &name)?);
    }
    if !curves.is_empty() {
        let mut csv = stamps.iter().map(|s| format!("{s}\n")).collect::<String>();
        csv.push_str(&report::curves_csv(&curves));
        fs::write(out.join("valid_ppl.csv"), csv)?;
        if svg {
            fs::write(out.join("valid_ppl.svg"), report::line_svg(&curves, title, "step", "validation perplexity", true))?;
        }
        let points: usize = curves.iter().map(|c| c.points.len()).sum();
        println!("curves: {} series, {} points -> {}", curves.len(), points, out.display());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<hcp_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::BuildClassmap { cfg } => build_classmap(cfg),
        Command::Train { cfg, resume } => train(cfg, *resume),
        Command::Eval {
            cfg,
            checkpoint,
            split,
            out,
        } => eval(cfg, checkpoint, split, out.as_deref()),
        Command::Compare {
            cfg,
            model_a,
            model_b,
            split,
            out,
        } => compare(cfg, model_a, model_b, split, out.as_deref()),
        Command::Plot { inputs, out, svg, title } => plot(inputs, out, *svg, title),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
