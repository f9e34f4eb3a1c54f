//! `incseg` command line: scenario data generation, gradient certification,
//! experiment runs, and report regeneration.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use incseg_core::dataset::{dump_ppm, generate_scenario, save_dataset};
use incseg_core::gradcheck::{verify_cayley_grad, verify_table, GradReport, LossId};
use incseg_core::parallel;
use incseg_core::pipeline::{config::ExperimentConfig, report, run_experiment};

#[derive(Parser)]
#[command(name = "incseg", version, about = "Incremental segmentation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenario datasets as versioned binary files
    GenData(GenDataArgs),
    /// Certify analytic gradients against finite differences and the
    /// closed-form tables
    Gradcheck(GradcheckArgs),
    /// Run the configured method grid over the scenario
    Run(RunArgs),
    /// Rebuild CSV summaries from emitted stage records
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Experiment manifest (TOML); only the [scenario] section is used
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set scenario.base=6
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (default: <output_dir>/data)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump the first N images and masks of each split as PPM files
    #[arg(long, default_value_t = 0)]
    dump: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check every loss plus the rotation-map gradients
    #[arg(long, conflicts_with = "loss")]
    all: bool,
    /// Comma-separated subset of {ce,kd,cce,ckd,ali,fl}
    #[arg(long, value_delimiter = ',')]
    loss: Vec<String>,
    /// Random contexts per loss
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rotation-map dimensions to check (with --all)
    #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 8, 16])]
    cayley_dims: Vec<usize>,
    /// JSON report destination
    #[arg(long, default_value = "gradcheck_report.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment manifest (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set losses.lambda_ali=0.5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the number of runs per method
    #[arg(long)]
    seeds: Option<usize>,
    /// Override worker thread count (1 = fully serial execution)
    #[arg(long)]
    threads: Option<usize>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run output directory containing stage records
    #[arg(long)]
    dir: PathBuf,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Gradcheck(args) => gradcheck(args),
        Command::Run(args) => run(args),
        Command::Report(args) => report_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Parse an override value: bool, integer, float, comma list, or string.
fn parse_toml_scalar(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{spec}' is not KEY=VALUE")))?;
    let value = if raw.contains(',') {
        toml::Value::Array(raw.split(',').map(parse_toml_scalar).collect())
    } else {
        parse_toml_scalar(raw)
    };
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            CliError::Config(format!("override path '{path}' crosses a non-table"))
        })?;
        if i + 1 == segments.len() {
            // a scalar override of an array-valued key becomes a one-element list
            let value = match (table.get(*seg), value) {
                (Some(toml::Value::Array(_)), v @ (toml::Value::String(_)
                | toml::Value::Integer(_)
                | toml::Value::Float(_)
                | toml::Value::Boolean(_))) => toml::Value::Array(vec![v]),
                (_, v) => v,
            };
            table.insert(seg.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("override paths are non-empty")
}

fn load_config(path: &Path, sets: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut value: toml::Value = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for spec in sets {
        apply_override(&mut value, spec)?;
    }
    let cfg: ExperimentConfig = value.try_into().map_err(CliError::config)?;
    cfg.validate().map_err(CliError::config)?;
    Ok(cfg)
}

fn content_hash(text: &str) -> String {
    // FNV-1a, printed like a short commit id
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn write_manifest(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::runtime)?;
    let resolved = toml::to_string_pretty(cfg).map_err(CliError::runtime)?;
    fs::write(dir.join("resolved_config.toml"), &resolved).map_err(CliError::runtime)?;
    let manifest = serde_json::json!({
        "build": format!("incseg {}", env!("CARGO_PKG_VERSION")),
        "config_hash": content_hash(&resolved),
        "root_seed": cfg.seed,
        "seeds": cfg.seeds,
        "threads": cfg.threads,
        "methods": cfg.methods,
    });
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(CliError::runtime)? + "\n",
    )
    .map_err(CliError::runtime)?;
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let cfg = load_config(&args.config, &args.sets)?;
    let out = args
        .out
        .unwrap_or_else(|| Path::new(&cfg.output_dir).join("data"));
    fs::create_dir_all(&out).map_err(CliError::runtime)?;

    let spec = cfg.scenario.spec();
    let scenario = parallel::with_threads(cfg.threads, || {
        generate_scenario(
            &spec,
            cfg.scenario.images_per_stage,
            cfg.scenario.eval_images,
            cfg.scenario.height,
            cfg.scenario.width,
        )
    })
    .map_err(CliError::runtime)?;

    for stage_ds in &scenario.stages {
        let path = out.join(format!("stage_{:02}.bin", stage_ds.stage));
        save_dataset(stage_ds, &path).map_err(CliError::runtime)?;
        println!(
            "wrote {} ({} samples, labels {:?})",
            path.display(),
            stage_ds.samples.len(),
            stage_ds.labeled_categories
        );
    }
    let eval_path = out.join("eval.bin");
    save_dataset(&scenario.eval, &eval_path).map_err(CliError::runtime)?;
    println!(
        "wrote {} ({} fully-labeled samples)",
        eval_path.display(),
        scenario.eval.samples.len()
    );

    if args.dump > 0 {
        let dump_dir = out.join("dump");
        fs::create_dir_all(&dump_dir).map_err(CliError::runtime)?;
        for stage_ds in scenario.stages.iter().chain(std::iter::once(&scenario.eval)) {
            let tag = if stage_ds.stage == 0 {
                "eval".to_string()
            } else {
                format!("stage{:02}", stage_ds.stage)
            };
            for (i, sample) in stage_ds.samples.iter().take(args.dump).enumerate() {
                dump_ppm(
                    sample,
                    &dump_dir.join(format!("{tag}_{i:03}_img.ppm")),
                    &dump_dir.join(format!("{tag}_{i:03}_mask.ppm")),
                )
                .map_err(CliError::runtime)?;
            }
        }
        println!("dumped previews under {}", dump_dir.display());
    }
    write_manifest(&out, &cfg)
}

fn gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let ids: Vec<LossId> = if args.all || args.loss.is_empty() {
        LossId::all().to_vec()
    } else {
        args.loss
            .iter()
            .map(|s| s.parse::<LossId>())
            .collect::<Result<_, _>>()
            .map_err(CliError::config)?
    };
    if args.cases == 0 {
        return Err(CliError::Config("cases must be at least 1".into()));
    }

    let reports: Vec<GradReport> = parallel::with_threads(args.threads, || {
        let mut reports: Vec<GradReport> = ids
            .iter()
            .map(|&id| verify_table(id, args.cases, args.seed))
            .collect();
        if args.all {
            for &dim in &args.cayley_dims {
                reports.push(verify_cayley_grad(dim, (args.cases / 10).max(3), args.seed));
            }
        }
        reports
    });

    println!("{:<12} {:>6} {:>13} {:>13} {:>6}", "loss", "cases", "max_rel_fd", "max_rel_form", "pass");
    for r in &reports {
        println!(
            "{:<12} {:>6} {:>13.3e} {:>13.3e} {:>6}",
            r.loss_id,
            r.num_cases,
            r.max_rel_err_fd,
            r.max_rel_err_closed_form,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    let json = serde_json::to_string_pretty(&reports).map_err(CliError::runtime)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(CliError::runtime)?;
        }
    }
    fs::write(&args.out, json + "\n").map_err(CliError::runtime)?;
    println!("report written to {}", args.out.display());

    if reports.iter().all(|r| r.pass) {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient certification failed".into()))
    }
}

fn run(args: RunArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&args.config, &args.sets)?;
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out.display().to_string();
    }
    cfg.validate().map_err(CliError::config)?;

    let out = PathBuf::from(&cfg.output_dir);
    write_manifest(&out, &cfg)?;

    let result = run_experiment(&cfg).map_err(CliError::runtime)?;
    report::write_all(&out, &result).map_err(CliError::runtime)?;

    println!(
        "{} stage records written under {}",
        result.records.len(),
        out.display()
    );
    let aggregate = fs::read_to_string(out.join("aggregate.csv")).map_err(CliError::runtime)?;
    print!("{aggregate}");
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<(), CliError> {
    let records = report::load_stage_records(&args.dir).map_err(CliError::runtime)?;
    if records.is_empty() {
        return Err(CliError::Runtime(format!(
            "no stage records under {}",
            args.dir.display()
        )));
    }
    report::write_summary_csv(&args.dir, &records).map_err(CliError::runtime)?;
    report::write_aggregate_csv(&args.dir, &records).map_err(CliError::runtime)?;
    report::write_hiou_vs_memory_csv(&args.dir, &records).map_err(CliError::runtime)?;
    report::write_per_category_csv(&args.dir, &records).map_err(CliError::runtime)?;
    println!("rebuilt summaries for {} records in {}", records.len(), args.dir.display());
    Ok(())
}
