use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mmfuse_core::archive::{read_archive, read_tensor, take_entry, write_archive};
use mmfuse_core::attention::DualStream;
use mmfuse_core::bench::{
    audit, bench_csv, bench_scaling, bench_text_table, sweep, write_jsonl, ComparatorConfig, SweepAxis,
    TimingProtocol, Variant, TIMING_FOOTER,
};
use mmfuse_core::encoder::{Encoder, EncoderConfig};
use mmfuse_core::verification::metrics::per_layer_maps;
use mmfuse_core::verification::{alignment_stats, gradcheck_suite, oracle_suite, CheckModule, CheckRecord};
use mmfuse_core::{Error, Result, Rng, Tensor};

#[derive(Parser)]
#[command(name = "mmfuse", version, about = "Cross-modal fusion kernels: checks, audits and benchmarks")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, env = "MMFUSE_SEED", default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time fusion operators over increasing token counts.
    Bench(BenchArgs),
    /// Sweep one configuration axis.
    Sweep(SweepArgs),
    /// Parameter and MAC audit of an encoder configuration.
    Audit(AuditArgs),
    /// Finite-difference gradient checks.
    Gradcheck(CheckArgs),
    /// Fast path against loop oracles.
    Oracle(CheckArgs),
    /// Run an encoder checkpoint on a pair of token tensors.
    DemoForward(DemoArgs),
    /// Alignment statistics between two sets of attention maps.
    AlignMetrics(AlignArgs),
    /// Write a randomly initialized encoder checkpoint.
    InitCkpt(InitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Jsonl,
    Csv,
}

#[derive(Args)]
struct TimingArgs {
    #[arg(long, default_value_t = 30)]
    iterations: usize,
    #[arg(long, default_value_t = 5)]
    warmups: usize,
}

impl TimingArgs {
    fn protocol(&self) -> TimingProtocol {
        TimingProtocol {
            warmups: self.warmups,
            iterations: self.iterations,
            ..TimingProtocol::default()
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    /// hmoe, xattn, mcp or all.
    #[arg(long, default_value = "all")]
    variant: String,
    /// Total fused token counts (half per modality).
    #[arg(long, value_delimiter = ',', default_values_t = [128, 256, 512, 1024])]
    n: Vec<usize>,
    #[arg(long, default_value_t = 768)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    experts: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 8)]
    mcp_hidden: usize,
    #[command(flatten)]
    timing: TimingArgs,
    /// JSONL report file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Base encoder configuration (JSON); defaults to the ViT-Base geometry.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also time the HMoE modules of one inserted layer per row.
    #[arg(long)]
    time: bool,
    #[command(flatten)]
    timing: TimingArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Count the LoRA factors as merged into the frozen weights.
    #[arg(long)]
    merged: bool,
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// all, attention, hmoe or encoder.
    #[arg(long, default_value = "all")]
    module: String,
    /// Random configurations per module.
    #[arg(long)]
    configs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Archive holding `rgb` and `x` token tensors.
    #[arg(long = "in", conflicts_with_all = ["rgb", "x"], required_unless_present_all = ["rgb", "x"])]
    input: Option<PathBuf>,
    #[arg(long, requires = "x")]
    rgb: Option<PathBuf>,
    #[arg(long, requires = "rgb")]
    x: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AlignArgs {
    /// Tensor file of `layers x heads x N x N` (or `heads x N x N`) maps.
    #[arg(long, requires = "x", required_unless_present = "archive")]
    rgb: Option<PathBuf>,
    #[arg(long, requires = "rgb")]
    x: Option<PathBuf>,
    /// A `demo-forward` output archive instead of two tensor files.
    #[arg(long, conflicts_with_all = ["rgb", "x"])]
    archive: Option<PathBuf>,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, conflicts_with = "tiny")]
    config: Option<PathBuf>,
    /// Small 4-layer, width-8 configuration.
    #[arg(long)]
    tiny: bool,
    /// Random fusion modules instead of the function-preserving init.
    #[arg(long)]
    random: bool,
    /// Also write a random token archive for `demo-forward`.
    #[arg(long)]
    tokens: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<EncoderConfig> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(EncoderConfig::vit_base()),
    }
}

fn emit_jsonl(items: &[CheckRecord], out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_jsonl(items, fs::File::create(p)?),
        None => write_jsonl(items, io::stdout().lock()),
    }
}

fn run_bench(args: &BenchArgs, seed: u64) -> Result<bool> {
    let variants = if args.variant == "all" {
        Variant::ALL.to_vec()
    } else {
        args.variant
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<Variant>>>()?
    };
    let config = ComparatorConfig {
        d_model: args.d,
        n_experts: args.experts,
        heads_per_expert: args.heads,
        expert_rank: args.rank,
        mcp_hidden: args.mcp_hidden,
    };
    let protocol = args.timing.protocol();
    let mut reports = Vec::new();
    let mut slopes = Vec::new();
    for v in variants {
        let r = bench_scaling(v, &args.n, &config, &protocol, seed)?;
        slopes.push((v, r.slope));
        reports.extend(r.reports);
    }
    if let Some(p) = &args.out {
        write_jsonl(&reports, fs::File::create(p)?)?;
    }
    if let Some(p) = &args.csv {
        fs::write(p, bench_csv(&reports))?;
    }
    let mut stdout = io::stdout().lock();
    match args.format {
        Format::Jsonl => write_jsonl(&reports, &mut stdout)?,
        Format::Csv => write!(stdout, "{}", bench_csv(&reports))?,
        Format::Text => {
            write!(stdout, "{}", bench_text_table(&reports))?;
            for (v, s) in &slopes {
                writeln!(stdout, "log-log slope {v}: {s:.3}")?;
            }
            writeln!(stdout, "{TIMING_FOOTER}")?;
        }
    }
    Ok(true)
}

fn run_sweep(args: &SweepArgs, seed: u64) -> Result<bool> {
    let axis: SweepAxis = args.axis.parse()?;
    let base = load_config(args.config.as_deref())?;
    let protocol = args.timing.protocol();
    let table = sweep(axis, &args.values, &base, args.time.then_some(&protocol), seed);
    if let Some(p) = &args.out {
        write_jsonl(&table.rows, fs::File::create(p)?)?;
    }
    match args.format {
        Format::Text => print!("{}", table.to_text()),
        Format::Csv => print!("{}", table.to_csv()),
        Format::Jsonl => write_jsonl(&table.rows, io::stdout().lock())?,
    }
    for row in table.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("sweep value {}: {}", row.value, row.error.as_deref().unwrap_or_default());
    }
    Ok(!table.has_errors())
}

fn run_audit(args: &AuditArgs) -> Result<bool> {
    let mut config = load_config(args.config.as_deref())?;
    config.merged_lora |= args.merged;
    let report = audit(&config)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(p) = &args.out {
        fs::write(p, &json)?;
    }
    if args.json {
        println!("{json}");
    } else {
        print!("{}", report.to_text());
    }
    Ok(true)
}

fn report_checks(kind: &str, records: &[CheckRecord], out: Option<&Path>) -> Result<bool> {
    emit_jsonl(records, out)?;
    let failed = records.iter().filter(|r| !r.pass).count();
    let worst = records.iter().map(|r| r.error).fold(0.0, f64::max);
    eprintln!(
        "{kind}: {} checks, {failed} failed, worst error {worst:.3e}",
        records.len()
    );
    Ok(failed == 0)
}

fn run_checks(args: &CheckArgs, seed: u64, gradients: bool) -> Result<bool> {
    let module: CheckModule = args.module.parse()?;
    if gradients {
        let records = gradcheck_suite(module, args.configs.unwrap_or(10), seed)?;
        report_checks("gradcheck", &records, args.out.as_deref())
    } else {
        let records = oracle_suite(module, args.configs.unwrap_or(100), seed)?;
        report_checks("oracle", &records, args.out.as_deref())
    }
}

fn run_demo(args: &DemoArgs) -> Result<bool> {
    let encoder = Encoder::<f64>::load(&args.ckpt)?;
    let (h_rgb, h_x): (Tensor, Tensor) = match (&args.input, &args.rgb, &args.x) {
        (Some(p), _, _) => {
            let mut entries = read_archive(p)?;
            (take_entry(&mut entries, "rgb")?, take_entry(&mut entries, "x")?)
        }
        (None, Some(r), Some(x)) => (read_tensor(r)?, read_tensor(x)?),
        _ => return Err(Error::Config("pass --in or both --rgb and --x".into())),
    };
    let cfg = encoder.config();
    let out = encoder.forward(&DualStream::new(h_rgb, h_x, cfg.n_z, cfg.n_c)?)?;
    let mut entries: Vec<(String, &Tensor)> = vec![
        ("fused_candidate".into(), &out.fused_candidate),
        ("final_rgb".into(), &out.final_rgb),
        ("final_x".into(), &out.final_x),
    ];
    for (l, [rgb, x]) in out.maps.iter().enumerate() {
        entries.push((format!("layer{l}.maps_rgb"), rgb));
        entries.push((format!("layer{l}.maps_x"), x));
    }
    write_archive(&args.out, &entries)?;
    println!(
        "{}",
        serde_json::json!({
            "out": args.out,
            "fused_candidate": out.fused_candidate.shape(),
            "layers": out.maps.len(),
            "insertion_layers": cfg.insertion_layers(),
        })
    );
    Ok(true)
}

fn run_align(args: &AlignArgs) -> Result<bool> {
    let (rgb, x) = match (&args.archive, &args.rgb, &args.x) {
        (Some(p), _, _) => {
            let mut entries = read_archive::<f64>(p)?;
            let (mut rgb, mut x) = (Vec::new(), Vec::new());
            for l in 0.. {
                let key = format!("layer{l}.maps_rgb");
                if !entries.contains_key(&key) {
                    break;
                }
                rgb.push(take_entry(&mut entries, &key)?);
                x.push(take_entry(&mut entries, &format!("layer{l}.maps_x"))?);
            }
            (rgb, x)
        }
        (None, Some(a), Some(b)) => (per_layer_maps(&read_tensor(a)?)?, per_layer_maps(&read_tensor(b)?)?),
        _ => return Err(Error::Config("pass --archive or both --rgb and --x".into())),
    };
    let stats = alignment_stats(&rgb, &x)?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(true)
}

fn run_init(args: &InitArgs, seed: u64) -> Result<bool> {
    let config = if args.tiny {
        EncoderConfig::tiny(4, 2, 8, 2, 4)
    } else {
        load_config(args.config.as_deref())?
    };
    let mut rng = Rng::new(seed);
    let encoder = if args.random {
        Encoder::<f64>::random(config.clone(), &mut rng)?
    } else {
        Encoder::<f64>::init(config.clone(), &mut rng)?
    };
    encoder.save(&args.out)?;
    if let Some(p) = &args.tokens {
        let shape = [config.tokens_per_stream(), config.d_model];
        let rgb: Tensor = rng.uniform_tensor(&shape, -1.0, 1.0)?;
        let x: Tensor = rng.uniform_tensor(&shape, -1.0, 1.0)?;
        write_archive(p, &[("rgb".to_string(), &rgb), ("x".to_string(), &x)])?;
    }
    Ok(true)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Bench(a) => run_bench(a, cli.seed),
        Command::Sweep(a) => run_sweep(a, cli.seed),
        Command::Audit(a) => run_audit(a),
        Command::Gradcheck(a) => run_checks(a, cli.seed, true),
        Command::Oracle(a) => run_checks(a, cli.seed, false),
        Command::DemoForward(a) => run_demo(a),
        Command::AlignMetrics(a) => run_align(a),
        Command::InitCkpt(a) => run_init(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
