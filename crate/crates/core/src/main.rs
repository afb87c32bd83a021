use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use blockprefill::criticality::Horizon;
use blockprefill::harness::{bench, locality, needle, verify};
use blockprefill::{count_flops, Error, HeadGeometry, Mode, PrunedAttnConfig};

#[derive(Parser)]
#[command(name = "blockprefill", version, about = "Block-sparse prefill verification and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the invariant suite; exit 0 iff every check passes.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Random instances per randomized check.
        #[arg(long, default_value_t = 5)]
        trials: usize,
        /// Disable the token-level causal mask in pruned attention (harness self-test).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Time dense and pruned prefill over a sweep of sequence lengths (JSON lines).
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Record max-abs deviation of pruned from dense output.
        #[arg(long)]
        verify: bool,
        /// Largest allowed n·model_dim.
        #[arg(long, default_value_t = 1 << 26)]
        max_elements: usize,
        /// Add a residual connection around each attention layer.
        #[arg(long)]
        residual: bool,
    },
    /// Export the critical-set overlap grid.
    Locality {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 512)]
        top_k: usize,
        /// Query sampling stride.
        #[arg(long, default_value_t = 32)]
        stride: usize,
        #[arg(long, value_enum, default_value_t = Generator::Drift)]
        generator: Generator,
        /// Random-walk step size for the drift generator.
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        /// Restrict each query's candidates to earlier positions.
        #[arg(long)]
        causal: bool,
        /// Head to analyze when --model is given.
        #[arg(long, default_value_t = 0)]
        head: usize,
    },
    /// Planted-block retrieval over lengths and depths.
    Needle {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.5, 0.9])]
        depths: Vec<f64>,
        #[arg(long, default_value_t = 10.0)]
        magnitude: f64,
    },
    /// Analytic FLOP accounting (JSON lines, one per sequence length).
    Flops {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Sequence length(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    seq_len: Option<Vec<usize>>,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    #[arg(long, default_value_t = 512)]
    segment_size: usize,
    #[arg(long, default_value_t = 32)]
    block_size: usize,
    #[arg(long, default_value_t = 1024)]
    budget: usize,
    #[arg(long, default_value_t = 0.25)]
    alpha: f64,
    /// Scale estimator logits by 1/sqrt(head_dim).
    #[arg(long)]
    scale_logits: bool,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model directory (manifest.json + blobs).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Worker threads; defaults to 1 for verify and all cores otherwise.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Generator {
    Drift,
    Iid,
}

impl Common {
    fn cfg(&self) -> PrunedAttnConfig {
        PrunedAttnConfig {
            segment_size: self.segment_size,
            block_size: self.block_size,
            budget: self.budget,
            alpha: self.alpha,
            scale_logits: self.scale_logits,
            ..Default::default()
        }
    }

    fn seq_lens(&self, default: &[usize]) -> Vec<usize> {
        self.seq_len.clone().unwrap_or_else(|| default.to_vec())
    }

    fn geometry(&self) -> Result<HeadGeometry, Failure> {
        Ok(HeadGeometry::new(self.heads, self.head_dim)?)
    }

    fn output(&self) -> Result<Box<dyn Write>, Failure> {
        Ok(match &self.out {
            Some(path) => Box::new(BufWriter::new(
                File::create(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
            )),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    fn require_json(&self, command: &str) -> Result<(), Failure> {
        match self.format {
            Some(Format::Csv) => Err(Failure::Usage(format!("`{command}` only emits JSON"))),
            _ => Ok(()),
        }
    }

}

#[derive(serde::Serialize)]
struct Versioned<'a, T> {
    schema_version: u32,
    command: &'static str,
    #[serde(flatten)]
    report: &'a T,
}

enum Failure {
    Usage(String),
    Check(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn write_json(out: &mut dyn Write, value: &impl serde::Serialize, pretty: bool) -> Result<(), Failure> {
    let text = if pretty {
        serde_json::to_string_pretty(value)
    } else {
        serde_json::to_string(value)
    }
    .map_err(|e| Failure::Runtime(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn init_workers(workers: Option<usize>, default: Option<usize>) {
    if let Some(n) = workers.or(default) {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Verify {
            common,
            trials,
            inject_fault,
        } => {
            common.require_json("verify")?;
            init_workers(common.workers, Some(1));
            let report = verify::run(&verify::VerifyParams {
                seed: common.seed,
                trials,
                inject_fault,
            })?;
            let mut out = common.output()?;
            write_json(&mut out, &report, true)?;
            out.flush()?;
            if !report.pass {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
                return Err(Failure::Check(format!("failed checks: {}", failed.join(", "))));
            }
        }
        Command::Bench {
            common,
            warmup,
            verify,
            max_elements,
            residual,
        } => {
            common.require_json("bench")?;
            init_workers(common.workers, None);
            let params = bench::BenchParams {
                seq_lens: common.seq_lens(&[4096, 8192, 16384]),
                layers: common.layers,
                geometry: common.geometry()?,
                cfg: common.cfg(),
                modes: common.mode.map_or(vec![Mode::Dense, Mode::Pruned], |m| vec![m]),
                repeats: common.repeats,
                warmup,
                seed: common.seed,
                verify,
                max_elements,
                model: common.model.clone(),
                residual,
            };
            let mut out = common.output()?;
            bench::run(&params, |r| {
                let line = serde_json::to_string(r).expect("bench result serializes");
                writeln!(out, "{line}")
                    .and_then(|_| out.flush())
                    .map_err(|e| Error::Internal(e.to_string()))
            })?;
        }
        Command::Locality {
            common,
            top_k,
            stride,
            generator,
            sigma,
            causal,
            head,
        } => {
            init_workers(common.workers, None);
            let source = match (&common.model, generator) {
                (Some(path), _) => locality::QuerySource::Model {
                    path: path.clone(),
                    head,
                },
                (None, Generator::Drift) => locality::QuerySource::Drift { sigma },
                (None, Generator::Iid) => locality::QuerySource::Iid,
            };
            let n = *common.seq_lens(&[4096]).first().ok_or_else(|| Failure::Usage("empty --seq-len".into()))?;
            let report = locality::run(&locality::LocalityParams {
                n,
                head_dim: common.head_dim,
                top_k,
                stride,
                horizon: if causal { Horizon::Causal } else { Horizon::Full },
                source,
                seed: common.seed,
            })?;
            let s = &report.summary;
            eprintln!(
                "adjacent mean overlap {:.4} ({} pairs), distant mean overlap {:.4} ({} pairs), gap {:.4}",
                s.adjacent_mean, s.adjacent_pairs, s.distant_mean, s.distant_pairs, s.gap
            );
            let mut out = common.output()?;
            match common.format.unwrap_or(Format::Csv) {
                Format::Csv => report.grid.write_csv(&mut out)?,
                Format::Json => {
                    let grid: Vec<(usize, usize, f64)> = report
                        .grid
                        .positions
                        .iter()
                        .enumerate()
                        .flat_map(|(a, &pa)| {
                            let g = &report.grid;
                            g.positions.iter().enumerate().map(move |(b, &pb)| (pa, pb, g.get(a, b)))
                        })
                        .collect();
                    let value = serde_json::json!({ "report": &report, "grid": grid });
                    write_json(&mut out, &value, false)?;
                }
            }
            out.flush()?;
        }
        Command::Needle {
            common,
            depths,
            magnitude,
        } => {
            common.require_json("needle")?;
            init_workers(common.workers, None);
            let report = needle::run(&needle::NeedleParams {
                seq_lens: common.seq_lens(&[8192, 32768, 65536]),
                depths,
                head_dim: common.head_dim,
                magnitude,
                cfg: common.cfg(),
                seed: common.seed,
            })?;
            let mut out = common.output()?;
            write_json(&mut out, &report, true)?;
            out.flush()?;
        }
        Command::Flops { common } => {
            let c = &common;
            c.require_json("flops")?;
            c.cfg().validate()?;
            let geometry = c.geometry()?;
            let mut out = c.output()?;
            for n in c.seq_lens(&[16384, 32768, 65536, 131072]) {
                let report = count_flops(n, c.layers, geometry, &c.cfg(), c.mode.unwrap_or(Mode::Pruned));
                let versioned = Versioned {
                    schema_version: blockprefill::harness::SCHEMA_VERSION,
                    command: "flops",
                    report: &report,
                };
                write_json(&mut out, &versioned, false)?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
