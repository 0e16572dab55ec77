use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use centroid_attention::harness::{
    ablate, bench, cluster, gradcheck, mac_count, read_points_csv, run_train, with_threads, write_ablation_csv,
    write_bench_csv, AblationAxis, AblationTable, ArchDesc, BenchConfig, ClusterConfig, MRule, TrainConfig,
    Variant,
};
use centroid_attention::model::{synth_dataset, InitSpec};
use centroid_attention::{Error, Result};

#[derive(Parser)]
#[command(name = "centroid-attn", version, about = "Centroid attention experiments")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output path; defaults to stdout where that makes sense.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Fps,
    MeanPool,
    Kmeans,
}

impl InitArg {
    fn spec(self, seed: u64) -> InitSpec {
        match self {
            Self::Random => InitSpec::Random { seed },
            Self::Fps => InitSpec::Fps { start: 0 },
            Self::MeanPool => InitSpec::MeanPool,
            Self::Kmeans => InitSpec::Kmeans { iters: 3 },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    T,
    Init,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check centroid updates against finite-difference objective gradients.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Time self-attention and centroid attention; writes CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
        n: Vec<usize>,
        /// `fixed:<m>` or `div:<k>`.
        #[arg(long, default_value = "fixed:16")]
        m: String,
        #[arg(long, value_delimiter = ',', default_value = "self,centroid,centroid-knn")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 7)]
        reps: usize,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 32)]
        knn_k: usize,
    },
    /// Cluster a CSV point set (header x,y); writes JSON.
    Cluster {
        input: PathBuf,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 5.0)]
        alpha: f64,
        #[arg(long, default_value_t = 3)]
        t: usize,
        /// Step size; defaults to M/N.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, value_enum, default_value = "fps")]
        init: InitArg,
    },
    /// Train from a JSON config (bundled default if omitted); writes JSONL.
    Train { config: Option<PathBuf> },
    /// Train one model per iteration count or initialiser; writes CSV.
    Ablate {
        #[arg(long, value_enum, default_value = "t")]
        axis: AxisArg,
        config: Option<PathBuf>,
    },
    /// Multiply-accumulate count of an encoder.
    Maccount {
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 512)]
        d: usize,
        #[arg(long, default_value_t = 45)]
        n: usize,
        /// `layer:m` pairs, e.g. `1:15`.
        #[arg(long, value_delimiter = ',', default_value = "1:15")]
        ca: Vec<String>,
        /// Disable the FFN.
        #[arg(long)]
        no_ffn: bool,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default_config(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let out = cli.out.as_deref();
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Gradcheck { seeds, tol } => {
            let report = with_threads(cli.threads, || gradcheck(seeds, tol, seed.unwrap_or(0)))??;
            for r in report.records.iter().filter(|r| !r.pass) {
                eprintln!(
                    "FAIL seed {} ({}, alpha {}): update {:.3e}, analytic {:.3e}",
                    r.seed, r.kernel, r.alpha, r.update_rel_err, r.analytic_rel_err
                );
            }
            eprintln!(
                "{} of {} instances passed at tol {:e}",
                report.records.len() - report.failures,
                report.records.len(),
                tol
            );
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?;
            emit(out, &(json + "\n"))?;
            Ok(report.passed())
        }
        Cmd::Bench { n, m, variants, reps, d, knn_k } => {
            let cfg = BenchConfig {
                n_list: n,
                m_rule: m.parse::<MRule>()?,
                variants: variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>>>()?,
                reps,
                d,
                knn_k,
                seed: seed.unwrap_or(0),
            };
            let records = bench(&cfg)?;
            match out {
                Some(p) => write_bench_csv(&records, BufWriter::new(File::create(p)?))?,
                None => write_bench_csv(&records, std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Cmd::Cluster { input, m, alpha, t, epsilon, init } => {
            let points = read_points_csv(&input)?;
            let cfg = ClusterConfig {
                m,
                alpha,
                t,
                epsilon,
                init: init.spec(seed.unwrap_or(0)),
            };
            let result = cluster(&points, &cfg)?;
            let json = serde_json::to_string_pretty(&result).map_err(|e| Error::Io(e.to_string()))?;
            emit(out, &(json + "\n"))?;
            Ok(true)
        }
        Cmd::Train { config } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let outcome = run_train(&cfg)?;
            emit(out, &outcome.report.to_jsonl())?;
            let secs: f64 = outcome.report.wall_times.iter().sum();
            eprintln!(
                "final test accuracy {:.3} after {} epochs ({:.1}s), config {}",
                outcome.report.final_test_acc(),
                outcome.report.records.len(),
                secs,
                outcome.report.config_hash
            );
            Ok(true)
        }
        Cmd::Ablate { axis, config } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let data = synth_dataset(&cfg.data)?;
            let axis = match axis {
                AxisArg::T => AblationAxis::iterations(),
                AxisArg::Init => AblationAxis::inits(),
            };
            let rows = with_threads(cli.threads, || ablate(&data, &cfg.model_spec(), &cfg.hyper(), &axis))??;
            eprint!("{}", AblationTable(&rows));
            match out {
                Some(p) => write_ablation_csv(&rows, BufWriter::new(File::create(p)?))?,
                None => write_ablation_csv(&rows, std::io::stdout().lock())?,
            }
            Ok(true)
        }
        Cmd::Maccount { layers, d, n, ca, no_ffn } => {
            let mut at = Vec::new();
            for pair in &ca {
                let parsed = pair
                    .split_once(':')
                    .and_then(|(l, m)| Some((l.parse().ok()?, m.parse().ok()?)));
                match parsed {
                    Some((l, m)) if l < layers => at.push((l, m)),
                    _ => return Err(Error::Config(format!("--ca entry `{pair}` is not <layer>:<m>"))),
                }
            }
            let mut arch = ArchDesc::encoder(layers, d, &at);
            if no_ffn {
                arch.d_ff = None;
            }
            let centroid = mac_count(&arch, n)?;
            let vanilla = mac_count(&arch.vanilla(), n)?;
            let json = serde_json::json!({
                "centroid": centroid,
                "vanilla": vanilla,
                "ratio": centroid.total as f64 / vanilla.total as f64,
            });
            let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Io(e.to_string()))?;
            emit(out, &(text + "\n"))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
