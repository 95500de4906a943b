use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gngan::config::ExperimentConfig;
use gngan::eval::{Bounds, REPORT_CSV_HEADER};
use gngan::experiment;

#[derive(Parser)]
#[command(name = "gngan", version, about = "Train and evaluate GN-GAN on synthetic mixtures")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train(ConfigArgs),
    /// Mode report of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Load even if the checkpoint was trained under another config.
        /// Without `--config`, the config.txt next to the checkpoint is used.
        #[arg(long)]
        force: bool,
        /// Also write the report as CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Discriminator gradient field (2-D) or score curve (1-D) as CSV.
    Gradmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Lattice bounds `lo,hi` on every axis.
        #[arg(long, default_value = "-5,5", allow_hyphen_values = true)]
        bounds: String,
        /// Lattice size `NXxNY`; only NX is used for 1-D data.
        #[arg(long, default_value = "40x40")]
        resolution: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train every generator variant over every seed.
    Ablate(ConfigArgs),
}

/// Every flag maps onto the config key of the same name.
#[derive(Args, Default)]
struct ConfigArgs {
    /// key = value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    /// Comma list or inclusive range `a..b`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// grid25, tri1d or a CSV path.
    #[arg(long)]
    dataset: Option<String>,
    /// standard_gan, gm, ne_only or gm_ne.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    dataset_size: Option<String>,
    /// Mixture centers, rows split by `;`, columns by `,`.
    #[arg(long, allow_hyphen_values = true)]
    centers: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    /// log or hinge.
    #[arg(long)]
    loss_variant: Option<String>,
    /// norms or literal.
    #[arg(long)]
    gm_form: Option<String>,
    #[arg(long)]
    latent_affinity_grad: Option<String>,
    #[arg(long)]
    lambda_p: Option<String>,
    #[arg(long)]
    lambda_r: Option<String>,
    #[arg(long)]
    lambda_m1: Option<String>,
    #[arg(long)]
    lambda_m2: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    latent_dim: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lr: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    #[arg(long)]
    beta2: Option<String>,
    #[arg(long)]
    lr_decay_every: Option<String>,
    #[arg(long)]
    lr_decay_base: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    #[arg(long)]
    log_every: Option<String>,
}

impl ConfigArgs {
    fn pairs(&self) -> Vec<(String, String)> {
        let fields: [(&str, &Option<String>); 26] = [
            ("seed", &self.seed),
            ("seeds", &self.seeds),
            ("out_dir", &self.out),
            ("dataset", &self.dataset),
            ("variant", &self.variant),
            ("epochs", &self.epochs),
            ("dataset_size", &self.dataset_size),
            ("centers", &self.centers),
            ("sigma", &self.sigma),
            ("loss_variant", &self.loss_variant),
            ("gm_form", &self.gm_form),
            ("latent_affinity_grad", &self.latent_affinity_grad),
            ("lambda_p", &self.lambda_p),
            ("lambda_r", &self.lambda_r),
            ("lambda_m1", &self.lambda_m1),
            ("lambda_m2", &self.lambda_m2),
            ("alpha", &self.alpha),
            ("batch_size", &self.batch_size),
            ("latent_dim", &self.latent_dim),
            ("lr", &self.lr),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("lr_decay_every", &self.lr_decay_every),
            ("lr_decay_base", &self.lr_decay_base),
            ("eval_every", &self.eval_every),
            ("log_every", &self.log_every),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    fn load(&self) -> gngan::Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.pairs())
    }
}

fn parse_pair(s: &str, sep: char, what: &str) -> Result<(String, String), String> {
    s.split_once(sep)
        .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
        .ok_or_else(|| format!("{what}: expected two values separated by `{sep}`, got `{s}`"))
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    let err = |e: gngan::Error| e.to_string();
    match cli.cmd {
        Command::Train(args) => {
            let cfg = args.load().map_err(err)?;
            let runs = experiment::cmd_train(&cfg).map_err(err)?;
            let mut failed = false;
            for r in &runs {
                match (&r.error, &r.report) {
                    (Some(e), _) => {
                        failed = true;
                        eprintln!("seed {} aborted: {e}", r.seed);
                    }
                    (None, Some(rep)) => println!("seed {}: {}", r.seed, rep.summary()),
                    (None, None) => println!("seed {}: done ({})", r.seed, r.dir.display()),
                }
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Eval {
            checkpoint,
            force,
            csv,
            config,
        } => {
            let mut config = config;
            if config.config.is_none() {
                let saved = checkpoint.with_file_name(experiment::CONFIG_FILE);
                if saved.exists() {
                    config.config = Some(saved);
                }
            }
            let cfg = config.load().map_err(err)?;
            let report = experiment::cmd_eval(&checkpoint, &cfg, cfg.seeds[0], force).map_err(err)?;
            println!("{}", report.summary());
            if let Some(path) = csv {
                let text = format!("{REPORT_CSV_HEADER}\n{}\n", report.csv_row());
                std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradmap {
            checkpoint,
            bounds,
            resolution,
            output,
        } => {
            let (lo, hi) = parse_pair(&bounds, ',', "bounds")?;
            let lo: f64 = lo.parse().map_err(|e| format!("bounds: {e}"))?;
            let hi: f64 = hi.parse().map_err(|e| format!("bounds: {e}"))?;
            let (nx, ny) = parse_pair(&resolution, 'x', "resolution")?;
            let nx: usize = nx.parse().map_err(|e| format!("resolution: {e}"))?;
            let ny: usize = ny.parse().map_err(|e| format!("resolution: {e}"))?;
            let bounds = Bounds::square(lo, hi);
            let rows = match output {
                Some(path) => {
                    let mut f = std::io::BufWriter::new(
                        std::fs::File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?,
                    );
                    let n = experiment::cmd_gradmap(&checkpoint, bounds, (nx, ny), &mut f).map_err(err)?;
                    f.flush().map_err(|e| e.to_string())?;
                    n
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    experiment::cmd_gradmap(&checkpoint, bounds, (nx, ny), &mut lock).map_err(err)?
                }
            };
            eprintln!("{rows} rows");
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate(args) => {
            let cfg = args.load().map_err(err)?;
            let arms = experiment::cmd_ablate(&cfg).map_err(err)?;
            println!("{}", experiment::ABLATION_HEADER);
            let mut failed = false;
            for a in &arms {
                println!("{}", a.csv_row());
                failed |= a.runs.iter().any(|r| !r.succeeded());
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
