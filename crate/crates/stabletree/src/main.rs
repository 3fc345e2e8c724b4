use clap::{Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stabletree::decomp::{decompose, write_records};
use stabletree::lab::{run_experiment, ExperimentConfig};
use stabletree::pdlaw::{sample_pd, PdParams, StableParams};
use stabletree::renewal::constants_report;
use stabletree::spectra::{counting_curve, SpectralOperator};
use stabletree::treegen::{
    rescale_to_metric, sample_conditioned_tree, stable_offspring_law, MetricTree,
};
use stabletree::lab::effective_size;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "stlab", about = "Numerical laboratory for stable trees", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a conditioned tree and print it (header `n root`, then
    /// `index parent edge_length mass` per vertex).
    Sample {
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Rescale edges and masses to the metric normalisation.
        #[arg(long)]
        rescale: bool,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count eigenvalues at or below one or more lambda values.
    Count {
        /// Tree file produced by `sample` (`-` for stdin).
        #[arg(long)]
        tree: PathBuf,
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',', required = true)]
        lambda: Vec<f64>,
        /// Comma-separated vertex indices to clamp (Dirichlet boundary).
        #[arg(long, value_delimiter = ',')]
        clamp: Vec<u32>,
    },
    /// Extract the lowest k eigenvalues.
    Spectrum {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, value_delimiter = ',')]
        clamp: Vec<u32>,
        #[arg(long, default_value_t = 1e-10)]
        rel_tol: f64,
    },
    /// Recursively decompose a tree along uniform-mass spines; emits one
    /// JSON record per subtree component.
    Decompose {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample Poisson-Dirichlet split masses and report power-sum moments
    /// against the closed form.
    PdCheck {
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
        #[arg(long, default_value_t = 10_000)]
        reps: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.5, 2.0, 3.0])]
        moments: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the renewal-theory constants and the solved discounted mean for
    /// a Gaussian bump forcing term.
    Renewal {
        #[arg(long, default_value_t = 1.5)]
        alpha: f64,
    },
    /// Run a full experiment from a key = value config file.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_tree(path: &PathBuf) -> Result<MetricTree, Box<dyn std::error::Error>> {
    if path.as_os_str() == "-" {
        let mut stdin = std::io::stdin().lock();
        Ok(MetricTree::read_from(&mut stdin)?)
    } else {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(MetricTree::read_from(&mut r)?)
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Sample {
            alpha,
            n,
            seed,
            rescale,
            out,
        } => {
            let n = effective_size(alpha, n);
            let law = stable_offspring_law(alpha)?;
            let tree = sample_conditioned_tree(law, n, seed)?;
            let tree = if rescale {
                rescale_to_metric(&tree, alpha)
            } else {
                tree
            };
            match out {
                Some(p) => tree.write_to(&mut std::fs::File::create(p)?)?,
                None => tree.write_to(&mut std::io::stdout().lock())?,
            }
        }
        Command::Count { tree, lambda, clamp } => {
            let tree = load_tree(&tree)?;
            if clamp.is_empty() {
                let op = SpectralOperator::new(&tree, &[])?;
                for (l, c) in lambda.iter().zip(op.count_below_batch(&lambda)) {
                    println!("{l} {c}");
                }
            } else {
                let curve = counting_curve(&tree, &clamp, &lambda)?;
                println!("lambda N N_shifted N_dirichlet");
                for p in curve {
                    println!("{} {} {} {}", p.lambda, p.n_neumann, p.n_shifted, p.n_dirichlet);
                }
            }
        }
        Command::Spectrum {
            tree,
            k,
            clamp,
            rel_tol,
        } => {
            let tree = load_tree(&tree)?;
            let op = SpectralOperator::new(&tree, &clamp)?;
            for l in op.eigenvalues(k, rel_tol)? {
                println!("{l}");
            }
        }
        Command::Decompose {
            tree,
            alpha,
            seed,
            out,
        } => {
            let mut tree = load_tree(&tree)?;
            if tree.marked.is_none() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                tree.pick_mass_vertex(&mut rng);
            }
            let records = decompose(&tree, alpha, seed)?;
            match out {
                Some(p) => {
                    let mut f = std::fs::File::create(p)?;
                    write_records(&records, &mut f)?;
                }
                None => {
                    let mut stdout = std::io::stdout();
                    write_records(&records, &mut stdout)?;
                }
            }
        }
        Command::PdCheck {
            alpha,
            reps,
            moments,
            seed,
        } => {
            let pd = PdParams::spinal(alpha)?;
            let params = StableParams::new(alpha)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sums = vec![0.0; moments.len()];
            for _ in 0..reps {
                let w = sample_pd(&pd, 1e-8, rng.gen())?;
                for (s, &x) in sums.iter_mut().zip(&moments) {
                    *s += w.power_sum(x);
                }
            }
            println!("x empirical psi(x)");
            for (&x, &s) in moments.iter().zip(&sums) {
                println!("{x} {} {}", s / reps as f64, params.psi(x));
            }
        }
        Command::Renewal { alpha } => {
            let params = StableParams::new(alpha)?;
            let report = constants_report(&params)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Experiment { config, out } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(p) = out {
                cfg.output_dir = p;
            }
            let summary = run_experiment(&cfg)?;
            eprintln!(
                "wrote {} size summaries to {}",
                summary.sizes.len(),
                cfg.output_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
