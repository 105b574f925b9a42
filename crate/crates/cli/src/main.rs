//! Command-line driver for VIF Gaussian-process estimation: `fit`,
//! `predict`, `simulate`, `score`, and `benchmark-preconditioners`.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use vifgp::data::{read_csv, write_csv, write_predictions_csv, Dataset};
use vifgp::fit::{
    fit, initial_kernel, load_model, predict, save_model, FitConfig, InferenceKind, LikelihoodKind,
    MetricKind,
};
use vifgp::kernels::{KernelFamily, KernelSpec};
use vifgp::laplace::{
    find_mode, vifla_nll, BernoulliLogit, IterativeSettings, LaplaceSolver, NewtonConfig,
    VarianceMethod,
};
use vifgp::model::VifModel;
use vifgp::precond::PreconditionerKind;
use vifgp::scoring::{score_binary, score_gaussian};
use vifgp::simulate::{simulate, SimLikelihood};

#[derive(Parser)]
#[command(
    name = "vifgp",
    about = "Vecchia-inducing-points full-scale Gaussian process regression and classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigFlags {
    /// Observation model.
    #[arg(long, default_value = "gaussian")]
    likelihood: String,
    /// Covariance family: matern12|matern32|matern52|gaussian.
    #[arg(long, default_value = "matern32")]
    kernel: String,
    /// Number of inducing points m.
    #[arg(long, default_value_t = 200)]
    num_inducing: usize,
    /// Number of Vecchia neighbors m_v.
    #[arg(long, default_value_t = 30)]
    num_neighbors: usize,
    /// Preconditioner for iterative inference: fitc|vifdu.
    #[arg(long, default_value = "fitc")]
    preconditioner: String,
    /// FITC preconditioner rank k.
    #[arg(long, default_value_t = 200)]
    pc_rank: usize,
    /// CG relative-residual tolerance.
    #[arg(long, default_value_t = 0.01)]
    cg_tol: f64,
    /// Probe vectors for SLQ / trace estimation.
    #[arg(long, default_value_t = 50)]
    probes: usize,
    /// Predictive variances: sbpv|spv|cholesky.
    #[arg(long, default_value = "sbpv")]
    variance_method: String,
    /// Probe vectors for the variance estimators.
    #[arg(long, default_value_t = 100)]
    variance_probes: usize,
    /// Inference route for non-Gaussian likelihoods: iterative|cholesky.
    #[arg(long, default_value = "iterative")]
    inference: String,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Neighbor metric: correlation|euclidean.
    #[arg(long, default_value = "correlation")]
    neighbor_metric: String,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Optimizer gradient-norm tolerance.
    #[arg(long, default_value_t = 1e-5)]
    opt_grad_tol: f64,
    /// Optimizer iteration cap.
    #[arg(long, default_value_t = 200)]
    opt_max_iter: usize,
}

impl ConfigFlags {
    fn to_config(&self) -> Result<FitConfig> {
        let c = FitConfig {
            likelihood: LikelihoodKind::parse(&self.likelihood)?,
            kernel_family: KernelFamily::parse(&self.kernel)?,
            num_inducing: self.num_inducing,
            num_neighbors: self.num_neighbors,
            preconditioner: PreconditionerKind::parse(&self.preconditioner)?,
            pc_rank: self.pc_rank,
            cg_tol: self.cg_tol,
            slq_probes: self.probes,
            variance_method: VarianceMethod::parse(&self.variance_method)?,
            variance_probes: self.variance_probes,
            inference: InferenceKind::parse(&self.inference)?,
            opt_grad_tol: self.opt_grad_tol,
            opt_max_iter: self.opt_max_iter,
            seed: self.seed,
            neighbor_metric: MetricKind::parse(&self.neighbor_metric)?,
            threads: self.threads,
            ..FitConfig::default()
        };
        c.validate()?;
        if self.threads > 0 {
            rayon::ThreadPoolBuilder::new().num_threads(self.threads).build_global().ok();
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimate covariance parameters on a training CSV.
    Fit {
        #[command(flatten)]
        config: ConfigFlags,
        /// Training data CSV (header row required).
        #[arg(long)]
        data: PathBuf,
        /// Response column name.
        #[arg(long, default_value = "y")]
        response_col: String,
        /// Input column names (comma separated; default: all but response).
        #[arg(long, value_delimiter = ',')]
        input_cols: Vec<String>,
        /// Where to store the fitted model.
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Predict at new inputs with a fitted model.
    Predict {
        /// Fitted model path (from `fit --model-out`).
        #[arg(long)]
        model: PathBuf,
        /// Training data CSV (same file used for fitting).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "y")]
        response_col: String,
        #[arg(long, value_delimiter = ',')]
        input_cols: Vec<String>,
        /// Prediction inputs CSV.
        #[arg(long)]
        pred: PathBuf,
        /// Output predictions CSV.
        #[arg(long)]
        out: PathBuf,
        /// Predict the latent process instead of the response.
        #[arg(long)]
        latent: bool,
    },
    /// Draw a synthetic dataset from an exact GP.
    Simulate {
        #[arg(long, default_value = "matern32")]
        kernel: String,
        #[arg(long, default_value_t = 1.0)]
        variance: f64,
        /// Comma-separated length scales (one per input dimension).
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.3")]
        length_scales: Vec<f64>,
        /// Error variance (Gaussian likelihood).
        #[arg(long, default_value_t = 0.001)]
        nugget: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "gaussian")]
        likelihood: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against held-out truth.
    Score {
        /// Predictions CSV from `predict`.
        #[arg(long)]
        predictions: PathBuf,
        /// Truth CSV with the response column.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "y")]
        response_col: String,
        #[arg(long, default_value = "gaussian")]
        likelihood: String,
    },
    /// Compare preconditioners on a simulated classification problem.
    BenchmarkPreconditioners {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 50)]
        num_inducing: usize,
        #[arg(long, default_value_t = 10)]
        num_neighbors: usize,
        /// Preconditioner ranks to sweep.
        #[arg(long, value_delimiter = ',', default_value = "10,50,200")]
        ranks: Vec<usize>,
        /// Probe counts to sweep.
        #[arg(long, value_delimiter = ',', default_value = "10,20,50")]
        probe_grid: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (plot-ready).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Fit { config, data, response_col, input_cols, model_out } => {
            let config = config.to_config()?;
            let dataset = read_csv(&data, &input_cols, Some(&response_col))?;
            let started = Instant::now();
            let fitted = fit(&config, &dataset)?;
            let elapsed = started.elapsed().as_secs_f64();
            save_model(&model_out, &fitted)?;
            for (k, v) in fitted.config.to_key_values() {
                println!("{k}={v}");
            }
            println!("variance={}", fitted.kernel.variance);
            let scales: Vec<String> =
                fitted.kernel.length_scales.iter().map(|x| x.to_string()).collect();
            println!("length_scales={}", scales.join(","));
            println!("nugget={}", fitted.kernel.nugget);
            println!("final_nll={}", fitted.final_nll);
            println!("optimizer_iterations={}", fitted.trace.optimizer_iterations);
            println!("restarts={}", fitted.trace.restarts);
            let refreshes: Vec<String> =
                fitted.trace.refresh_iterations.iter().map(|x| x.to_string()).collect();
            println!("refresh_iterations={}", refreshes.join(","));
            println!("elapsed_seconds={elapsed:.3}");
            Ok(())
        }
        Command::Predict { model, data, response_col, input_cols, pred, out, latent } => {
            let fitted = load_model(&model)?;
            let train = read_csv(&data, &input_cols, Some(&response_col))?;
            let pred_data = read_csv(&pred, &input_cols, None)?;
            let result = predict(&fitted, &train, &pred_data.inputs, latent)?;
            write_predictions_csv(
                &out,
                &result.output.means,
                &result.output.variances,
                result.probabilities.as_ref(),
            )?;
            println!("predictions={}", result.output.means.len());
            println!("clamped_variances={}", result.output.clamped);
            Ok(())
        }
        Command::Simulate { kernel, variance, length_scales, nugget, n, likelihood, seed, out } => {
            let family = KernelFamily::parse(&kernel)?;
            let spec = KernelSpec::new(family, variance, length_scales.clone(), nugget)?;
            let lik = SimLikelihood::parse(&likelihood)?;
            let sim = simulate(&spec, n, length_scales.len(), lik, seed)?;
            write_csv(&out, &sim.data)?;
            println!("rows={n}");
            Ok(())
        }
        Command::Score { predictions, truth, response_col, likelihood } => {
            let preds = read_csv(&predictions, &[], None)?;
            let truth_data = read_csv(&truth, &[], Some(&response_col))?;
            let y = truth_data.response()?;
            let col = |name: &str| -> Result<DVector<f64>> {
                let ix = preds
                    .input_names
                    .iter()
                    .position(|h| h == name)
                    .with_context(|| format!("predictions CSV missing '{name}'"))?;
                Ok(preds.inputs.column(ix).into_owned())
            };
            match LikelihoodKind::parse(&likelihood)? {
                LikelihoodKind::Gaussian => {
                    let s = score_gaussian(&col("mean")?, &col("variance")?, y)?;
                    println!("rmse={}", s.rmse);
                    println!("ls={}", s.log_score);
                    println!("crps={}", s.crps);
                }
                LikelihoodKind::Bernoulli => {
                    let s = score_binary(&col("probability")?, y)?;
                    println!("auc={}", s.auc);
                    println!("rmse={}", s.rmse);
                    println!("acc={}", s.accuracy);
                    println!("ls={}", s.log_score);
                }
            }
            Ok(())
        }
        Command::BenchmarkPreconditioners {
            n,
            dim,
            num_inducing,
            num_neighbors,
            ranks,
            probe_grid,
            seed,
            out,
        } => benchmark_preconditioners(
            n,
            dim,
            num_inducing,
            num_neighbors,
            &ranks,
            &probe_grid,
            seed,
            &out,
        ),
    }
}

/// Iterative-vs-Cholesky likelihood differences for both preconditioners
/// across ranks and probe counts, written as a plot-ready CSV.
#[allow(clippy::too_many_arguments)]
fn benchmark_preconditioners(
    n: usize,
    dim: usize,
    num_inducing: usize,
    num_neighbors: usize,
    ranks: &[usize],
    probe_grid: &[usize],
    seed: u64,
    out: &std::path::Path,
) -> Result<()> {
    let spec = KernelSpec::new(KernelFamily::Matern32, 1.0, vec![0.3; dim], 0.0)?;
    let sim = simulate(&spec, n, dim, SimLikelihood::Bernoulli, seed)?;
    let dataset = Dataset {
        inputs: sim.data.inputs.clone(),
        response: sim.data.response.clone(),
        input_names: sim.data.input_names.clone(),
    };
    let y = dataset.response()?.clone();
    let config = FitConfig {
        likelihood: LikelihoodKind::Bernoulli,
        num_inducing,
        num_neighbors,
        ..FitConfig::default()
    };
    let kernel = initial_kernel(&config, &dataset)?;
    let structures = vifgp::fit::choose_structures(&config, &kernel, &dataset.inputs, None, None)?;
    let model = VifModel::build(
        kernel.clone(),
        &structures.inducing,
        &dataset.inputs,
        &structures.neighbor_sets,
        false,
    )?;
    let state = find_mode(
        &model,
        &BernoulliLogit,
        &y,
        &LaplaceSolver::Cholesky,
        &NewtonConfig::default(),
        None,
    )?;
    let exact = vifla_nll(&model, &BernoulliLogit, &y, &state, &LaplaceSolver::Cholesky)?;

    let mut writer = csv::Writer::from_path(out)?;
    writer.write_record(["preconditioner", "rank", "probes", "nll", "nll_diff", "time_ms"])?;
    let transformed = kernel.transform_inputs(&dataset.inputs)?;
    for &rank in ranks {
        let pc = {
            let set = vifgp::neighbors::kmeanspp_inducing(&transformed, rank, seed ^ 1, None, 5)?;
            kernel.untransform_inputs(&set.centroids)
        };
        for &probes in probe_grid {
            for (name, settings) in [
                ("fitc", IterativeSettings::fitc(pc.clone(), 0.01, probes, seed)),
                ("vifdu", IterativeSettings::vifdu(0.01, probes, seed)),
            ] {
                let started = Instant::now();
                let nll = vifla_nll(
                    &model,
                    &BernoulliLogit,
                    &y,
                    &state,
                    &LaplaceSolver::Iterative(&settings),
                )?;
                let ms = started.elapsed().as_secs_f64() * 1e3;
                writer.write_record([
                    name,
                    &rank.to_string(),
                    &probes.to_string(),
                    &nll.to_string(),
                    &(nll - exact).to_string(),
                    &format!("{ms:.2}"),
                ])?;
            }
        }
    }
    writer.flush()?;
    println!("cholesky_nll={exact}");
    println!("wrote={}", out.display());
    Ok(())
}
