//! Parameter estimation driver: quasi-Newton optimization of the covariance
//! parameters in log space, with inducing points and Vecchia neighbors
//! re-determined at power-of-two iterations and once after convergence
//! (restarting if that refresh moves the objective). Also prediction
//! dispatch and plain-text model persistence.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gaussian::predict_gaussian;
use crate::kernels::{Inputs, KernelFamily, KernelSpec};
use crate::laplace::{
    find_mode, predict_laplace_latent, predict_response_prob, vifla_nll, vifla_nll_grad,
    BernoulliLogit, IterativeSettings, LaplaceSolver, LaplaceState, NewtonConfig, VarianceMethod,
};
use crate::lbfgs::{self, LbfgsConfig, Objective};
use crate::linalg::pcg::CgConfig;
use crate::model::VifModel;
use crate::neighbors::{
    build_metric_tree, kmeanspp_inducing, select_neighbors, select_prediction_neighbors,
    CorrelationMetric, CoverTree, EuclideanMetric,
};
use crate::precond::PreconditionerKind;
use crate::predict::{PredictionOutput, PredictionScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodKind {
    Gaussian,
    Bernoulli,
}

impl LikelihoodKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "bernoulli" => Ok(Self::Bernoulli),
            other => Err(Error::InvalidParameter(format!("unknown likelihood '{other}'"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Bernoulli => "bernoulli",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceKind {
    Iterative,
    Cholesky,
}

impl InferenceKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(Self::Iterative),
            "cholesky" => Ok(Self::Cholesky),
            other => Err(Error::InvalidParameter(format!("unknown inference mode '{other}'"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            Self::Iterative => "iterative",
            Self::Cholesky => "cholesky",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Correlation,
    Euclidean,
}

impl MetricKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "correlation" => Ok(Self::Correlation),
            "euclidean" => Ok(Self::Euclidean),
            other => Err(Error::InvalidParameter(format!("unknown neighbor metric '{other}'"))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            Self::Correlation => "correlation",
            Self::Euclidean => "euclidean",
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub likelihood: LikelihoodKind,
    pub kernel_family: KernelFamily,
    pub num_inducing: usize,
    pub num_neighbors: usize,
    pub preconditioner: PreconditionerKind,
    pub pc_rank: usize,
    pub cg_tol: f64,
    pub slq_probes: usize,
    pub variance_method: VarianceMethod,
    pub variance_probes: usize,
    pub inference: InferenceKind,
    pub opt_grad_tol: f64,
    pub opt_max_iter: usize,
    pub max_restarts: usize,
    pub seed: u64,
    pub neighbor_metric: MetricKind,
    pub lloyd_iters: usize,
    pub threads: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            likelihood: LikelihoodKind::Gaussian,
            kernel_family: KernelFamily::Matern32,
            num_inducing: 200,
            num_neighbors: 30,
            preconditioner: PreconditionerKind::Fitc,
            pc_rank: 200,
            cg_tol: 0.01,
            slq_probes: 50,
            variance_method: VarianceMethod::Sbpv,
            variance_probes: 100,
            inference: InferenceKind::Iterative,
            opt_grad_tol: 1e-5,
            opt_max_iter: 200,
            max_restarts: 5,
            seed: 0,
            neighbor_metric: MetricKind::Correlation,
            lloyd_iters: 10,
            threads: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_neighbors == 0 && self.num_inducing == 0 {
            return Err(Error::InvalidParameter(
                "at least one of inducing points or neighbors must be positive".into(),
            ));
        }
        for (name, v) in [("cg_tol", self.cg_tol), ("opt_grad_tol", self.opt_grad_tol)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!("{name} must be in (0,1), got {v}")));
            }
        }
        if self.slq_probes == 0 || self.variance_probes == 0 {
            return Err(Error::InvalidParameter("probe counts must be positive".into()));
        }
        if self.preconditioner == PreconditionerKind::Fitc && self.pc_rank == 0 {
            return Err(Error::InvalidParameter("FITC preconditioner rank must be positive".into()));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> Vec<(String, String)> {
        vec![
            ("likelihood".into(), self.likelihood.name().into()),
            ("kernel".into(), self.kernel_family.name().into()),
            ("num_inducing".into(), self.num_inducing.to_string()),
            ("num_neighbors".into(), self.num_neighbors.to_string()),
            ("preconditioner".into(), self.preconditioner.name().into()),
            ("pc_rank".into(), self.pc_rank.to_string()),
            ("cg_tol".into(), self.cg_tol.to_string()),
            ("probes".into(), self.slq_probes.to_string()),
            ("variance_method".into(), self.variance_method.name().into()),
            ("variance_probes".into(), self.variance_probes.to_string()),
            ("inference".into(), self.inference.name().into()),
            ("opt_grad_tol".into(), self.opt_grad_tol.to_string()),
            ("opt_max_iter".into(), self.opt_max_iter.to_string()),
            ("max_restarts".into(), self.max_restarts.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("neighbor_metric".into(), self.neighbor_metric.name().into()),
            ("lloyd_iters".into(), self.lloyd_iters.to_string()),
            ("threads".into(), self.threads.to_string()),
        ]
    }

    pub fn set_key_value(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &str| Error::InvalidParameter(format!("{key}: {e}"));
        match key {
            "likelihood" => self.likelihood = LikelihoodKind::parse(value)?,
            "kernel" => self.kernel_family = KernelFamily::parse(value)?,
            "num_inducing" => self.num_inducing = value.parse().map_err(|_| bad("not a count"))?,
            "num_neighbors" => self.num_neighbors = value.parse().map_err(|_| bad("not a count"))?,
            "preconditioner" => self.preconditioner = PreconditionerKind::parse(value)?,
            "pc_rank" => self.pc_rank = value.parse().map_err(|_| bad("not a count"))?,
            "cg_tol" => self.cg_tol = value.parse().map_err(|_| bad("not a number"))?,
            "probes" => self.slq_probes = value.parse().map_err(|_| bad("not a count"))?,
            "variance_method" => self.variance_method = VarianceMethod::parse(value)?,
            "variance_probes" => self.variance_probes = value.parse().map_err(|_| bad("not a count"))?,
            "inference" => self.inference = InferenceKind::parse(value)?,
            "opt_grad_tol" => self.opt_grad_tol = value.parse().map_err(|_| bad("not a number"))?,
            "opt_max_iter" => self.opt_max_iter = value.parse().map_err(|_| bad("not a count"))?,
            "max_restarts" => self.max_restarts = value.parse().map_err(|_| bad("not a count"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("not a seed"))?,
            "neighbor_metric" => self.neighbor_metric = MetricKind::parse(value)?,
            "lloyd_iters" => self.lloyd_iters = value.parse().map_err(|_| bad("not a count"))?,
            "threads" => self.threads = value.parse().map_err(|_| bad("not a count"))?,
            other => return Err(Error::InvalidParameter(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    pub nll_path: Vec<f64>,
    pub refresh_iterations: Vec<usize>,
    pub restarts: usize,
    pub optimizer_iterations: usize,
    pub degenerate_points: usize,
}

#[derive(Debug, Clone)]
pub struct FittedModel {
    pub config: FitConfig,
    pub kernel: KernelSpec,
    pub final_nll: f64,
    /// Inducing points in raw input coordinates.
    pub inducing_points: Inputs,
    /// FITC preconditioner inducing points (iterative Bernoulli route).
    pub pc_points: Option<Inputs>,
    pub neighbor_sets: Vec<Vec<usize>>,
    pub trace: FitTrace,
}

/// Kernel-parameter initialization: data variance (Gaussian) or unit
/// variance (Bernoulli), half the per-dimension range for every length
/// scale, a tenth of the data variance for the nugget.
pub fn initial_kernel(config: &FitConfig, data: &Dataset) -> Result<KernelSpec> {
    let y = data.response()?;
    let var_y = {
        let mean = y.sum() / y.len() as f64;
        (y.map(|v| (v - mean) * (v - mean)).sum() / y.len() as f64).max(1e-8)
    };
    let variance = match config.likelihood {
        LikelihoodKind::Gaussian => var_y,
        LikelihoodKind::Bernoulli => 1.0,
    };
    let mut scales = Vec::with_capacity(data.dim());
    for j in 0..data.dim() {
        let col = data.inputs.column(j);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in col.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        scales.push(((hi - lo) / 2.0).max(1e-3));
    }
    let nugget = match config.likelihood {
        LikelihoodKind::Gaussian => 0.1 * var_y,
        LikelihoodKind::Bernoulli => 0.0,
    };
    KernelSpec::new(config.kernel_family, variance, scales, nugget)
}

pub struct Structures {
    pub inducing: Inputs,
    pub pc_points: Option<Inputs>,
    pub neighbor_sets: Vec<Vec<usize>>,
    pub degenerate: usize,
}

/// Choose inducing points (kMeans++ in transformed space, optionally warm
/// started from previous raw-space centroids) and neighbor sets under the
/// configured metric.
pub fn choose_structures(
    config: &FitConfig,
    kernel: &KernelSpec,
    data: &Inputs,
    warm_inducing: Option<&Inputs>,
    warm_pc: Option<&Inputs>,
) -> Result<Structures> {
    let transformed = kernel.transform_inputs(data)?;
    let pick = |m: usize, warm: Option<&Inputs>, seed: u64| -> Result<Inputs> {
        if m == 0 {
            return Ok(Inputs::zeros(0, data.ncols()));
        }
        let warm_t = warm
            .filter(|w| w.nrows() == m)
            .map(|w| kernel.transform_inputs(w))
            .transpose()?;
        let set = kmeanspp_inducing(&transformed, m, seed, warm_t.as_ref(), config.lloyd_iters)?;
        Ok(kernel.untransform_inputs(&set.centroids))
    };
    let inducing = pick(config.num_inducing, warm_inducing, config.seed)?;
    let needs_pc = config.likelihood == LikelihoodKind::Bernoulli
        && config.inference == InferenceKind::Iterative
        && config.preconditioner == PreconditionerKind::Fitc;
    let pc_points = if needs_pc {
        Some(pick(config.pc_rank, warm_pc, config.seed.wrapping_add(0x9E37_79B9))?)
    } else {
        None
    };

    let partitions = rayon::current_num_threads();
    let (neighbor_sets, diag) = match config.neighbor_metric {
        MetricKind::Correlation => {
            let metric = CorrelationMetric::new(kernel, &inducing, data)?;
            select_neighbors(&metric, config.num_neighbors, partitions)?
        }
        MetricKind::Euclidean => {
            let metric = EuclideanMetric::new(kernel, data)?;
            select_neighbors(&metric, config.num_neighbors, partitions)?
        }
    };
    Ok(Structures { inducing, pc_points, neighbor_sets, degenerate: diag.degenerate_points })
}

fn iterative_settings(config: &FitConfig, pc_points: Option<&Inputs>) -> IterativeSettings {
    IterativeSettings {
        kind: config.preconditioner,
        pc_points: pc_points.cloned(),
        cg: CgConfig::with_tol(config.cg_tol),
        probes: config.slq_probes,
        seed: config.seed.wrapping_add(0x510),
        control_variates: true,
    }
}

struct FitObjective<'a> {
    config: &'a FitConfig,
    data: &'a Inputs,
    y: &'a DVector<f64>,
    structures: Structures,
    template: KernelSpec,
    warm_mode: Option<DVector<f64>>,
    evals: usize,
}

impl FitObjective<'_> {
    fn with_nugget(&self) -> bool {
        self.config.likelihood == LikelihoodKind::Gaussian
    }

    fn kernel_at(&self, x: &DVector<f64>) -> Result<KernelSpec> {
        let theta = x.map(f64::exp);
        self.template.with_theta(&theta, self.with_nugget())
    }

    fn eval(&mut self, x: &DVector<f64>, want_grad: bool) -> Result<(f64, Option<DVector<f64>>)> {
        self.evals += 1;
        let kernel = self.kernel_at(x)?;
        let with_nugget = self.with_nugget();
        match self.config.likelihood {
            LikelihoodKind::Gaussian => {
                if want_grad {
                    let (model, derivs) = VifModel::build_with_derivs(
                        kernel,
                        &self.structures.inducing,
                        self.data,
                        &self.structures.neighbor_sets,
                        with_nugget,
                    )?;
                    let f = model.nll(self.y)?;
                    let g = model.nll_grad(self.y, &derivs)?;
                    // d/d(log θ) = θ · d/dθ
                    let theta = x.map(f64::exp);
                    Ok((f, Some(g.component_mul(&theta))))
                } else {
                    let model = VifModel::build(
                        kernel,
                        &self.structures.inducing,
                        self.data,
                        &self.structures.neighbor_sets,
                        with_nugget,
                    )?;
                    Ok((model.nll(self.y)?, None))
                }
            }
            LikelihoodKind::Bernoulli => {
                let lik = BernoulliLogit;
                let settings =
                    iterative_settings(self.config, self.structures.pc_points.as_ref());
                let (model, derivs) = if want_grad {
                    let (m, d) = VifModel::build_with_derivs(
                        kernel,
                        &self.structures.inducing,
                        self.data,
                        &self.structures.neighbor_sets,
                        false,
                    )?;
                    (m, Some(d))
                } else {
                    (
                        VifModel::build(
                            kernel,
                            &self.structures.inducing,
                            self.data,
                            &self.structures.neighbor_sets,
                            false,
                        )?,
                        None,
                    )
                };
                let solver = match self.config.inference {
                    InferenceKind::Cholesky => LaplaceSolver::Cholesky,
                    InferenceKind::Iterative => LaplaceSolver::Iterative(&settings),
                };
                let state = find_mode(
                    &model,
                    &lik,
                    self.y,
                    &solver,
                    &NewtonConfig::default(),
                    self.warm_mode.as_ref(),
                )?;
                self.warm_mode = Some(state.mode.clone());
                match derivs {
                    None => Ok((vifla_nll(&model, &lik, self.y, &state, &solver)?, None)),
                    Some(d) => {
                        let (f, parts) =
                            vifla_nll_grad(&model, &lik, self.y, &state, &solver, &d)?;
                        let theta = x.map(f64::exp);
                        Ok((f, Some(parts.total().component_mul(&theta))))
                    }
                }
            }
        }
    }
}

impl Objective for FitObjective<'_> {
    fn value(&mut self, x: &DVector<f64>) -> Result<f64> {
        self.eval(x, false).map(|(f, _)| f)
    }
    fn value_grad(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (f, g) = self.eval(x, true)?;
        Ok((f, g.expect("gradient requested")))
    }
}

/// Fit the model: L-BFGS over log-parameters with the re-determination
/// schedule and post-convergence refresh/restart loop.
pub fn fit(config: &FitConfig, data: &Dataset) -> Result<FittedModel> {
    config.validate()?;
    let y = data.response()?.clone();
    if config.likelihood == LikelihoodKind::Bernoulli {
        data.check_binary()?;
    }
    let template = initial_kernel(config, data)?;
    let mut trace = FitTrace::default();
    let structures = choose_structures(config, &template, &data.inputs, None, None)?;
    trace.degenerate_points = structures.degenerate;

    let mut objective = FitObjective {
        config,
        data: &data.inputs,
        y: &y,
        structures,
        template: template.clone(),
        warm_mode: None,
        evals: 0,
    };
    let mut x = template.theta(objective.with_nugget()).map(f64::ln);
    let lbfgs_config = LbfgsConfig {
        grad_tol: config.opt_grad_tol,
        max_iter: config.opt_max_iter,
        ..Default::default()
    };

    let mut total_iterations = 0;
    let mut final_value;
    let mut restarts = 0;
    loop {
        let refreshes = std::cell::RefCell::new(Vec::new());
        let outcome = lbfgs::minimize(&mut objective, x.clone(), &lbfgs_config, |obj, iter, xi| {
            if iter.is_power_of_two() {
                let kernel = obj.kernel_at(xi)?;
                let st = choose_structures(
                    obj.config,
                    &kernel,
                    obj.data,
                    Some(&obj.structures.inducing),
                    obj.structures.pc_points.as_ref(),
                )?;
                obj.structures = st;
                refreshes.borrow_mut().push(total_iterations + iter);
                return Ok(true);
            }
            Ok(false)
        })?;
        trace.refresh_iterations.extend(refreshes.into_inner());
        total_iterations += outcome.iterations;
        x = outcome.x;
        final_value = outcome.value;
        trace.nll_path.push(final_value);

        // Post-convergence refresh; restart if it moved the objective.
        let kernel = objective.kernel_at(&x)?;
        let st = choose_structures(
            config,
            &kernel,
            &data.inputs,
            Some(&objective.structures.inducing),
            objective.structures.pc_points.as_ref(),
        )?;
        objective.structures = st;
        trace.refresh_iterations.push(total_iterations);
        let refreshed_value = objective.value(&x)?;
        let tol = config.opt_grad_tol * (1.0 + final_value.abs());
        if (refreshed_value - final_value).abs() <= tol || restarts >= config.max_restarts {
            final_value = refreshed_value;
            break;
        }
        restarts += 1;
    }
    trace.restarts = restarts;
    trace.optimizer_iterations = total_iterations;

    let kernel = objective.kernel_at(&x)?;
    Ok(FittedModel {
        config: config.clone(),
        kernel,
        final_nll: final_value,
        inducing_points: objective.structures.inducing.clone(),
        pc_points: objective.structures.pc_points.clone(),
        neighbor_sets: objective.structures.neighbor_sets.clone(),
        trace,
    })
}

/// Prediction neighbor sets over the training points for out-of-sample
/// inputs (training-only conditioning).
pub fn prediction_neighbor_sets(
    fitted: &FittedModel,
    train: &Inputs,
    pred: &Inputs,
    m_v: usize,
) -> Result<Vec<Vec<usize>>> {
    let queries: Vec<Vec<f64>> =
        (0..pred.nrows()).map(|i| pred.row(i).iter().copied().collect()).collect();
    match fitted.config.neighbor_metric {
        MetricKind::Correlation => {
            let metric = CorrelationMetric::new(&fitted.kernel, &fitted.inducing_points, train)?;
            let tree: CoverTree = build_metric_tree(&metric)?;
            Ok(select_prediction_neighbors(&metric, std::slice::from_ref(&tree), &queries, m_v))
        }
        MetricKind::Euclidean => {
            let metric = EuclideanMetric::new(&fitted.kernel, train)?;
            let tree: CoverTree = build_metric_tree(&metric)?;
            Ok(select_prediction_neighbors(&metric, std::slice::from_ref(&tree), &queries, m_v))
        }
    }
}

pub struct Predictions {
    pub output: PredictionOutput,
    /// Class probabilities (Bernoulli only).
    pub probabilities: Option<DVector<f64>>,
}

/// Predict at new inputs, rebuilding the model at the fitted parameters and
/// stored structures.
pub fn predict(fitted: &FittedModel, train: &Dataset, pred: &Inputs, latent: bool) -> Result<Predictions> {
    if pred.ncols() != train.dim() {
        return Err(Error::DimensionMismatch {
            context: "prediction inputs",
            expected: train.dim(),
            got: pred.ncols(),
        });
    }
    let y = train.response()?;
    let psets = prediction_neighbor_sets(fitted, &train.inputs, pred, fitted.config.num_neighbors)?;
    match fitted.config.likelihood {
        LikelihoodKind::Gaussian => {
            let model = VifModel::build(
                fitted.kernel.clone(),
                &fitted.inducing_points,
                &train.inputs,
                &fitted.neighbor_sets,
                true,
            )?;
            let scope = if latent { PredictionScope::Latent } else { PredictionScope::Response };
            let output = predict_gaussian(&model, y, pred, &psets, scope)?;
            Ok(Predictions { output, probabilities: None })
        }
        LikelihoodKind::Bernoulli => {
            let model = VifModel::build(
                fitted.kernel.clone(),
                &fitted.inducing_points,
                &train.inputs,
                &fitted.neighbor_sets,
                false,
            )?;
            let lik = BernoulliLogit;
            let settings = iterative_settings(&fitted.config, fitted.pc_points.as_ref());
            let solver = match fitted.config.inference {
                InferenceKind::Cholesky => LaplaceSolver::Cholesky,
                InferenceKind::Iterative => LaplaceSolver::Iterative(&settings),
            };
            let state: LaplaceState =
                find_mode(&model, &lik, y, &solver, &NewtonConfig::default(), None)?;
            let method = match fitted.config.inference {
                InferenceKind::Cholesky => VarianceMethod::Cholesky,
                InferenceKind::Iterative => fitted.config.variance_method,
            };
            let output = predict_laplace_latent(
                &model,
                &state,
                pred,
                &psets,
                method,
                Some(&settings),
                fitted.config.variance_probes,
                fitted.config.seed.wrapping_add(0xA11CE),
            )?;
            let probabilities = predict_response_prob(&output, &lik, 64)?;
            Ok(Predictions { output, probabilities: Some(probabilities) })
        }
    }
}

const MODEL_FORMAT: &str = "vifgp-model-v1";

/// Persist the fitted model: a key=value text file plus sidecar binary
/// blobs for inducing points and neighbor sets.
pub fn save_model(path: &Path, fitted: &FittedModel) -> Result<()> {
    let mut text = String::new();
    text.push_str(&format!("format={MODEL_FORMAT}\n"));
    for (k, v) in fitted.config.to_key_values() {
        text.push_str(&format!("{k}={v}\n"));
    }
    text.push_str(&format!("variance={:.17e}\n", fitted.kernel.variance));
    let scales: Vec<String> =
        fitted.kernel.length_scales.iter().map(|x| format!("{x:.17e}")).collect();
    text.push_str(&format!("length_scales={}\n", scales.join(",")));
    text.push_str(&format!("nugget={:.17e}\n", fitted.kernel.nugget));
    text.push_str(&format!("final_nll={:.17e}\n", fitted.final_nll));
    text.push_str(&format!("restarts={}\n", fitted.trace.restarts));
    std::fs::write(path, text)?;

    write_points_blob(&sidecar(path, "inducing.bin"), &fitted.inducing_points)?;
    if let Some(pc) = &fitted.pc_points {
        write_points_blob(&sidecar(path, "pc.bin"), pc)?;
    }
    write_neighbors_blob(&sidecar(path, "neighbors.bin"), &fitted.neighbor_sets)?;
    Ok(())
}

fn sidecar(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".");
    os.push(suffix);
    os.into()
}

const BLOB_MAGIC: u64 = 0x5649_4647_5042_0001;

fn write_points_blob(path: &Path, points: &Inputs) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&BLOB_MAGIC.to_le_bytes())?;
    f.write_all(&(points.nrows() as u64).to_le_bytes())?;
    f.write_all(&(points.ncols() as u64).to_le_bytes())?;
    for i in 0..points.nrows() {
        for j in 0..points.ncols() {
            f.write_all(&points[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_points_blob(path: &Path) -> Result<Inputs> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take_u64 = || -> Result<u64> {
        let v = u64::from_le_bytes(
            bytes
                .get(at..at + 8)
                .ok_or_else(|| Error::InvalidData("truncated blob".into()))?
                .try_into()
                .unwrap(),
        );
        at += 8;
        Ok(v)
    };
    if take_u64()? != BLOB_MAGIC {
        return Err(Error::InvalidData("bad blob magic".into()));
    }
    let rows = take_u64()? as usize;
    let cols = take_u64()? as usize;
    let mut out = Inputs::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = f64::from_le_bytes(
                bytes
                    .get(at..at + 8)
                    .ok_or_else(|| Error::InvalidData("truncated blob".into()))?
                    .try_into()
                    .unwrap(),
            );
            at += 8;
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

fn write_neighbors_blob(path: &Path, sets: &[Vec<usize>]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&BLOB_MAGIC.to_le_bytes())?;
    f.write_all(&(sets.len() as u64).to_le_bytes())?;
    for s in sets {
        f.write_all(&(s.len() as u32).to_le_bytes())?;
        for &j in s {
            f.write_all(&(j as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_neighbors_blob(path: &Path) -> Result<Vec<Vec<usize>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes.get(*at..*at + n).ok_or_else(|| Error::InvalidData("truncated blob".into()))?;
        *at += n;
        Ok(s)
    };
    let magic = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
    if magic != BLOB_MAGIC {
        return Err(Error::InvalidData("bad blob magic".into()));
    }
    let count = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let mut s = Vec::with_capacity(len);
        for _ in 0..len {
            s.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    let text = std::fs::read_to_string(path)?;
    let mut config = FitConfig::default();
    let mut variance = None;
    let mut scales: Option<Vec<f64>> = None;
    let mut nugget = None;
    let mut final_nll = None;
    let mut restarts = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidData(format!("model line {lineno}: missing '='")))?;
        match k {
            "format" => {
                if v != MODEL_FORMAT {
                    return Err(Error::InvalidData(format!("unsupported model format '{v}'")));
                }
            }
            "variance" => variance = Some(v.parse().map_err(|_| Error::InvalidData("bad variance".into()))?),
            "length_scales" => {
                scales = Some(
                    v.split(',')
                        .map(|x| x.parse().map_err(|_| Error::InvalidData("bad length scale".into())))
                        .collect::<Result<Vec<f64>>>()?,
                )
            }
            "nugget" => nugget = Some(v.parse().map_err(|_| Error::InvalidData("bad nugget".into()))?),
            "final_nll" => final_nll = Some(v.parse().map_err(|_| Error::InvalidData("bad nll".into()))?),
            "restarts" => restarts = v.parse().unwrap_or(0),
            other => config.set_key_value(other, v)?,
        }
    }
    let kernel = KernelSpec::new(
        config.kernel_family,
        variance.ok_or_else(|| Error::InvalidData("model missing variance".into()))?,
        scales.ok_or_else(|| Error::InvalidData("model missing length scales".into()))?,
        nugget.ok_or_else(|| Error::InvalidData("model missing nugget".into()))?,
    )?;
    let inducing_points = read_points_blob(&sidecar(path, "inducing.bin"))?;
    let pc_path = sidecar(path, "pc.bin");
    let pc_points = pc_path.exists().then(|| read_points_blob(&pc_path)).transpose()?;
    let neighbor_sets = read_neighbors_blob(&sidecar(path, "neighbors.bin"))?;
    Ok(FittedModel {
        config,
        kernel,
        final_nll: final_nll.ok_or_else(|| Error::InvalidData("model missing final_nll".into()))?,
        inducing_points,
        pc_points,
        neighbor_sets,
        trace: FitTrace { restarts, ..Default::default() },
    })
}
