//! The calibration driver: initial design and reduction, then rounds of
//! GP fitting, batch selection in the latent space, mapping back to the
//! simulator box and concurrent evaluation.
//!
//! Iteration `k` (1-based) selects a batch using everything evaluated in
//! iterations `< k`, evaluates it, and appends the running minimum to the
//! curve. Iteration 0 is the initial design. Dynamic modes rebuild the
//! reduction (and a dynamic mean) before selecting at every even iteration.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{select_batch_indices, AcquisitionSpec};
use crate::active_subspace::Subspace;
use crate::error::{Error, Result};
use crate::gp::{optimize_hyperparameters, GpModel, HyperBounds, MeanFunction};
use crate::kernels::KernelSpec;
use crate::neural::{fine_tune_reducer, train_mean, train_reducer, MeanNet, ReducerNet, TrainConfig};
use crate::rng::{stream_rng, stream_seed, Stream};
use crate::sampling::{initial_design_size, lhs, BoxDomain, DEFAULT_POOL_SIZE};
use crate::simulators::{Simulator, SimulatorError};

pub const STATE_VERSION: u32 = 1;

/// How the search space is reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DrMode {
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "as-static")]
    AsStatic,
    #[serde(rename = "as-dynamic")]
    AsDynamic,
    #[serde(rename = "dl-static")]
    DlStatic,
    #[serde(rename = "dl-dynamic")]
    DlDynamic,
}

/// Prior mean of the surrogate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanMode {
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "dl-static")]
    DlStatic,
    #[serde(rename = "dl-dynamic")]
    DlDynamic,
}

macro_rules! string_enum {
    ($t:ty, $($v:path => $s:literal),+) => {
        impl $t {
            pub fn as_str(&self) -> &'static str {
                match self { $($v => $s),+ }
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::Config(format!("unknown value {s:?}"))),
                }
            }
        }
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum!(DrMode,
    DrMode::Original => "original",
    DrMode::AsStatic => "as-static",
    DrMode::AsDynamic => "as-dynamic",
    DrMode::DlStatic => "dl-static",
    DrMode::DlDynamic => "dl-dynamic");

string_enum!(MeanMode,
    MeanMode::Zero => "zero",
    MeanMode::DlStatic => "dl-static",
    MeanMode::DlDynamic => "dl-dynamic");

impl DrMode {
    fn is_dynamic(&self) -> bool {
        matches!(self, DrMode::AsDynamic | DrMode::DlDynamic)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub trials: usize,
    pub batch_size: usize,
    pub pool_size: usize,
    /// Initial design size; clamped to `[2d, 10d]`, default `10d`.
    pub initial_design: Option<usize>,
    pub dr_mode: DrMode,
    pub mean_mode: MeanMode,
    pub acquisition: AcquisitionSpec,
    pub kernel: KernelSpec,
    pub seed: u64,
    /// Concurrent simulator evaluations.
    pub parallelism: usize,
    /// Active-subspace dimension; `None` uses the detected gap.
    pub active_dim: Option<usize>,
    /// Autoencoder bottleneck size; `None` uses the active-subspace gap of
    /// the initial design (at most `d - 1`).
    pub latent_dim: Option<usize>,
    /// Dynamic modes rebuild at iterations divisible by this.
    pub rebuild_every: usize,
    /// Hyperparameters are searched once this many evaluations exist.
    pub hyperopt_min_points: usize,
    /// Epochs of warm-started training at each dynamic reducer rebuild.
    pub fine_tune_epochs: usize,
    pub reducer: TrainConfig,
    pub mean_net: TrainConfig,
    /// Abort when more than this fraction of the initial design fails.
    pub max_failure_fraction: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            trials: 60,
            batch_size: 4,
            pool_size: DEFAULT_POOL_SIZE,
            initial_design: None,
            dr_mode: DrMode::Original,
            mean_mode: MeanMode::Zero,
            acquisition: AcquisitionSpec::default(),
            kernel: KernelSpec::default(),
            seed: 0,
            parallelism: 4,
            active_dim: None,
            latent_dim: None,
            rebuild_every: 2,
            hyperopt_min_points: 10,
            fine_tune_epochs: 100,
            reducer: TrainConfig::default(),
            mean_net: TrainConfig::default(),
            max_failure_fraction: 0.5,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.trials == 0 || self.batch_size == 0 || self.parallelism == 0 {
            return bad("trials, batch_size and parallelism must be at least 1");
        }
        if self.pool_size < self.batch_size {
            return bad("pool_size must be at least batch_size");
        }
        if self.rebuild_every == 0 {
            return bad("rebuild_every must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return bad("max_failure_fraction must lie in [0, 1]");
        }
        self.kernel.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.acquisition.validate().map_err(|e| Error::Config(e.to_string()))?;
        if matches!(self.dr_mode, DrMode::DlStatic | DrMode::DlDynamic) && d < 2 {
            return bad("autoencoder reduction needs at least two input dimensions");
        }
        if let Some(r) = self.latent_dim {
            if r == 0 || r >= d {
                return Err(Error::Config(format!("latent_dim must lie in [1, {}]", d.saturating_sub(1))));
            }
        }
        if let Some(n) = self.active_dim {
            if n == 0 || n > d {
                return Err(Error::Config(format!("active_dim must lie in [1, {d}]")));
            }
        }
        for t in [&self.reducer, &self.mean_net] {
            if t.hidden == 0 || t.batch_size == 0 || !(t.cap > 0.0) || !(t.learning_rate >= 0.0) {
                return bad("network settings need positive hidden size, batch size and cap");
            }
        }
        Ok(())
    }
}

/// One successful simulator run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub id: u64,
    pub iteration: usize,
    /// Point sent to the simulator, original units.
    pub theta: Vec<f64>,
    /// Latent point the search worked with.
    pub latent: Vec<f64>,
    pub output: Vec<f64>,
    pub loss: f64,
    pub wall_time_s: f64,
    /// The decoded point left the box and was clamped.
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub id: u64,
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingPoint {
    pub id: u64,
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub latent: Vec<f64>,
    pub clamped: bool,
}

/// The current map between normalized inputs and search coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reduction {
    Identity { dim: usize },
    Subspace { subspace: Subspace },
    Reducer { net: ReducerNet },
}

impl Reduction {
    pub fn latent_box(&self) -> BoxDomain {
        match self {
            Reduction::Identity { dim } => BoxDomain::centered_unit(*dim),
            Reduction::Subspace { subspace } => subspace.latent_bounds().clone(),
            Reduction::Reducer { net } => net.latent_bounds(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_box().dim()
    }

    /// Normalized input → latent.
    pub fn to_latent(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Reduction::Identity { .. } => z.to_vec(),
            Reduction::Subspace { subspace } => subspace.project(z),
            Reduction::Reducer { net } => net.encode(z),
        }
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub version: u32,
    pub config: CalibrationConfig,
    pub domain: BoxDomain,
    /// Last completed iteration (0 once the initial design is in).
    pub iteration: usize,
    pub evaluated: Vec<EvaluationRecord>,
    pub failures: Vec<FailureRecord>,
    pub pending: Vec<PendingPoint>,
    pub next_id: u64,
    pub reduction: Reduction,
    pub mean_net: Option<MeanNet>,
    /// Hyperparameters found last; the warm start for the next search.
    pub kernel: KernelSpec,
    /// Running minimum loss after each iteration.
    pub curve: Vec<f64>,
    /// Points issued to the simulator per iteration (design included).
    pub issued: Vec<usize>,
    pub clamped: usize,
    pub dropped: usize,
    /// Eigenvalues of the most recent active-subspace analysis.
    pub spectrum: Option<Vec<f64>>,
    pub rebuilds: Vec<usize>,
    pub mean_retrains: Vec<usize>,
}

impl CalibrationState {
    pub fn best(&self) -> Option<&EvaluationRecord> {
        self.evaluated.iter().fold(None, |acc: Option<&EvaluationRecord>, r| match acc {
            Some(b) if b.loss <= r.loss => Some(b),
            _ => Some(r),
        })
    }

    pub fn is_complete(&self) -> bool {
        self.iteration >= self.config.trials && self.pending.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: CalibrationState = serde_json::from_str(s)?;
        if state.version != STATE_VERSION {
            return Err(Error::State(format!("unsupported state version {}", state.version)));
        }
        Ok(state)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPoint {
    pub id: u64,
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub latent: Vec<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub simulator: String,
    pub best: Option<BestPoint>,
    pub evaluations: usize,
    pub iterations: usize,
    pub failures: Vec<FailureRecord>,
    pub clamped: usize,
    pub dropped: usize,
    pub curve: Vec<f64>,
    pub latent_dim: usize,
    pub spectrum: Option<Vec<f64>>,
    pub rebuilds: Vec<usize>,
    pub mean_retrains: Vec<usize>,
    pub kernel: KernelSpec,
    pub seed: u64,
    pub config: CalibrationConfig,
}

/// Mean squared error between simulated and observed series.
pub fn loss(y_sim: &[f64], y_obs: &[f64]) -> Result<f64> {
    if y_sim.len() != y_obs.len() || y_sim.is_empty() {
        return Err(Error::invalid(format!(
            "simulated series has {} values, observed has {}",
            y_sim.len(),
            y_obs.len()
        )));
    }
    Ok(y_sim.iter().zip(y_obs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y_sim.len() as f64)
}

/// Outcome of one simulator call.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub output: std::result::Result<Vec<f64>, SimulatorError>,
    pub wall_time_s: f64,
}

/// A unit of simulator work.
#[derive(Clone, Debug)]
pub struct Job {
    pub id: String,
    pub theta: Vec<f64>,
    pub seed: u64,
}

/// Run `jobs` on up to `parallelism` workers. Results come back in job
/// order whatever order the workers finish in.
pub fn evaluate_batch(sim: &dyn Simulator, jobs: &[Job], parallelism: usize) -> Vec<Evaluation> {
    let workers = parallelism.max(1).min(jobs.len());
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let start = Instant::now();
                let output = sim.simulate(&job.theta, job.seed, &job.id);
                let _ = tx.send((i, Evaluation { output, wall_time_s: start.elapsed().as_secs_f64() }));
            });
        }
    });
    drop(tx);
    let mut slots: Vec<Option<Evaluation>> = vec![None; jobs.len()];
    for (i, e) in rx {
        slots[i] = Some(e);
    }
    slots.into_iter().map(|e| e.expect("every job reports")).collect()
}

/// Owns the state of one calibration and advances it an iteration at a time.
pub struct Calibrator<'a> {
    sim: &'a dyn Simulator,
    observed: &'a [f64],
    state: CalibrationState,
}

impl<'a> Calibrator<'a> {
    /// Evaluate the initial design, build the reduction and mean, and return
    /// a calibrator at iteration 0.
    pub fn start(config: CalibrationConfig, sim: &'a dyn Simulator, observed: &'a [f64]) -> Result<Self> {
        let domain = sim.domain().clone();
        let d = domain.dim();
        config.validate(d)?;
        let q = initial_design_size(d, config.initial_design);
        let design = lhs(&domain, q, &mut stream_rng(config.seed, Stream::Design, 0))?;
        let mut state = CalibrationState {
            version: STATE_VERSION,
            kernel: config.kernel,
            config,
            domain,
            iteration: 0,
            evaluated: Vec::new(),
            failures: Vec::new(),
            pending: Vec::new(),
            next_id: 0,
            reduction: Reduction::Identity { dim: d },
            mean_net: None,
            curve: Vec::new(),
            issued: Vec::new(),
            clamped: 0,
            dropped: 0,
            spectrum: None,
            rebuilds: Vec::new(),
            mean_retrains: Vec::new(),
        };
        for theta in design {
            let id = state.next_id;
            state.next_id += 1;
            let latent = state.domain.normalize(&theta);
            state.pending.push(PendingPoint { id, iteration: 0, theta, latent, clamped: false });
        }
        let mut cal = Calibrator { sim, observed, state };
        cal.evaluate_pending();
        let ok = cal.state.evaluated.len();
        let failed = cal.state.failures.len();
        if failed as f64 > cal.state.config.max_failure_fraction * q as f64 || ok < 2 {
            let sample: Vec<String> = cal.state.failures.iter().take(3).map(|f| f.error.clone()).collect();
            return Err(Error::Aborted(format!(
                "{failed} of {q} initial evaluations failed (first errors: {})",
                sample.join("; ")
            )));
        }
        cal.build_reduction(0, false)?;
        if cal.state.config.mean_mode != MeanMode::Zero {
            cal.train_mean(0, false)?;
        }
        cal.push_curve();
        log::info!(
            "initial design: {ok} evaluations, {failed} failures, latent dimension {}, best loss {:.6e}",
            cal.state.reduction.latent_dim(),
            cal.state.curve[0]
        );
        Ok(cal)
    }

    /// Continue from a saved state.
    pub fn resume(state: CalibrationState, sim: &'a dyn Simulator, observed: &'a [f64]) -> Result<Self> {
        if state.version != STATE_VERSION {
            return Err(Error::State(format!("unsupported state version {}", state.version)));
        }
        if state.domain != *sim.domain() {
            return Err(Error::State("saved state was produced for a different simulator box".into()));
        }
        state.config.validate(state.domain.dim())?;
        Ok(Calibrator { sim, observed, state })
    }

    pub fn state(&self) -> &CalibrationState {
        &self.state
    }

    pub fn into_state(self) -> CalibrationState {
        self.state
    }

    pub fn is_complete(&self) -> bool {
        self.state.is_complete()
    }

    /// Run one iteration. Returns `false` once all trials are done.
    pub fn step(&mut self) -> Result<bool> {
        if !self.state.pending.is_empty() {
            // saved between selection and evaluation
            let k = self.state.pending[0].iteration;
            self.evaluate_pending();
            self.state.iteration = k;
            self.push_curve();
            return Ok(true);
        }
        if self.state.iteration >= self.state.config.trials {
            return Ok(false);
        }
        let k = self.state.iteration + 1;
        let cfg = self.state.config.clone();

        if k.is_multiple_of(cfg.rebuild_every) {
            let rebuilt = cfg.dr_mode.is_dynamic();
            if rebuilt {
                self.build_reduction(k, true)?;
                self.state.rebuilds.push(k);
            }
            match cfg.mean_mode {
                MeanMode::DlDynamic => self.train_mean(k, true)?,
                MeanMode::DlStatic if rebuilt => self.train_mean(k, false)?,
                _ => {}
            }
        }

        let model = self.surrogate(k)?;
        let latent_box = self.state.reduction.latent_box();
        let pool = lhs(&latent_box, cfg.pool_size, &mut stream_rng(cfg.seed, Stream::Pool, k as u64))?;
        let spec = cfg.acquisition.at_iteration(k);
        let picks = select_batch_indices(
            &model,
            &pool,
            cfg.batch_size,
            &spec,
            &mut stream_rng(cfg.seed, Stream::Fantasy, k as u64),
        )?;
        for i in picks {
            match self.to_original(&pool[i]) {
                Some((theta, latent, clamped)) => {
                    let id = self.state.next_id;
                    self.state.next_id += 1;
                    if clamped {
                        self.state.clamped += 1;
                        log::debug!("point {id}: decoded parameters left the box and were clamped");
                    }
                    self.state.pending.push(PendingPoint { id, iteration: k, theta, latent, clamped });
                }
                None => {
                    self.state.dropped += 1;
                    log::warn!("iteration {k}: latent suggestion has no feasible pre-image; dropped");
                }
            }
        }
        self.evaluate_pending();
        self.state.iteration = k;
        self.push_curve();
        log::info!(
            "iteration {k}: best loss {:.6e}, {} evaluations",
            self.state.curve[k],
            self.state.evaluated.len()
        );
        Ok(true)
    }

    /// Step until all trials are done.
    pub fn run_to_end(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    pub fn report(&self) -> CalibrationReport {
        let s = &self.state;
        CalibrationReport {
            simulator: self.sim.name().to_string(),
            best: s.best().map(|b| BestPoint {
                id: b.id,
                iteration: b.iteration,
                theta: b.theta.clone(),
                latent: b.latent.clone(),
                loss: b.loss,
            }),
            evaluations: s.evaluated.len(),
            iterations: s.iteration,
            failures: s.failures.clone(),
            clamped: s.clamped,
            dropped: s.dropped,
            curve: s.curve.clone(),
            latent_dim: s.reduction.latent_dim(),
            spectrum: s.spectrum.clone(),
            rebuilds: s.rebuilds.clone(),
            mean_retrains: s.mean_retrains.clone(),
            kernel: s.kernel,
            seed: s.config.seed,
            config: s.config.clone(),
        }
    }

    fn push_curve(&mut self) {
        let best = self.state.best().map_or(f64::INFINITY, |b| b.loss);
        self.state.curve.truncate(self.state.iteration);
        self.state.curve.push(best);
    }

    fn evaluate_pending(&mut self) {
        let pending = std::mem::take(&mut self.state.pending);
        if pending.is_empty() {
            return;
        }
        let seed = self.state.config.seed;
        let jobs: Vec<Job> = pending
            .iter()
            .map(|p| Job { id: p.id.to_string(), theta: p.theta.clone(), seed: stream_seed(seed, Stream::Simulator, p.id) })
            .collect();
        let results = evaluate_batch(self.sim, &jobs, self.state.config.parallelism);
        let iteration = pending[0].iteration;
        while self.state.issued.len() <= iteration {
            self.state.issued.push(0);
        }
        self.state.issued[iteration] += pending.len();
        for (p, e) in pending.into_iter().zip(results) {
            let outcome = e
                .output
                .map_err(Error::from)
                .and_then(|y| loss(&y, self.observed).map(|l| (y, l)))
                .and_then(|(y, l)| {
                    if l.is_finite() {
                        Ok((y, l))
                    } else {
                        Err(Error::invalid("non-finite loss"))
                    }
                });
            match outcome {
                Ok((output, loss)) => self.state.evaluated.push(EvaluationRecord {
                    id: p.id,
                    iteration: p.iteration,
                    theta: p.theta,
                    latent: p.latent,
                    output,
                    loss,
                    wall_time_s: e.wall_time_s,
                    clamped: p.clamped,
                }),
                Err(err) => {
                    log::warn!("evaluation {} failed: {err}", p.id);
                    self.state.failures.push(FailureRecord {
                        id: p.id,
                        iteration: p.iteration,
                        theta: p.theta,
                        error: err.to_string(),
                    });
                }
            }
        }
    }

    fn normalized_data(&self, records: impl Iterator<Item = usize>) -> (Vec<Vec<f64>>, Vec<f64>) {
        records
            .map(|i| {
                let r = &self.state.evaluated[i];
                (self.state.domain.normalize(&r.theta), r.loss)
            })
            .unzip()
    }

    /// Build (k = 0) or rebuild (dynamic modes) the reduction from all
    /// evaluations and move every record into the new latent coordinates.
    fn build_reduction(&mut self, k: usize, rebuild: bool) -> Result<()> {
        let cfg = self.state.config.clone();
        let d = self.state.domain.dim();
        let (zs, ys) = self.normalized_data(0..self.state.evaluated.len());
        let reduction = match cfg.dr_mode {
            DrMode::Original => Reduction::Identity { dim: d },
            DrMode::AsStatic | DrMode::AsDynamic => {
                let subspace = Subspace::from_samples(&zs, &ys, cfg.active_dim)?;
                self.state.spectrum = Some(subspace.eigenvalues().to_vec());
                Reduction::Subspace { subspace }
            }
            DrMode::DlStatic | DrMode::DlDynamic => {
                let mut rng = stream_rng(cfg.seed, Stream::Reducer, k as u64);
                let data: Vec<(Vec<f64>, f64)> = zs.iter().cloned().zip(ys.iter().copied()).collect();
                let net = match (&self.state.reduction, rebuild) {
                    (Reduction::Reducer { net }, true) => {
                        fine_tune_reducer(net, &data, &cfg.reducer, cfg.fine_tune_epochs, &mut rng)?.0
                    }
                    _ => {
                        let r = match cfg.latent_dim {
                            Some(r) => r,
                            None => {
                                let s = Subspace::from_samples(&zs, &ys, None)?;
                                self.state.spectrum = Some(s.eigenvalues().to_vec());
                                s.active_dim().min(d - 1)
                            }
                        };
                        train_reducer(&data, r, &cfg.reducer, &mut rng)?.0
                    }
                };
                Reduction::Reducer { net }
            }
        };
        for (r, z) in self.state.evaluated.iter_mut().zip(&zs) {
            r.latent = reduction.to_latent(z);
        }
        self.state.reduction = reduction;
        Ok(())
    }

    /// Train the mean network on all evaluations (`all`) or the initial design only.
    fn train_mean(&mut self, k: usize, all: bool) -> Result<()> {
        let cfg = &self.state.config;
        let data: Vec<(Vec<f64>, f64)> = self
            .state
            .evaluated
            .iter()
            .filter(|r| all || r.iteration == 0)
            .map(|r| (r.latent.clone(), r.loss))
            .collect();
        let mut rng = stream_rng(cfg.seed, Stream::MeanNet, k as u64);
        let (net, _) = train_mean(&data, &cfg.mean_net, &mut rng)?;
        self.state.mean_net = Some(net);
        self.state.mean_retrains.push(k);
        Ok(())
    }

    fn surrogate(&mut self, k: usize) -> Result<GpModel> {
        let cfg = &self.state.config;
        let mean = match &self.state.mean_net {
            Some(net) if cfg.mean_mode != MeanMode::Zero => MeanFunction::Neural(Arc::new(net.clone())),
            _ => MeanFunction::Zero,
        };
        let xs: Vec<Vec<f64>> = self.state.evaluated.iter().map(|r| r.latent.clone()).collect();
        let ys: Vec<f64> = self.state.evaluated.iter().map(|r| r.loss).collect();
        let model = GpModel::new(self.state.kernel, mean, xs, ys)?;
        let model = if model.len() >= cfg.hyperopt_min_points.max(2) {
            let bounds = HyperBounds::for_model(&model, self.state.reduction.latent_box().diameter());
            optimize_hyperparameters(&model, &bounds, &mut stream_rng(cfg.seed, Stream::Hyperopt, k as u64))?
        } else {
            model.fit()?
        };
        self.state.kernel = *model.kernel();
        Ok(model)
    }

    /// Latent suggestion → (original-space θ, stored latent, clamped flag).
    /// `None` when an active-subspace point has no feasible pre-image even
    /// after being pulled toward the origin.
    fn to_original(&self, v: &[f64]) -> Option<(Vec<f64>, Vec<f64>, bool)> {
        let domain = &self.state.domain;
        let unit = BoxDomain::centered_unit(domain.dim());
        let (z, latent, clamped) = match &self.state.reduction {
            Reduction::Identity { .. } => (v.to_vec(), v.to_vec(), false),
            Reduction::Subspace { subspace } => match subspace.recover(v) {
                Ok(z) => (z, v.to_vec(), false),
                Err(_) => {
                    let w = pull_to_feasible(subspace, v);
                    let z = subspace.recover(&w).ok()?;
                    (z, w, false)
                }
            },
            Reduction::Reducer { net } => {
                let z = net.decode(v);
                let inside = unit.contains(&z);
                (z, v.to_vec(), !inside)
            }
        };
        let theta = domain.clamp(&domain.denormalize(&unit.clamp(&z)));
        Some((theta, latent, clamped))
    }
}

/// Largest `s v` (by bisection on `s ∈ [0, 1]`) that has a pre-image.
fn pull_to_feasible(subspace: &Subspace, v: &[f64]) -> Vec<f64> {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let w: Vec<f64> = v.iter().map(|a| a * mid).collect();
        if subspace.recover(&w).is_ok() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    v.iter().map(|a| a * lo).collect()
}

/// Full run from scratch.
pub fn run(config: CalibrationConfig, sim: &dyn Simulator, observed: &[f64]) -> Result<(CalibrationState, CalibrationReport)> {
    let mut cal = Calibrator::start(config, sim, observed)?;
    cal.run_to_end()?;
    let report = cal.report();
    Ok((cal.into_state(), report))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub const TRACE_HEADER: [&str; 6] = ["iteration", "point_id", "theta_original", "theta_latent", "loss", "wall_time_s"];
pub const CURVE_HEADER: [&str; 2] = ["iteration", "min_loss"];

/// One row per successful evaluation; vector columns are `;`-joined.
pub fn write_trace<W: Write>(out: W, state: &CalibrationState) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for r in &state.evaluated {
        w.write_record([
            r.iteration.to_string(),
            r.id.to_string(),
            join(&r.theta),
            join(&r.latent),
            r.loss.to_string(),
            r.wall_time_s.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve<W: Write>(out: W, curve: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER).map_err(csv_err)?;
    for (i, v) in curve.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Write `trace.csv`, `curve.csv`, `report.json` and `state.json` into `dir`.
pub fn write_outputs(dir: &Path, state: &CalibrationState, report: &CalibrationReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_trace(std::fs::File::create(dir.join("trace.csv"))?, state)?;
    write_curve(std::fs::File::create(dir.join("curve.csv"))?, &state.curve)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("state.json"), state.to_json()?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulators::{Builtin, BuiltinSimulator};

    fn quick(dr: DrMode, mean: MeanMode, trials: usize) -> CalibrationConfig {
        CalibrationConfig {
            trials,
            dr_mode: dr,
            mean_mode: mean,
            pool_size: 200,
            parallelism: 2,
            reducer: TrainConfig { epochs: 60, ..TrainConfig::default() },
            mean_net: TrainConfig { epochs: 60, ..TrainConfig::default() },
            fine_tune_epochs: 10,
            ..CalibrationConfig::default()
        }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let a = vec![3.0; 288];
        let b = vec![3.5; 288];
        assert_eq!(loss(&a, &b).unwrap(), 0.25);
        assert!(loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn one_trial_on_quad1() {
        let sim = BuiltinSimulator::new(Builtin::Quad1);
        let obs = Builtin::Quad1.observed();
        let cfg = CalibrationConfig { batch_size: 1, ..quick(DrMode::Original, MeanMode::Zero, 1) };
        let (state, report) = run(cfg, &sim, &obs).unwrap();
        assert_eq!(state.evaluated.len(), 10 + 1);
        assert_eq!(report.curve.len(), 2);
        assert!(report.curve[1] <= report.curve[0]);
        assert_eq!(report.latent_dim, 1);
    }

    #[test]
    fn every_mode_runs_and_keeps_bookkeeping() {
        let sim = BuiltinSimulator::new(Builtin::Synth9);
        let obs = Builtin::Synth9.observed();
        for dr in [DrMode::Original, DrMode::AsStatic, DrMode::AsDynamic, DrMode::DlStatic, DrMode::DlDynamic] {
            for mean in [MeanMode::Zero, MeanMode::DlDynamic] {
                let cfg = CalibrationConfig { initial_design: Some(18), ..quick(dr, mean, 4) };
                let (state, report) = run(cfg, &sim, &obs).unwrap();
                assert!(report.curve.windows(2).all(|w| w[1] <= w[0]), "{dr} {mean}");
                assert_eq!(
                    state.evaluated.len() + state.failures.len(),
                    state.issued.iter().sum::<usize>(),
                );
                assert_eq!(state.issued[0], 18);
                assert!(state.evaluated.iter().all(|r| sim.domain().contains(&r.theta)));
                if dr.is_dynamic() {
                    assert_eq!(state.rebuilds, vec![2, 4]);
                }
                if mean == MeanMode::DlDynamic {
                    assert_eq!(state.mean_retrains, vec![0, 2, 4]);
                }
                if let Reduction::Subspace { subspace } = &state.reduction {
                    for r in &state.evaluated {
                        let v = subspace.project(&state.domain.normalize(&r.theta));
                        for (a, b) in v.iter().zip(&r.latent) {
                            assert!((a - b).abs() < 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn resume_is_exact() {
        let sim = BuiltinSimulator::new(Builtin::Quad2);
        let obs = Builtin::Quad2.observed();
        let cfg = quick(DrMode::Original, MeanMode::DlStatic, 4);
        let (full, _) = run(cfg.clone(), &sim, &obs).unwrap();

        let mut cal = Calibrator::start(cfg, &sim, &obs).unwrap();
        cal.step().unwrap();
        cal.step().unwrap();
        let saved = cal.into_state().to_json().unwrap();
        let mut resumed = Calibrator::resume(CalibrationState::from_json(&saved).unwrap(), &sim, &obs).unwrap();
        resumed.run_to_end().unwrap();
        let state = resumed.into_state();
        assert_eq!(state.curve, full.curve);
        let strip = |s: &CalibrationState| -> Vec<(u64, Vec<f64>, Vec<f64>, f64)> {
            s.evaluated.iter().map(|r| (r.id, r.theta.clone(), r.latent.clone(), r.loss)).collect()
        };
        assert_eq!(strip(&state), strip(&full));
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let sim = BuiltinSimulator::new(Builtin::Quad2);
        let jobs: Vec<Job> =
            (0..9).map(|i| Job { id: i.to_string(), theta: vec![i as f64 - 4.0, 1.0], seed: i }).collect();
        let a = evaluate_batch(&sim, &jobs, 1);
        let b = evaluate_batch(&sim, &jobs, 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.output, y.output);
        }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = CalibrationConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<CalibrationConfig>(&s).unwrap(), cfg);
        let partial: CalibrationConfig = serde_json::from_str(r#"{"trials": 3, "dr_mode": "as-static"}"#).unwrap();
        assert_eq!(partial.trials, 3);
        assert_eq!(partial.batch_size, 4);
        assert!(serde_json::from_str::<CalibrationConfig>(r#"{"trails": 3}"#).is_err());
        assert!(CalibrationConfig { pool_size: 2, ..cfg.clone() }.validate(2).is_err());
        assert!(CalibrationConfig { latent_dim: Some(2), ..cfg }.validate(2).is_err());
        assert_eq!("as-dynamic".parse::<DrMode>().unwrap(), DrMode::AsDynamic);
        assert!("sideways".parse::<MeanMode>().is_err());
    }
}
