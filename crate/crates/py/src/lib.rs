//! Python bindings: configuration, the hazard world, training, and the
//! evaluation reports of a trained checkpoint.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pixel_barrier::barrier::{barrier_loss as core_barrier_loss, AuditReport, BarrierConfig};
use pixel_barrier::checkpoint::Checkpoint;
use pixel_barrier::config::TrainConfig;
use pixel_barrier::env::{EnvState, HazardWorld, Observation};
use pixel_barrier::evaluate::{barrier_audit, heldout_mix, heldout_seeds, run_agent, safety_accuracy, stats_of};
use pixel_barrier::metrics::{self, EpisodeStats};
use pixel_barrier::policy::{discounted_target, ActMode};
use pixel_barrier::trainer::{self, Agent};
use pixel_barrier::{Tensor, Var};

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pixels(o: &Observation) -> Vec<f64> {
    o.values().collect()
}

/// Flat `key = value` training configuration.
#[pyclass(name = "Config", unsendable)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses config text; an empty string gives the defaults.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: TrainConfig::parse(text).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: TrainConfig::from_file(&path).map_err(py_err)? })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Value of `key` as written in the config text.
    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('='))
            .find(|(k, _)| k.trim() == key)
            .map(|(_, v)| v.trim().to_string())
            .ok_or_else(|| py_err(format!("unknown key {key:?}")))
    }

    /// A copy with one key replaced, validated like a config file.
    fn with_value(&self, key: &str, value: &str) -> PyResult<Self> {
        self.get(key)?;
        let text: String = self
            .inner
            .to_text()
            .lines()
            .map(|l| match l.split_once('=') {
                Some((k, _)) if k.trim() == key => format!("{key} = {value}\n"),
                _ => format!("{l}\n"),
            })
            .collect();
        PyConfig::new(&text)
    }

    fn __repr__(&self) -> String {
        format!("Config(epochs={}, seed={}, output_dir={:?})", self.inner.epochs, self.inner.seed, self.inner.output_dir)
    }
}

/// The hazard world with one running episode.
#[pyclass(name = "HazardWorld", unsendable)]
struct PyHazardWorld {
    env: HazardWorld,
    state: Option<EnvState>,
}

#[pymethods]
impl PyHazardWorld {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        Ok(PyHazardWorld { env: HazardWorld::new(cfg.world()).map_err(py_err)?, state: None })
    }

    /// `(channels, height, width)` of every observation.
    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.env.config().image_shape();
        (c, h, w)
    }

    /// Starts an episode and returns the first observation as flat
    /// channel-major pixel values in `[0, 1]`.
    fn reset(&mut self, seed: u64) -> PyResult<Vec<f64>> {
        let (state, obs) = self.env.reset(seed).map_err(py_err)?;
        self.state = Some(state);
        Ok(pixels(&obs))
    }

    /// Applies one action; returns `(observation, reward, kappa, done)`.
    fn step(&mut self, action: (f64, f64)) -> PyResult<(Vec<f64>, f64, u8, bool)> {
        let state = self.state.as_mut().ok_or_else(|| py_err("call reset before step"))?;
        let out = self.env.step(state, [action.0, action.1]);
        Ok((pixels(&out.observation), out.reward, out.kappa, out.done))
    }

    #[getter]
    fn agent_position(&self) -> Option<(f64, f64)> {
        self.state.as_ref().map(|s| (s.agent_pos[0], s.agent_pos[1]))
    }
}

/// A training run that advances one epoch at a time.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    inner: trainer::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(PyTrainer { inner: trainer::Trainer::new(config.inner.clone()).map_err(py_err)? })
    }

    /// Restores a trainer from a checkpoint directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::read(&dir).map_err(py_err)?;
        Ok(PyTrainer { inner: trainer::Trainer::from_checkpoint(&ck, None).map_err(py_err)? })
    }

    /// Runs one epoch and returns its log record.
    fn run_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let (r, _) = self.inner.run_epoch().map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("epoch", r.epoch)?;
        d.set_item("env_steps", r.env_steps)?;
        d.set_item("reward_return", r.reward_return)?;
        d.set_item("cost_return", r.cost_return)?;
        d.set_item("cost_regret_running", r.cost_regret_running)?;
        d.set_item("L_m", r.l_m)?;
        d.set_item("L_b1", r.l_b1)?;
        d.set_item("L_b2", r.l_b2)?;
        d.set_item("L_b3", r.l_b3)?;
        d.set_item("L_p", r.l_p)?;
        d.set_item("critic_loss", r.critic_loss)?;
        Ok(d)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().and_then(|ck| ck.write(&dir)).map_err(py_err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn env_steps(&self) -> u64 {
        self.inner.env_steps
    }

    #[getter]
    fn cumulative_cost(&self) -> u64 {
        self.inner.cumulative_cost
    }
}

/// A trained agent loaded from a checkpoint directory.
#[pyclass(name = "Agent", unsendable)]
struct PyAgent {
    cfg: TrainConfig,
    agent: Agent,
    env: HazardWorld,
}

fn audit_dict<'py>(py: Python<'py>, a: &AuditReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("safe_violation_fraction", a.safe_violation_fraction)?;
    d.set_item("decrease_violation_fraction", a.decrease_violation_fraction)?;
    d.set_item("unsafe_violation_fraction", a.unsafe_violation_fraction)?;
    d.set_item("safe_states", a.safe_states)?;
    d.set_item("pairs", a.pairs)?;
    d.set_item("unsafe_states", a.unsafe_states)?;
    Ok(d)
}

#[pymethods]
impl PyAgent {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (cfg, agent, _) = trainer::load_agent(&dir).map_err(py_err)?;
        let env = HazardWorld::new(cfg.world()).map_err(py_err)?;
        Ok(PyAgent { cfg, agent, env })
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.cfg.clone() }
    }

    /// Mean-action returns on held-out episodes.
    #[pyo3(signature = (episodes = 20))]
    fn evaluate<'py>(&self, py: Python<'py>, episodes: usize) -> PyResult<Bound<'py, PyDict>> {
        let seeds = heldout_seeds(self.cfg.seed, episodes);
        let eps = run_agent(&self.agent, &self.cfg, &self.env, &seeds, ActMode::Mean, 0.0).map_err(py_err)?;
        let stats: Vec<_> = eps.iter().map(stats_of).collect();
        let d = PyDict::new(py);
        d.set_item("episodes", episodes)?;
        d.set_item("reward_return", metrics::reward_return(&stats).map_err(py_err)?)?;
        d.set_item("cost_return", metrics::cost_return(&stats).map_err(py_err)?)?;
        Ok(d)
    }

    /// Barrier conditions along imagined rollouts from held-out episodes.
    #[pyo3(signature = (episodes = 10))]
    fn audit_barrier<'py>(&self, py: Python<'py>, episodes: usize) -> PyResult<Bound<'py, PyDict>> {
        let eps = heldout_mix(&self.agent, &self.cfg, &self.env, episodes).map_err(py_err)?;
        audit_dict(py, &barrier_audit(&self.agent, &self.cfg, &eps).map_err(py_err)?)
    }

    /// Accuracy of the safety head against the true detector on held-out episodes.
    #[pyo3(signature = (episodes = 10))]
    fn safety_accuracy<'py>(&self, py: Python<'py>, episodes: usize) -> PyResult<Bound<'py, PyDict>> {
        let eps = heldout_mix(&self.agent, &self.cfg, &self.env, episodes).map_err(py_err)?;
        let r = safety_accuracy(&self.agent, &eps).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("accuracy", r.accuracy)?;
        d.set_item("unsafe_recall", r.unsafe_recall)?;
        d.set_item("safe_specificity", r.safe_specificity)?;
        d.set_item("states", r.states)?;
        d.set_item("unsafe_states", r.unsafe_states)?;
        Ok(d)
    }
}

/// Trains from a config file, optionally resuming, and returns the final counters.
#[pyfunction]
#[pyo3(signature = (config_path, resume = None))]
fn train<'py>(py: Python<'py>, config_path: PathBuf, resume: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = TrainConfig::from_file(&config_path).map_err(py_err)?;
    let t = trainer::train(cfg, resume.as_deref()).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("epochs", t.epoch)?;
    d.set_item("env_steps", t.env_steps)?;
    d.set_item("cumulative_cost", t.cumulative_cost)?;
    Ok(d)
}

/// `[safe, decrease, unsafe]` hinge terms for `values[t][i]` with labels
/// `unsafe_[t][i]`.
#[pyfunction]
#[pyo3(signature = (values, unsafe_, eta = 0.01, lam = 0.1))]
fn barrier_loss(values: Vec<Vec<f64>>, unsafe_: Vec<Vec<bool>>, eta: f64, lam: f64) -> PyResult<[f64; 3]> {
    let cfg = BarrierConfig { eta, lambda: lam, ..BarrierConfig::default() };
    cfg.validate().map_err(py_err)?;
    let vars: Vec<Var> = values.into_iter().map(|v| Var::constant(Tensor::vector(v))).collect();
    Ok(core_barrier_loss(&vars, &unsafe_, &cfg).map_err(py_err)?.terms())
}

/// Discounted reward sum plus the discounted terminal value, per trajectory.
/// `rewards[t][i]` is step `t` of trajectory `i`.
#[pyfunction]
fn mc_value_target(rewards: Vec<Vec<f64>>, terminal: Vec<f64>, gamma: f64) -> PyResult<Vec<f64>> {
    if rewards.iter().any(|r| r.len() != terminal.len()) {
        return Err(py_err("every reward step needs one entry per trajectory"));
    }
    Ok(discounted_target(&rewards, &terminal, gamma))
}

/// Mean violations per episode, from `(total_cost, length)` pairs.
#[pyfunction]
fn cost_return(episodes: Vec<(u64, u64)>) -> PyResult<f64> {
    let stats = episodes.into_iter().map(|(c, n)| EpisodeStats::new(0.0, c, n)).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
    metrics::cost_return(&stats).map_err(py_err)
}

/// Violations per environment step.
#[pyfunction]
fn cost_regret(cumulative_cost: u64, total_env_steps: u64) -> PyResult<f64> {
    metrics::cost_regret(cumulative_cost, total_env_steps).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "pixel_barrier")]
fn python_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyHazardWorld>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyAgent>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(barrier_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mc_value_target, m)?)?;
    m.add_function(wrap_pyfunction!(cost_return, m)?)?;
    m.add_function(wrap_pyfunction!(cost_regret, m)?)?;
    Ok(())
}
