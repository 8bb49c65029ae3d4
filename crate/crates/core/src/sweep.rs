//! Random search under hyperband early stopping, plus correlation reports.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::augment::{derive_seed, Rng};
use crate::data::{self, DatasetSplit, NormStats};
use crate::error::{Error, Result};
use crate::losses::Reduction;
use crate::trainer::{RunLog, Session, TrainConfig};

const STREAM_SAMPLE: u64 = 11;
const STREAM_TRIAL: u64 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Text(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Number(v) if v.fract() == 0.0 && v.abs() < 1e15 => write!(f, "{}", *v as i64),
            Self::Number(v) => write!(f, "{v}"),
            Self::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamSpec {
    Continuous { scale: Scale, lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Categorical { values: Vec<ParamValue> },
}

impl ParamSpec {
    fn validate(&self) -> Result<()> {
        match self {
            Self::Continuous { scale, lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Config(format!("lo ({lo}) must be below hi ({hi})")));
                }
                if *scale == Scale::Log && *lo <= 0.0 {
                    return Err(Error::Config(format!("log scale needs lo > 0, got {lo}")));
                }
            }
            Self::Integer { lo, hi } => {
                if lo >= hi {
                    return Err(Error::Config(format!("lo ({lo}) must be below hi ({hi})")));
                }
            }
            Self::Categorical { values } => {
                if values.is_empty() {
                    return Err(Error::Config("values must not be empty".into()));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> ParamValue {
        match self {
            Self::Continuous {
                scale: Scale::Linear,
                lo,
                hi,
            } => ParamValue::Number(lo + rng.uniform() * (hi - lo)),
            Self::Continuous {
                scale: Scale::Log,
                lo,
                hi,
            } => {
                let (a, b) = (lo.ln(), hi.ln());
                ParamValue::Number((a + rng.uniform() * (b - a)).exp())
            }
            Self::Integer { lo, hi } => ParamValue::Number(rng.range_inclusive(*lo, *hi) as f64),
            Self::Categorical { values } => values[rng.below(values.len())].clone(),
        }
    }
}

/// Training parameters a sweep may vary.
pub const SWEEPABLE: [&str; 9] = [
    "lr",
    "batch_size",
    "mixup_alpha",
    "momentum",
    "weight_decay",
    "eta_min",
    "flip_prob",
    "crop_pad",
    "loss_reduction",
];

/// Named parameter specs, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub params: Vec<(String, ParamSpec)>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let num = |v: &[f64]| v.iter().map(|&x| ParamValue::Number(x)).collect();
        Self {
            params: vec![
                (
                    "lr".into(),
                    ParamSpec::Continuous {
                        scale: Scale::Log,
                        lo: 1e-3,
                        hi: 1e-1,
                    },
                ),
                (
                    "batch_size".into(),
                    ParamSpec::Categorical {
                        values: num(&[32.0, 64.0, 128.0, 256.0]),
                    },
                ),
                (
                    "mixup_alpha".into(),
                    ParamSpec::Continuous {
                        scale: Scale::Linear,
                        lo: 0.1,
                        hi: 1.0,
                    },
                ),
                (
                    "momentum".into(),
                    ParamSpec::Continuous {
                        scale: Scale::Linear,
                        lo: 0.5,
                        hi: 0.99,
                    },
                ),
                (
                    "weight_decay".into(),
                    ParamSpec::Continuous {
                        scale: Scale::Log,
                        lo: 1e-5,
                        hi: 1e-3,
                    },
                ),
            ],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, spec) in &self.params {
            if !SWEEPABLE.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "params.{name}: not a sweepable parameter (one of {})",
                    SWEEPABLE.join(", ")
                )));
            }
            spec.validate()
                .map_err(|e| Error::Config(format!("params.{name}: {}", strip(e))))?;
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n.as_str()).collect()
    }

    fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

pub type Assignment = Vec<(String, ParamValue)>;

/// One independent draw for every parameter, in declaration order.
pub fn sample_config(space: &SearchSpace, rng: &mut Rng) -> Assignment {
    space
        .params
        .iter()
        .map(|(name, spec)| (name.clone(), spec.sample(rng)))
        .collect()
}

/// `base` with the sampled values written into it.
pub fn apply_assignment(base: &TrainConfig, values: &Assignment) -> Result<TrainConfig> {
    let mut c = base.clone();
    for (name, value) in values {
        let bad = || Error::Config(format!("params.{name}: unsuitable value {value}"));
        let number = || match value {
            ParamValue::Number(v) => Ok(*v),
            ParamValue::Text(_) => Err(bad()),
        };
        let count = || {
            let v = number()?;
            if v.fract() == 0.0 && v >= 0.0 {
                Ok(v as usize)
            } else {
                Err(bad())
            }
        };
        match name.as_str() {
            "lr" => c.lr = number()?,
            "batch_size" => c.batch_size = count()?,
            "mixup_alpha" => c.mixup.alpha = number()?,
            "momentum" => c.momentum = number()?,
            "weight_decay" => c.weight_decay = number()?,
            "eta_min" => c.eta_min = number()?,
            "flip_prob" => c.flip_prob = number()?,
            "crop_pad" => c.crop_pad = count()?,
            "loss_reduction" => {
                c.loss_reduction = match value {
                    ParamValue::Text(s) => s.parse::<Reduction>().map_err(|_| bad())?,
                    ParamValue::Number(_) => return Err(bad()),
                }
            }
            other => return Err(Error::Config(format!("params.{other}: not a sweepable parameter"))),
        }
    }
    Ok(c)
}

/// Everything a sweep needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    /// Largest number of epochs granted to one configuration.
    pub max_resource: usize,
    pub eta: usize,
    pub seed: u64,
    /// Training samples held out to score trials.
    pub validation_size: usize,
    /// Score trials on the test split instead of a held-out slice.
    pub sweep_on_test: bool,
    pub space: SearchSpace,
    pub base: TrainConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            max_resource: 9,
            eta: 3,
            seed: 0,
            validation_size: 5000,
            sweep_on_test: false,
            space: SearchSpace::default(),
            base: TrainConfig::default(),
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_resource == 0 {
            return Err(Error::Config("R: must be at least 1".into()));
        }
        if self.eta < 2 {
            return Err(Error::Config("eta: must be at least 2".into()));
        }
        self.space.validate()?;
        self.base
            .validate()
            .map_err(|e| Error::Config(format!("base: {}", strip(e))))
    }

    /// Parses the TOML form:
    ///
    /// ```toml
    /// R = 9
    /// eta = 3
    /// seed = 0
    /// [base]          # any training option
    /// epochs = 9
    /// [params.lr]
    /// type = "continuous"
    /// scale = "log"
    /// lo = 0.001
    /// hi = 0.1
    /// ```
    ///
    /// Error messages start with the offending key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("sweep spec: {}", e.message())))?;
        let mut spec = SweepSpec {
            space: SearchSpace { params: Vec::new() },
            ..SweepSpec::default()
        };
        let uint = |key: &str, v: &toml::Value| -> Result<u64> {
            v.as_integer()
                .filter(|&i| i >= 0)
                .map(|i| i as u64)
                .ok_or_else(|| Error::Config(format!("{key}: expected a nonnegative integer")))
        };
        for (key, value) in &table {
            match key.as_str() {
                "R" | "max_resource" => spec.max_resource = uint(key, value)? as usize,
                "eta" => spec.eta = uint(key, value)? as usize,
                "seed" => spec.seed = uint(key, value)?,
                "validation_size" => spec.validation_size = uint(key, value)? as usize,
                "sweep_on_test" => {
                    spec.sweep_on_test = value
                        .as_bool()
                        .ok_or_else(|| Error::Config(format!("{key}: expected true or false")))?
                }
                "base" => {
                    spec.base = value
                        .clone()
                        .try_into()
                        .map_err(|e: toml::de::Error| Error::Config(format!("base: {}", e.message())))?
                }
                "params" => {
                    let params = value
                        .as_table()
                        .ok_or_else(|| Error::Config("params: expected a table".into()))?;
                    for (name, p) in params {
                        let parsed = parse_param(name, p)?;
                        spec.space.params.push((name.clone(), parsed));
                    }
                }
                other => return Err(Error::Config(format!("{other}: unknown key"))),
            }
        }
        if spec.space.params.is_empty() {
            return Err(Error::Config("params: at least one parameter is required".into()));
        }
        spec.validate()?;
        Ok(spec)
    }

    /// The inverse of [`SweepSpec::from_toml`].
    pub fn to_toml(&self) -> Result<String> {
        use toml::Value;
        let ser = |e: toml::ser::Error| Error::Serialization(e.to_string());
        let mut t = toml::Table::new();
        t.insert("R".into(), Value::Integer(self.max_resource as i64));
        t.insert("eta".into(), Value::Integer(self.eta as i64));
        t.insert("seed".into(), Value::Integer(self.seed as i64));
        t.insert("validation_size".into(), Value::Integer(self.validation_size as i64));
        t.insert("sweep_on_test".into(), Value::Boolean(self.sweep_on_test));
        t.insert("base".into(), Value::try_from(&self.base).map_err(ser)?);
        let mut params = toml::Table::new();
        for (name, spec) in &self.space.params {
            let mut p = toml::Table::new();
            match spec {
                ParamSpec::Continuous { scale, lo, hi } => {
                    p.insert("type".into(), Value::String("continuous".into()));
                    let scale = if *scale == Scale::Log { "log" } else { "linear" };
                    p.insert("scale".into(), Value::String(scale.into()));
                    p.insert("lo".into(), Value::Float(*lo));
                    p.insert("hi".into(), Value::Float(*hi));
                }
                ParamSpec::Integer { lo, hi } => {
                    p.insert("type".into(), Value::String("integer".into()));
                    p.insert("lo".into(), Value::Integer(*lo));
                    p.insert("hi".into(), Value::Integer(*hi));
                }
                ParamSpec::Categorical { values } => {
                    p.insert("type".into(), Value::String("categorical".into()));
                    let v = values
                        .iter()
                        .map(|v| match v {
                            ParamValue::Number(x) if x.fract() == 0.0 => Value::Integer(*x as i64),
                            ParamValue::Number(x) => Value::Float(*x),
                            ParamValue::Text(s) => Value::String(s.clone()),
                        })
                        .collect();
                    p.insert("values".into(), Value::Array(v));
                }
            }
            params.insert(name.clone(), Value::Table(p));
        }
        t.insert("params".into(), Value::Table(params));
        toml::to_string(&t).map_err(ser)
    }
}

fn parse_param(name: &str, value: &toml::Value) -> Result<ParamSpec> {
    let path = format!("params.{name}");
    let t = value
        .as_table()
        .ok_or_else(|| Error::Config(format!("{path}: expected a table")))?;
    let get = |k: &str| t.get(k).ok_or_else(|| Error::Config(format!("{path}.{k}: missing")));
    let float = |k: &str| -> Result<f64> {
        let v = get(k)?;
        v.as_float()
            .or_else(|| v.as_integer().map(|i| i as f64))
            .ok_or_else(|| Error::Config(format!("{path}.{k}: expected a number")))
    };
    let int = |k: &str| -> Result<i64> {
        get(k)?
            .as_integer()
            .ok_or_else(|| Error::Config(format!("{path}.{k}: expected an integer")))
    };
    let kind = get("type")?
        .as_str()
        .ok_or_else(|| Error::Config(format!("{path}.type: expected a string")))?;
    let allowed: &[&str] = match kind {
        "continuous" => &["type", "scale", "lo", "hi"],
        "integer" => &["type", "lo", "hi"],
        "categorical" => &["type", "values"],
        other => {
            return Err(Error::Config(format!(
                "{path}.type: unknown type {other:?} (continuous, integer or categorical)"
            )))
        }
    };
    if let Some(k) = t.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::Config(format!("{path}.{k}: unknown key")));
    }
    let spec = match kind {
        "continuous" => {
            let scale = match t.get("scale").map(|v| v.as_str()) {
                None | Some(Some("linear")) => Scale::Linear,
                Some(Some("log")) => Scale::Log,
                _ => return Err(Error::Config(format!("{path}.scale: expected \"log\" or \"linear\""))),
            };
            ParamSpec::Continuous {
                scale,
                lo: float("lo")?,
                hi: float("hi")?,
            }
        }
        "integer" => ParamSpec::Integer {
            lo: int("lo")?,
            hi: int("hi")?,
        },
        _ => {
            let values = get("values")?
                .as_array()
                .ok_or_else(|| Error::Config(format!("{path}.values: expected an array")))?
                .iter()
                .map(|v| match v {
                    toml::Value::Integer(i) => Ok(ParamValue::Number(*i as f64)),
                    toml::Value::Float(f) => Ok(ParamValue::Number(*f)),
                    toml::Value::String(s) => Ok(ParamValue::Text(s.clone())),
                    _ => Err(Error::Config(format!("{path}.values: numbers or strings only"))),
                })
                .collect::<Result<Vec<_>>>()?;
            ParamSpec::Categorical { values }
        }
    };
    spec.validate()
        .map_err(|e| Error::Config(format!("{path}: {}", strip(e))))?;
    Ok(spec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    pub n_configs: usize,
    pub resource: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub s: usize,
    pub rungs: Vec<Rung>,
}

fn ipow(base: usize, exp: usize) -> usize {
    (0..exp).fold(1, |acc, _| acc * base)
}

/// Largest `s` with `eta^s <= r`.
pub fn s_max(r: usize, eta: usize) -> usize {
    let mut s = 0;
    while ipow(eta, s + 1) <= r {
        s += 1;
    }
    s
}

/// Successive-halving schedule of every bracket, most exploratory first.
///
/// Bracket `s` starts `ceil((s_max + 1) eta^s / (s + 1))` configurations at
/// `R / eta^s` epochs; each rung keeps `floor(n / eta)` of them and grants
/// `eta` times the epochs.
pub fn hyperband_brackets(r: usize, eta: usize) -> Result<Vec<Bracket>> {
    if r == 0 || eta < 2 {
        return Err(Error::Config(format!(
            "hyperband needs R >= 1 and eta >= 2, got R={r}, eta={eta}"
        )));
    }
    let top = s_max(r, eta);
    Ok((0..=top)
        .rev()
        .map(|s| {
            let n = ((top + 1) * ipow(eta, s)).div_ceil(s + 1);
            let rungs = (0..=s)
                .map(|i| Rung {
                    n_configs: n / ipow(eta, i),
                    resource: (r * ipow(eta, i) / ipow(eta, s)).max(1),
                })
                .collect();
            Bracket { s, rungs }
        })
        .collect())
}

/// Epochs the schedule grants in total, counting every rung from scratch.
pub fn bracket_budget(brackets: &[Bracket]) -> usize {
    brackets
        .iter()
        .flat_map(|b| &b.rungs)
        .map(|r| r.n_configs * r.resource)
        .sum()
}

/// Something that trains a configuration for a growing number of epochs.
pub trait Objective: Sync {
    type State: Send;

    fn init(&self, trial_id: usize, config: &TrainConfig) -> Result<Self::State>;

    /// Continues training up to `epochs` in total and returns the metric
    /// after each newly completed epoch (higher is better, in [0, 1]).
    fn advance(&self, state: &mut Self::State, epochs: usize) -> Result<Vec<f64>>;

    fn run_log(&self, _state: &Self::State) -> Option<RunLog> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Running,
    Stopped,
    Complete,
    Failed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub trial_id: usize,
    pub bracket: usize,
    pub values: Assignment,
    pub config: TrainConfig,
    /// Epochs granted so far.
    pub resource: usize,
    /// Best metric seen so far; `None` until an epoch completes or on failure.
    pub metric: Option<f64>,
    pub status: TrialStatus,
    /// Metric after every epoch.
    pub curve: Vec<f64>,
    pub error: Option<String>,
    pub run_log: Option<RunLog>,
}

impl Trial {
    /// Ranking key; failed trials rank below everything.
    pub fn score(&self) -> f64 {
        match (self.status, self.metric) {
            (TrialStatus::Failed, _) | (_, None) => f64::NEG_INFINITY,
            (_, Some(m)) => m,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HyperbandResult {
    pub brackets: Vec<Bracket>,
    pub trials: Vec<Trial>,
    pub best: Option<usize>,
}

impl HyperbandResult {
    pub fn best_trial(&self) -> Option<&Trial> {
        self.best.map(|i| &self.trials[i])
    }
}

/// Promotion order within a rung: metric descending, then trial id.
fn rank(trials: &[Trial], alive: &mut [usize]) {
    alive.sort_by(|&a, &b| {
        trials[b]
            .score()
            .total_cmp(&trials[a].score())
            .then(trials[a].trial_id.cmp(&trials[b].trial_id))
    });
}

/// Runs every bracket; `jobs` trials of a rung train concurrently.
pub fn hyperband<O: Objective>(
    space: &SearchSpace,
    base: &TrainConfig,
    max_resource: usize,
    eta: usize,
    seed: u64,
    objective: &O,
    jobs: usize,
    mut on_rung: impl FnMut(&Bracket, usize, &[Trial]),
) -> Result<HyperbandResult> {
    space.validate()?;
    let brackets = hyperband_brackets(max_resource, eta)?;
    let mut rng = Rng::derive(seed, &[STREAM_SAMPLE]);
    let mut trials: Vec<Trial> = Vec::new();

    for bracket in &brackets {
        let first = trials.len();
        let n = bracket.rungs[0].n_configs;
        let mut states: Vec<Option<O::State>> = Vec::with_capacity(n);
        for i in 0..n {
            let trial_id = first + i;
            let values = sample_config(space, &mut rng);
            let mut config = apply_assignment(base, &values)?;
            config.seed = derive_seed(seed, &[STREAM_TRIAL, trial_id as u64]);
            let (state, status, error) = match config.validate().and_then(|_| objective.init(trial_id, &config)) {
                Ok(s) => (Some(s), TrialStatus::Running, None),
                Err(e) => (None, TrialStatus::Failed, Some(e.to_string())),
            };
            states.push(state);
            trials.push(Trial {
                trial_id,
                bracket: bracket.s,
                values,
                config,
                resource: 0,
                metric: None,
                status,
                curve: Vec::new(),
                error,
                run_log: None,
            });
        }
        let mut alive: Vec<usize> = (0..n)
            .filter(|&i| trials[first + i].status != TrialStatus::Failed)
            .collect();

        for (k, rung) in bracket.rungs.iter().enumerate() {
            let work: Vec<(usize, O::State)> = alive
                .iter()
                .map(|&i| (i, states[i].take().expect("alive trials have state")))
                .collect();
            let results = run_parallel(objective, work, rung.resource, jobs);
            for (i, state, outcome) in results {
                let t = &mut trials[first + i];
                t.resource = rung.resource;
                match outcome {
                    Ok(curve) => {
                        t.curve.extend(curve);
                        t.metric = t.curve.iter().copied().reduce(f64::max);
                        t.run_log = objective.run_log(&state);
                        states[i] = Some(state);
                    }
                    Err(e) => {
                        t.status = TrialStatus::Failed;
                        t.metric = None;
                        t.error = Some(e.to_string());
                    }
                }
            }
            alive.retain(|&i| trials[first + i].status != TrialStatus::Failed);
            let last = k + 1 == bracket.rungs.len();
            if last {
                for &i in &alive {
                    trials[first + i].status = TrialStatus::Complete;
                }
            } else {
                let mut ranked: Vec<usize> = alive.iter().map(|&i| first + i).collect();
                rank(&trials, &mut ranked);
                let keep = bracket.rungs[k + 1].n_configs.min(ranked.len());
                for &t in &ranked[keep..] {
                    trials[t].status = TrialStatus::Stopped;
                    states[t - first] = None;
                }
                alive = ranked[..keep].iter().map(|&t| t - first).collect();
            }
            on_rung(bracket, k, &trials[first..]);
        }
    }

    let mut candidates: Vec<usize> = (0..trials.len())
        .filter(|&i| trials[i].status != TrialStatus::Failed && trials[i].metric.is_some())
        .collect();
    rank(&trials, &mut candidates);
    Ok(HyperbandResult {
        brackets,
        best: candidates.first().copied(),
        trials,
    })
}

type Outcome<S> = (usize, S, Result<Vec<f64>>);

fn run_parallel<O: Objective>(
    objective: &O,
    work: Vec<(usize, O::State)>,
    epochs: usize,
    jobs: usize,
) -> Vec<Outcome<O::State>> {
    let run = |(i, mut state): (usize, O::State)| {
        let r = objective.advance(&mut state, epochs);
        (i, state, r)
    };
    if jobs <= 1 || work.len() <= 1 {
        return work.into_iter().map(run).collect();
    }
    let queue = Mutex::new(work.into_iter());
    let done = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some(item) = next else { break };
                let out = run(item);
                done.lock().expect("results lock").push(out);
            });
        }
    });
    let mut out = done.into_inner().expect("results lock");
    out.sort_by_key(|(i, _, _)| *i);
    out
}

/// Trains real models; the metric is accuracy on the scoring split.
pub struct TrainObjective {
    norm: NormStats,
    train: Arc<DatasetSplit>,
    score: Arc<DatasetSplit>,
    /// Schedule length shared by every trial, so granting more epochs later
    /// continues the same run.
    pub t_max: usize,
}

impl TrainObjective {
    /// Holds out `validation_size` training samples for scoring unless
    /// `on_test` is set, in which case trials are scored on `test`.
    pub fn new(
        train: &DatasetSplit,
        test: &DatasetSplit,
        validation_size: usize,
        on_test: bool,
        t_max: usize,
    ) -> Result<Self> {
        let (train, score) = if on_test {
            (train.clone(), test.clone())
        } else {
            train.split_tail(validation_size)?
        };
        let norm = data::compute_norm_stats(&train)?;
        Ok(Self {
            train: Arc::new(data::normalize(&train, &norm)?),
            score: Arc::new(data::normalize(&score, &norm)?),
            norm,
            t_max,
        })
    }
}

impl Objective for TrainObjective {
    type State = Session;

    fn init(&self, _trial_id: usize, config: &TrainConfig) -> Result<Session> {
        let mut config = config.clone();
        config.epochs = self.t_max;
        config.t_max = self.t_max;
        config.eval_every = 1;
        Session::with_normalized(&config, self.norm, self.train.clone(), self.score.clone())
    }

    fn advance(&self, session: &mut Session, epochs: usize) -> Result<Vec<f64>> {
        let mut curve = Vec::new();
        while session.epochs_done() < epochs {
            let (m, _) = session.run_epoch()?;
            let err = m.test_error_pct.expect("every epoch is evaluated");
            curve.push(1.0 - err / 100.0);
        }
        Ok(curve)
    }

    fn run_log(&self, session: &Session) -> Option<RunLog> {
        let mut log = session.log.clone();
        log.summary = session.summary();
        Some(log)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// Parameter name, or `name=value` for one category.
    pub param: String,
    pub pearson_r: f64,
    /// The parameter or the metric did not vary.
    pub degenerate: bool,
    /// 1 for the strongest |r|.
    pub rank: usize,
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    let scale = sxx.sqrt() * syy.sqrt();
    if sxx <= 1e-300 || syy <= 1e-300 || scale == 0.0 {
        return None;
    }
    Some((sxy / scale).clamp(-1.0, 1.0))
}

/// Correlation of every parameter with the final metric of completed trials.
pub fn correlation_report(space: &SearchSpace, trials: &[Trial]) -> Result<Vec<Correlation>> {
    let done: Vec<&Trial> = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Complete && t.metric.is_some())
        .collect();
    if done.len() < 3 {
        return Err(Error::Validation(format!(
            "correlation needs at least 3 completed trials, have {}",
            done.len()
        )));
    }
    let metric: Vec<f64> = done.iter().map(|t| t.metric.unwrap()).collect();
    let value_of = |t: &Trial, name: &str| t.values.iter().find(|(n, _)| n == name).map(|(_, v)| v.clone());
    let mut out = Vec::new();
    for (name, spec) in &space.params {
        let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
        match spec {
            ParamSpec::Categorical { values } => {
                for v in values {
                    let col = done
                        .iter()
                        .map(|t| {
                            if value_of(t, name).as_ref() == Some(v) {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    columns.push((format!("{name}={v}"), col));
                }
            }
            _ => {
                let log = matches!(spec, ParamSpec::Continuous { scale: Scale::Log, .. });
                let col = done
                    .iter()
                    .map(|t| match value_of(t, name) {
                        Some(ParamValue::Number(v)) if log => v.ln(),
                        Some(ParamValue::Number(v)) => v,
                        _ => f64::NAN,
                    })
                    .collect();
                columns.push((name.clone(), col));
            }
        }
        for (param, col) in columns {
            let r = pearson(&col, &metric).filter(|r| r.is_finite());
            out.push(Correlation {
                param,
                pearson_r: r.unwrap_or(0.0),
                degenerate: r.is_none(),
                rank: 0,
            });
        }
    }
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| {
        out[a]
            .degenerate
            .cmp(&out[b].degenerate)
            .then(out[b].pearson_r.abs().total_cmp(&out[a].pearson_r.abs()))
            .then(a.cmp(&b))
    });
    for (rank, &i) in order.iter().enumerate() {
        out[i].rank = rank + 1;
    }
    Ok(out)
}

/// `trial, <params...>, resource, metric`, one row per trial.
pub fn trials_csv(space: &SearchSpace, trials: &[Trial]) -> String {
    let mut out = String::from("trial");
    for name in space.names() {
        out.push(',');
        out.push_str(name);
    }
    out.push_str(",resource,metric\n");
    for t in trials {
        out.push_str(&t.trial_id.to_string());
        for name in space.names() {
            out.push(',');
            if let Some((_, v)) = t.values.iter().find(|(n, _)| n == name) {
                out.push_str(&v.to_string());
            }
        }
        let metric = t.metric.filter(|_| t.status != TrialStatus::Failed);
        out.push_str(&format!(
            ",{},{}\n",
            t.resource,
            metric.map(|m| m.to_string()).unwrap_or_default()
        ));
    }
    out
}

pub fn curve_csv(trial: &Trial) -> String {
    let mut out = String::from("epoch,metric\n");
    for (i, m) in trial.curve.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, m));
    }
    out
}

pub fn correlation_csv(rows: &[Correlation]) -> String {
    let mut out = String::from("param,pearson_r,degenerate,rank\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.param, r.pearson_r, r.degenerate, r.rank));
    }
    out
}

pub fn rung_table(brackets: &[Bracket]) -> String {
    let mut out = String::from("bracket,rung,n_configs,resource\n");
    for b in brackets {
        for (i, r) in b.rungs.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", b.s, i, r.n_configs, r.resource));
        }
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `trials.csv`, `correlation.csv`, `rungs.csv`, one curve file per
/// trial under `curves/` and run logs under `runs/`.
pub fn sweep_report(dir: &Path, space: &SearchSpace, result: &HyperbandResult) -> Result<Option<Vec<Correlation>>> {
    for sub in ["curves", "runs"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write(&dir.join("trials.csv"), &trials_csv(space, &result.trials))?;
    write(&dir.join("rungs.csv"), &rung_table(&result.brackets))?;
    for t in &result.trials {
        write(
            &dir.join("curves").join(format!("trial_{}.csv", t.trial_id)),
            &curve_csv(t),
        )?;
        if let Some(log) = &t.run_log {
            write(
                &dir.join("runs").join(format!("trial_{}.jsonl", t.trial_id)),
                &log.to_jsonl()?,
            )?;
        }
    }
    let correlations = correlation_report(space, &result.trials).ok();
    if let Some(rows) = &correlations {
        write(&dir.join("correlation.csv"), &correlation_csv(rows))?;
    }
    Ok(correlations)
}

/// The numeric range a spec covers, for reports.
pub fn describe(space: &SearchSpace, name: &str) -> Option<String> {
    Some(match space.spec(name)? {
        ParamSpec::Continuous { scale, lo, hi } => format!("{scale:?} [{lo}, {hi}]").to_lowercase(),
        ParamSpec::Integer { lo, hi } => format!("integer [{lo}, {hi}]"),
        ParamSpec::Categorical { values } => {
            let v: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            format!("{{{}}}", v.join(", "))
        }
    })
}
