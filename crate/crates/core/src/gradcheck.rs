//! Finite-difference checks of every differentiable op.

use std::fmt::Write as _;

use serde::Serialize;

use crate::augment::Rng;
use crate::error::{Error, Result};
use crate::losses::{mixup_loss, Reduction};
use crate::tensor::{finite_diff_grad, max_relative_error, BatchNormMode, RunningStats, Scalar, Tape, Tensor, Var};

/// Names accepted by [`GradcheckConfig::ops`].
pub const OPS: [&str; 13] = [
    "add",
    "mul",
    "scale",
    "sum_all",
    "gelu",
    "log_softmax_clamped",
    "linear",
    "global_avg_pool",
    "conv2d",
    "batch_norm2d",
    "mixup_loss",
    "mlp",
    "conv_block",
];

pub const F32_THRESHOLD: f64 = 1e-3;
pub const F64_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    /// Random shapes tried per op and precision.
    pub trials: usize,
    pub seed: u64,
    /// Restrict to these ops; empty means all.
    pub ops: Vec<String>,
    pub f32: bool,
    pub f64: bool,
    /// Test hook: perturbs the analytic gradient of this op by 5%.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            ops: Vec::new(),
            f32: true,
            f64: true,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub precision: &'static str,
    pub trials: usize,
    pub worst_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&OpReport> {
        self.ops.iter().filter(|r| !r.passed).collect()
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<22} {:<5} {:>6} {:>12} {:>10}  result\n",
            "op", "prec", "trials", "worst", "threshold"
        );
        for r in &self.ops {
            let _ = writeln!(
                out,
                "{:<22} {:<5} {:>6} {:>12.3e} {:>10.0e}  {}",
                r.op,
                r.precision,
                r.trials,
                r.worst_error,
                r.threshold,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

type Build<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

/// Inputs that are differentiated plus a graph over them.
struct Case<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    build: Build<T>,
}

fn random<T: Scalar>(shape: &[usize], scale: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of_f64(rng.normal() * scale))
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn make_case<T: Scalar>(op: &str, rng: &mut Rng, trial: usize) -> Result<Case<T>> {
    let case = match op {
        "add" | "mul" => {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
            let a = random(&shape, 1.0, rng);
            // every third trial broadcasts a scalar operand
            let b = if trial % 3 == 2 {
                random(&[1], 1.0, rng)
            } else {
                random(&shape, 1.0, rng)
            };
            let is_add = op == "add";
            Case {
                inputs: vec![a, b],
                build: Box::new(move |t, v| if is_add { t.add(v[0], v[1]) } else { t.mul(v[0], v[1]) }),
            }
        }
        "scale" => {
            let factor = T::of_f64(rng.normal() * 2.0);
            Case {
                inputs: vec![random(&[dim(rng, 1, 6), dim(rng, 1, 6)], 1.0, rng)],
                build: Box::new(move |t, v| Ok(t.scale(v[0], factor))),
            }
        }
        "sum_all" => Case {
            inputs: vec![random(&[dim(rng, 1, 5), dim(rng, 1, 7)], 1.0, rng)],
            build: Box::new(|t, v| Ok(t.sum_all(v[0]))),
        },
        "gelu" => Case {
            inputs: vec![random(&[dim(rng, 1, 5), dim(rng, 1, 8)], 2.0, rng)],
            build: Box::new(|t, v| Ok(t.gelu(v[0]))),
        },
        "log_softmax_clamped" => Case {
            inputs: vec![random(&[dim(rng, 1, 4), dim(rng, 2, 8)], 1.5, rng)],
            build: Box::new(|t, v| t.log_softmax_clamped(v[0])),
        },
        "linear" => {
            let (n, f, k) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 5));
            Case {
                inputs: vec![
                    random(&[n, f], 1.0, rng),
                    random(&[k, f], 1.0, rng),
                    random(&[k], 1.0, rng),
                ],
                build: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
            }
        }
        "global_avg_pool" => Case {
            inputs: vec![random(
                &[dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)],
                1.0,
                rng,
            )],
            build: Box::new(|t, v| t.global_avg_pool(v[0])),
        },
        "conv2d" => {
            let k = [1, 3][rng.below(2)];
            let stride = dim(rng, 1, 2);
            let pad = rng.below(k / 2 + 1);
            let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let (h, w) = (dim(rng, k, 6), dim(rng, k, 6));
            let with_bias = trial.is_multiple_of(2);
            let mut inputs = vec![random(&[n, c, h, w], 1.0, rng), random(&[o, c, k, k], 0.5, rng)];
            if with_bias {
                inputs.push(random(&[o], 1.0, rng));
            }
            Case {
                inputs,
                build: Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
            }
        }
        "batch_norm2d" => {
            let (n, c) = (dim(rng, 2, 4), dim(rng, 1, 3));
            let (h, w) = (dim(rng, 2, 4), dim(rng, 2, 4));
            let eval = trial % 2 == 1;
            let running = RunningStats::<T> {
                mean: (0..c).map(|_| T::of_f64(rng.normal() * 0.5)).collect(),
                var: (0..c).map(|_| T::of_f64(0.5 + rng.uniform())).collect(),
            };
            Case {
                inputs: vec![
                    random(&[n, c, h, w], 1.0, rng),
                    Tensor::from_fn(&[c], |_| T::of_f64(0.5 + rng.uniform())),
                    random(&[c], 1.0, rng),
                ],
                build: Box::new(move |t, v| {
                    let mode = if eval {
                        BatchNormMode::Eval(&running)
                    } else {
                        BatchNormMode::Train
                    };
                    Ok(t.batch_norm2d(v[0], v[1], v[2], mode, 1e-5)?.0)
                }),
            }
        }
        "mixup_loss" => {
            let (n, k) = (dim(rng, 1, 5), dim(rng, 2, 6));
            let targets = mixed_targets::<T>(rng, n, k);
            let reduction = if trial.is_multiple_of(2) {
                Reduction::Mean
            } else {
                Reduction::Sum
            };
            Case {
                inputs: vec![random(&[n, k], 1.5, rng)],
                build: Box::new(move |t, v| Ok(mixup_loss(t, v[0], &targets, reduction)?.total)),
            }
        }
        "mlp" => {
            // linear -> gelu -> linear -> mixup loss
            let (n, f, hid, k) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 2, 6), dim(rng, 2, 5));
            let targets = mixed_targets::<T>(rng, n, k);
            Case {
                inputs: vec![
                    random(&[n, f], 1.0, rng),
                    random(&[hid, f], 0.7, rng),
                    random(&[hid], 0.5, rng),
                    random(&[k, hid], 0.5, rng),
                    random(&[k], 0.5, rng),
                ],
                build: Box::new(move |t, v| {
                    let x = t.linear(v[0], v[1], v[2])?;
                    let x = t.gelu(x);
                    let logits = t.linear(x, v[3], v[4])?;
                    Ok(mixup_loss(t, logits, &targets, Reduction::Sum)?.total)
                }),
            }
        }
        "conv_block" => {
            // conv -> batch norm -> gelu -> pool
            let (n, c, o) = (dim(rng, 2, 3), dim(rng, 1, 2), dim(rng, 1, 3));
            let side = dim(rng, 3, 4);
            Case {
                inputs: vec![
                    random(&[n, c, side, side], 1.0, rng),
                    random(&[o, c, 3, 3], 0.5, rng),
                    Tensor::from_fn(&[o], |_| T::of_f64(0.5 + rng.uniform())),
                    random(&[o], 0.5, rng),
                ],
                build: Box::new(move |t, v| {
                    let x = t.conv2d(v[0], v[1], None, 1, 1)?;
                    let (x, _) = t.batch_norm2d(x, v[2], v[3], BatchNormMode::Train, 1e-5)?;
                    let x = t.gelu(x);
                    t.global_avg_pool(x)
                }),
            }
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown op {other:?}; expected one of {}",
                OPS.join(", ")
            )))
        }
    };
    Ok(case)
}

fn mixed_targets<T: Scalar>(rng: &mut Rng, n: usize, k: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * k];
    for row in data.chunks_mut(k) {
        let lam = rng.uniform();
        row[rng.below(k)] += T::of_f64(lam);
        row[rng.below(k)] += T::of_f64(1.0 - lam);
    }
    Tensor::new(&[n, k], data).expect("shape matches")
}

/// `sum(out * weights)` in f64, from a forward pass on constants.
fn probe<T: Scalar>(case: &Case<T>, inputs: &[Tensor<T>], weights: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&mut tape, &vars).expect("case was built from valid shapes");
    tape.value(out)
        .data()
        .iter()
        .zip(weights)
        .map(|(o, w)| o.as_f64() * w)
        .sum()
}

/// Worst relative error over all inputs of one case.
/// With `richardson`, two central differences at `eps` and `eps / 2` are
/// combined to cancel the second-order error term, which lets low precision
/// use a step large enough to swamp rounding.
fn check_case<T: Scalar>(case: &Case<T>, rng: &mut Rng, eps: f64, richardson: bool, corrupt: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.input(t.clone(), true)).collect();
    let out = (case.build)(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let weights: Vec<f64> = (0..tape.value(out).numel()).map(|_| rng.normal()).collect();
    let w = tape.constant(Tensor::new(&shape, weights.iter().map(|&v| T::of_f64(v)).collect())?);
    let weighted = tape.mul(out, w)?;
    let loss = tape.sum_all(weighted);
    let grads = tape.backward(loss)?;

    // one normwise error over the gradient of every input together
    let mut all_analytic = Vec::new();
    let mut all_numeric = Vec::new();
    for (i, x) in case.inputs.iter().enumerate() {
        let mut analytic = grads.get_or_zeros(vars[i], x.numel());
        if corrupt {
            for g in &mut analytic {
                *g *= T::of_f64(1.05);
            }
        }
        let f = |probe_x: &Tensor<T>| {
            let mut inputs = case.inputs.clone();
            inputs[i] = probe_x.clone();
            probe(case, &inputs, &weights)
        };
        let numeric: Vec<T> = if richardson {
            let coarse = finite_diff_grad(f, x, eps);
            let fine = finite_diff_grad(f, x, eps / 2.0);
            fine.data()
                .iter()
                .zip(coarse.data())
                .map(|(&a, &b)| T::of_f64((4.0 * a.as_f64() - b.as_f64()) / 3.0))
                .collect()
        } else {
            finite_diff_grad(f, x, eps).into_data()
        };
        all_analytic.extend(analytic);
        all_numeric.extend(numeric);
    }
    Ok(max_relative_error(&all_analytic, &all_numeric))
}

fn run_op<T: Scalar>(op: &str, config: &GradcheckConfig, eps: f64, threshold: f64, stream: u64) -> Result<OpReport> {
    let op_id = OPS.iter().position(|o| *o == op).unwrap_or(OPS.len()) as u64;
    let mut rng = Rng::derive(config.seed, &[stream, op_id]);
    let corrupt = config.corrupt.as_deref() == Some(op);
    let mut worst = 0.0_f64;
    for trial in 0..config.trials {
        let case = make_case::<T>(op, &mut rng, trial)?;
        let err = check_case(&case, &mut rng, eps, T::NAME == "f32", corrupt)?;
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    Ok(OpReport {
        op: op.to_string(),
        precision: T::NAME,
        trials: config.trials,
        worst_error: worst,
        threshold,
        passed: worst < threshold,
    })
}

pub fn run(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.trials == 0 {
        return Err(Error::Usage("gradcheck needs at least one trial".into()));
    }
    let ops: Vec<&str> = if config.ops.is_empty() {
        OPS.to_vec()
    } else {
        config.ops.iter().map(String::as_str).collect()
    };
    for op in ops.iter().copied().chain(config.corrupt.as_deref()) {
        if !OPS.contains(&op) {
            return Err(Error::Usage(format!(
                "unknown op {op:?}; expected one of {}",
                OPS.join(", ")
            )));
        }
    }
    let mut reports = Vec::new();
    for op in ops {
        if config.f32 {
            reports.push(run_op::<f32>(op, config, 4e-2, F32_THRESHOLD, 1)?);
        }
        if config.f64 {
            reports.push(run_op::<f64>(op, config, 1e-6, F64_THRESHOLD, 2)?);
        }
    }
    Ok(GradcheckReport { ops: reports })
}
