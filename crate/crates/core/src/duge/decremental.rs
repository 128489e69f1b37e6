use serde::{Deserialize, Serialize};

use super::memory::{build_memory, generate_exemplars, MemoryBank};
use super::naive::{choose_replacement, naive_unlearn};
use super::plan::DecrementalPlan;
use super::step::{unlearn_step, StepLog, UnlearnStepState};
use crate::diffusion::{DenoiserModel, NoiseSchedule, SamplerConfig};
use crate::error::Result;
use crate::evalkit::{AccuracyMatrix, ErosionRecord, Evaluator};
use duge_tensor::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Duge,
    Naive,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "duge" => Ok(Method::Duge),
            "naive" => Ok(Method::Naive),
            other => Err(format!("unknown method `{other}` (expected duge or naive)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Duge => "duge",
            Method::Naive => "naive",
        })
    }
}

/// Per-step results of a decremental run. `accuracy` row 0 is the source
/// model; row δ follows step δ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecrementalReport {
    pub method: Method,
    pub plan: DecrementalPlan,
    pub accuracy: Option<AccuracyMatrix>,
    pub erosion: Vec<ErosionRecord>,
    pub steps: Vec<StepLog>,
    /// SHA-256 of each θ^δ after rounding to checkpoint precision.
    pub checkpoints: Vec<String>,
    /// Set when a step failed; everything before it is kept.
    pub aborted: Option<String>,
}

impl DecrementalReport {
    pub fn completed_steps(&self) -> usize {
        self.checkpoints.len()
    }
}

#[derive(Clone, Debug)]
pub struct DecrementalRun {
    /// θ^1..θ^Δ (fewer if the run aborted).
    pub models: Vec<DenoiserModel>,
    pub memory: Option<MemoryBank>,
    pub report: DecrementalReport,
}

/// Removes `plan.concepts` one at a time from `source`. Each finished θ^δ is
/// rounded to checkpoint precision, handed to `on_checkpoint`, evaluated when an
/// evaluator is given, and becomes θ^{δ−1} of the next step.
///
/// All randomness comes from `rng.split(plan.seed)`.
///
/// Plan and memory errors are returned directly; a failure inside a step ends
/// the run with `report.aborted` set and earlier steps preserved.
#[allow(clippy::too_many_arguments)]
pub fn run_decremental(
    source: &DenoiserModel,
    plan: &DecrementalPlan,
    method: Method,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    evaluator: Option<&Evaluator>,
    rng: &Rng,
    mut on_checkpoint: impl FnMut(usize, &DenoiserModel) -> Result<()>,
) -> Result<DecrementalRun> {
    let k = source.config.num_classes;
    plan.validate(k)?;
    let root = rng.split(plan.seed);
    let memory = match method {
        Method::Duge => Some(build_memory(
            source,
            plan,
            schedule,
            sampler,
            &root.split_named("memory"),
        )?),
        Method::Naive => None,
    };
    let mut report = DecrementalReport {
        method,
        plan: plan.clone(),
        accuracy: evaluator.map(Evaluator::matrix),
        erosion: Vec::new(),
        steps: Vec::new(),
        checkpoints: Vec::new(),
        aborted: None,
    };
    let mut models: Vec<DenoiserModel> = Vec::with_capacity(plan.steps());

    for (i, &target) in plan.concepts.iter().enumerate() {
        let step = i + 1;
        let previous = models.last().unwrap_or(source);
        let step_rng = root.split_named("iterations").split(step as u64);
        let outcome = match method {
            Method::Duge => {
                let bank = memory.as_ref().expect("memory built for duge");
                run_duge_step(previous, target, plan, bank, schedule, sampler, &root, step, &step_rng)
            }
            Method::Naive => choose_replacement(target, plan, k, &root.split_named("replacement"))
                .and_then(|replacement| {
                    let (model, iterations) = naive_unlearn(
                        previous,
                        target,
                        replacement,
                        source,
                        plan,
                        schedule,
                        sampler,
                        &step_rng,
                    )?;
                    Ok((
                        model,
                        StepLog {
                            step,
                            target: Some(target),
                            replacement: Some(replacement),
                            iterations,
                        },
                    ))
                }),
        };
        let finished = outcome.and_then(|(mut model, log)| {
            model.params.round_to_f32();
            on_checkpoint(step, &model)?;
            let scores = match evaluator {
                Some(ev) => Some((ev.accuracy(&model)?, ev.erosion(&model, step)?)),
                None => None,
            };
            Ok((model, log, scores))
        });
        match finished {
            Ok((model, log, scores)) => {
                if let Some((row, erosion)) = scores {
                    if let Some(m) = report.accuracy.as_mut() {
                        m.push(row)?;
                    }
                    report.erosion.push(erosion);
                }
                report.checkpoints.push(model.params.digest());
                report.steps.push(log);
                models.push(model);
            }
            Err(e) => {
                report.aborted = Some(format!("step {step} ({target}): {e}"));
                break;
            }
        }
    }
    Ok(DecrementalRun {
        models,
        memory,
        report,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_duge_step(
    previous: &DenoiserModel,
    target: crate::Condition,
    plan: &DecrementalPlan,
    bank: &MemoryBank,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    root: &Rng,
    step: usize,
    step_rng: &Rng,
) -> Result<(DenoiserModel, StepLog)> {
    let mut state = UnlearnStepState::new(previous, plan);
    let exemplars = generate_exemplars(
        state.phi(),
        target,
        plan,
        schedule,
        sampler,
        &root.split_named("exemplars").split(step as u64),
    )?;
    let iterations = unlearn_step(&mut state, target, plan, bank, &exemplars, schedule, step_rng)?;
    Ok((
        state.theta,
        StepLog {
            step,
            target: Some(target),
            replacement: None,
            iterations,
        },
    ))
}
