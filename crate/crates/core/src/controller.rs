//! Threshold adaptation across pruning rounds.
//!
//! One state machine serves the three policies. A round is *acceptable* when
//! the policy metric (accuracy loss, parameter reduction or FLOPs reduction)
//! is strictly below the target. Acceptable rounds advance the threshold by
//! `λ`; an unacceptable round rolls back to the last acceptable round `k` with
//! `λ = λ[k] / 2^(N + exponent_base)`, `N` being the number of earlier
//! rollbacks to `k`. A round rolled back to `max_rollbacks` times is
//! invalidated and the search moves further back. The run converges once the
//! tracked model size changed by less than `convergence_tol` (relative) on
//! each of the last `convergence_window` steps of the live trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pruning::PruneGoal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    AccuracyGuaranteed,
    MemoryConstrained,
    FlopsConstrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub kind: PolicyKind,
    /// Accuracy-loss %, parameter-reduction % or FLOPs-reduction %.
    pub target: f64,
    /// Size measure minimized by the accuracy-guaranteed policy.
    #[serde(default = "default_minimize")]
    pub minimize: PruneGoal,
}

fn default_minimize() -> PruneGoal {
    PruneGoal::Params
}

impl Policy {
    pub fn accuracy(target: f64) -> Self {
        Policy {
            kind: PolicyKind::AccuracyGuaranteed,
            target,
            minimize: PruneGoal::Params,
        }
    }

    pub fn memory(target: f64) -> Self {
        Policy {
            kind: PolicyKind::MemoryConstrained,
            target,
            minimize: PruneGoal::Params,
        }
    }

    pub fn flops(target: f64) -> Self {
        Policy {
            kind: PolicyKind::FlopsConstrained,
            target,
            minimize: PruneGoal::Flops,
        }
    }

    /// Size measure tracked for convergence and used for layer threshold shares.
    pub fn size_goal(&self) -> PruneGoal {
        match self.kind {
            PolicyKind::AccuracyGuaranteed => self.minimize,
            PolicyKind::MemoryConstrained => PruneGoal::Params,
            PolicyKind::FlopsConstrained => PruneGoal::Flops,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target >= 0.0) {
            return Err(Error::Policy(format!("policy target must be >= 0 (got {})", self.target)));
        }
        Ok(())
    }

    /// The policy's metric from `observed`.
    pub fn metric(&self, observed: &Observed) -> Result<f64> {
        let (value, name) = match self.kind {
            PolicyKind::AccuracyGuaranteed => (observed.acc_loss, "acc_loss"),
            PolicyKind::MemoryConstrained => (observed.param_reduction, "param_reduction"),
            PolicyKind::FlopsConstrained => (observed.flops_reduction, "flops_reduction"),
        };
        value.ok_or_else(|| Error::Policy(format!("observation lacks {name}")))
    }

    pub fn size(&self, observed: &Observed) -> Result<u64> {
        let (value, name) = match self.size_goal() {
            PruneGoal::Params => (observed.current_params, "current_params"),
            PruneGoal::Flops => (observed.current_flops, "current_flops"),
        };
        value.ok_or_else(|| Error::Policy(format!("observation lacks {name}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub initial_t: f64,
    pub initial_lambda: f64,
    /// Consecutive small size changes required to terminate.
    pub convergence_window: usize,
    /// Relative size change regarded as "no change".
    pub convergence_tol: f64,
    pub max_rollbacks: u32,
    /// Rollback divides λ by `2^(N + exponent_base)`.
    pub exponent_base: u32,
    pub max_rounds: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            initial_t: 0.0,
            initial_lambda: 0.005,
            convergence_window: 3,
            convergence_tol: 0.001,
            max_rollbacks: 3,
            exponent_base: 1,
            max_rounds: 100,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_t >= 0.0) || !(self.initial_lambda > 0.0) {
            return Err(Error::Config("controller needs initial_t >= 0 and initial_lambda > 0".into()));
        }
        if self.convergence_window == 0 || self.max_rounds == 0 {
            return Err(Error::Config("convergence_window and max_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Metrics of a retrained round. Only the fields a policy needs are required.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Observed {
    pub acc_loss: Option<f64>,
    pub param_reduction: Option<f64>,
    pub flops_reduction: Option<f64>,
    pub current_params: Option<u64>,
    pub current_flops: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub t: f64,
    pub lambda: f64,
    pub metric_value: f64,
    pub size: u64,
    pub acceptable: bool,
    pub invalidated: bool,
    pub rollback_count: u32,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    Failed,
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Continue,
    Rollback { to_round: usize },
    Terminate { status: Termination },
}

impl Action {
    pub fn label(&self) -> String {
        match self {
            Action::Continue => "continue".into(),
            Action::Rollback { to_round } => format!("rollback:{to_round}"),
            Action::Terminate { status } => match status {
                Termination::Converged => "terminate:converged".into(),
                Termination::Failed => "terminate:failed".into(),
                Termination::BudgetExhausted => "terminate:budget".into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerDecision {
    pub action: Action,
    pub acceptable: bool,
    pub next_t: f64,
    pub next_lambda: f64,
    /// Rounds invalidated while searching for a rollback target.
    pub invalidate: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub t: f64,
    pub lambda: f64,
    /// Round about to be evaluated.
    pub round: usize,
    pub ledger: Vec<LedgerEntry>,
    /// `(round, size)` of acceptable rounds on the live trajectory.
    pub window: Vec<(usize, u64)>,
}

impl ControllerState {
    /// Fresh state whose round 0 is the unpruned model of the given size.
    pub fn new(cfg: &ControllerConfig, baseline_size: u64) -> Self {
        ControllerState {
            t: cfg.initial_t,
            lambda: cfg.initial_lambda,
            round: 1,
            ledger: vec![LedgerEntry {
                round: 0,
                t: cfg.initial_t,
                lambda: cfg.initial_lambda,
                metric_value: 0.0,
                size: baseline_size,
                acceptable: true,
                invalidated: false,
                rollback_count: 0,
                checkpoint: None,
            }],
            window: vec![(0, baseline_size)],
        }
    }

    pub fn entry(&self, round: usize) -> Option<&LedgerEntry> {
        self.ledger.iter().find(|e| e.round == round)
    }

    fn entry_mut(&mut self, round: usize) -> Option<&mut LedgerEntry> {
        self.ledger.iter_mut().find(|e| e.round == round)
    }

    /// Latest acceptable round that has not been invalidated.
    pub fn last_acceptable(&self) -> Option<usize> {
        self.ledger
            .iter()
            .rev()
            .find(|e| e.acceptable && !e.invalidated)
            .map(|e| e.round)
    }

    /// Round whose model a run with this outcome should retain.
    pub fn final_round(&self, status: Termination) -> usize {
        match status {
            Termination::Failed => 0,
            _ => self.last_acceptable().unwrap_or(0),
        }
    }

    /// First round that failed the policy predicate.
    pub fn first_unacceptable(&self) -> Option<usize> {
        self.ledger.iter().find(|e| !e.acceptable).map(|e| e.round)
    }

    /// Smallest λ used by any round so far.
    pub fn min_lambda(&self) -> f64 {
        self.ledger.iter().map(|e| e.lambda).fold(self.lambda, f64::min)
    }
}

/// Whether the last `window` steps of `sizes` each changed by less than `tol` relative.
pub fn is_converged(sizes: &[u64], window: usize, tol: f64) -> bool {
    if sizes.len() < window + 1 {
        return false;
    }
    sizes[sizes.len() - window - 1..].windows(2).all(|w| {
        let prev = w[0] as f64;
        prev > 0.0 && ((w[1] as f64 - prev).abs() / prev) < tol
    })
}

pub fn evaluate_round(
    state: &ControllerState,
    policy: &Policy,
    cfg: &ControllerConfig,
    observed: &Observed,
) -> Result<ControllerDecision> {
    let metric = policy.metric(observed)?;
    let size = policy.size(observed)?;
    let acceptable = metric < policy.target;
    let budget_left = state.round < cfg.max_rounds;

    if acceptable {
        let mut sizes: Vec<u64> = state.window.iter().map(|&(_, s)| s).collect();
        sizes.push(size);
        let action = if is_converged(&sizes, cfg.convergence_window, cfg.convergence_tol) {
            Action::Terminate {
                status: Termination::Converged,
            }
        } else if budget_left {
            Action::Continue
        } else {
            Action::Terminate {
                status: Termination::BudgetExhausted,
            }
        };
        return Ok(ControllerDecision {
            action,
            acceptable,
            next_t: state.t + state.lambda,
            next_lambda: state.lambda,
            invalidate: Vec::new(),
        });
    }

    let mut invalidate = Vec::new();
    for entry in state.ledger.iter().rev().filter(|e| e.acceptable && !e.invalidated) {
        if entry.rollback_count >= cfg.max_rollbacks {
            invalidate.push(entry.round);
            continue;
        }
        let next_lambda = entry.lambda / 2f64.powi((entry.rollback_count + cfg.exponent_base) as i32);
        let action = if budget_left {
            Action::Rollback { to_round: entry.round }
        } else {
            Action::Terminate {
                status: Termination::BudgetExhausted,
            }
        };
        return Ok(ControllerDecision {
            action,
            acceptable,
            next_t: entry.t + next_lambda,
            next_lambda,
            invalidate,
        });
    }
    Ok(ControllerDecision {
        action: Action::Terminate {
            status: Termination::Failed,
        },
        acceptable,
        next_t: state.t,
        next_lambda: state.lambda,
        invalidate,
    })
}

/// Appends the evaluated round to the ledger and, if acceptable, to the size window.
pub fn record_round(
    mut state: ControllerState,
    metric_value: f64,
    size: u64,
    acceptable: bool,
    checkpoint: Option<String>,
) -> ControllerState {
    state.ledger.push(LedgerEntry {
        round: state.round,
        t: state.t,
        lambda: state.lambda,
        metric_value,
        size,
        acceptable,
        invalidated: false,
        rollback_count: 0,
        checkpoint,
    });
    if acceptable {
        state.window.push((state.round, size));
    }
    state
}

/// Applies invalidations, rollback bookkeeping and the next `T`/`λ`.
pub fn apply_decision(mut state: ControllerState, decision: &ControllerDecision) -> ControllerState {
    for &r in &decision.invalidate {
        if let Some(e) = state.entry_mut(r) {
            e.invalidated = true;
        }
    }
    if let Action::Rollback { to_round } = decision.action {
        if let Some(e) = state.entry_mut(to_round) {
            e.rollback_count += 1;
        }
        state.window.retain(|&(r, _)| r <= to_round);
    }
    if !matches!(decision.action, Action::Terminate { .. }) {
        state.t = decision.next_t;
        state.lambda = decision.next_lambda;
        state.round += 1;
    }
    state
}

/// Owns a policy, its configuration and the evolving state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub policy: Policy,
    pub config: ControllerConfig,
    pub state: ControllerState,
}

impl Controller {
    pub fn new(policy: Policy, config: ControllerConfig, baseline_size: u64) -> Result<Self> {
        policy.validate()?;
        config.validate()?;
        let state = ControllerState::new(&config, baseline_size);
        Ok(Controller { policy, config, state })
    }

    /// Threshold for the round about to run.
    pub fn threshold(&self) -> f64 {
        self.state.t
    }

    pub fn round(&self) -> usize {
        self.state.round
    }

    /// Evaluates, records and applies one round's observation.
    pub fn observe(&mut self, observed: &Observed, checkpoint: Option<String>) -> Result<ControllerDecision> {
        let decision = evaluate_round(&self.state, &self.policy, &self.config, observed)?;
        let metric = self.policy.metric(observed)?;
        let size = self.policy.size(observed)?;
        let state = std::mem::replace(&mut self.state, ControllerState::new(&self.config, 0));
        let state = record_round(state, metric, size, decision.acceptable, checkpoint);
        self.state = apply_decision(state, &decision);
        Ok(decision)
    }
}
