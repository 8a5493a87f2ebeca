//! Iterative prune → rewind → retrain → evaluate loop, plus baselines and sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{collect_attention, AttentionConfig, AttentionFunction};
use crate::config::RunConfig;
use crate::controller::{Action, Controller, Observed, PolicyKind, Termination};
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, total_accounting, Accounting, FilterMask, LayerParams, ModelState};
use crate::pruning::{l1_filter_scores, prune_fraction, prune_round};
use crate::rng::RngState;
use crate::train::{evaluate_top1, train_epochs, TrainConfig, Velocity};

/// Weights and optimizer state captured at the rewind epoch.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub epoch: usize,
    pub model: ModelState,
    pub velocity: Velocity,
}

/// Rewinds `model` to the snapshot epoch.
///
/// The learning-rate position always moves to `snapshot.epoch`. With
/// `rewind_weights` the live filters take their snapshot values (and momentum);
/// otherwise the weights are kept and momentum starts from zero.
pub fn rewind(model: &ModelState, snapshot: Option<&Snapshot>, rewind_weights: bool) -> Result<(ModelState, Velocity)> {
    let snapshot = snapshot.ok_or_else(|| Error::Checkpoint("no rewind snapshot available".into()))?;
    if rewind_weights {
        let mut m = snapshot.model.clone();
        if m.arch != model.arch {
            return Err(Error::Checkpoint("snapshot architecture differs from model".into()));
        }
        m.set_masks(model.masks.clone())?;
        m.round = model.round;
        m.epoch = snapshot.epoch;
        let mut v = snapshot.velocity.clone();
        v.apply_masks(&m);
        Ok((m, v))
    } else {
        let mut m = model.clone();
        m.epoch = snapshot.epoch;
        let v = Velocity::zeros(&m);
        Ok((m, v))
    }
}

/// L2 norm of `M ⊙ W_pruned − M ⊙ W_original` over conv weights, `M` being the pruned model's masks.
pub fn stability_to_pruning(pruned: &ModelState, original: &ModelState) -> Result<f64> {
    if pruned.arch != original.arch {
        return Err(Error::Shape {
            expected: vec![original.params.len()],
            actual: vec![pruned.params.len()],
        });
    }
    let mut sum = 0f64;
    for (ci, layer) in pruned.conv_indices().into_iter().enumerate() {
        let (LayerParams::Conv(a), LayerParams::Conv(b)) = (&pruned.params[layer], &original.params[layer]) else {
            unreachable!("conv index points at conv params");
        };
        for j in pruned.masks[ci].live_indices() {
            for (x, y) in a.filter(j).iter().zip(b.filter(j)) {
                let d = *x as f64 - *y as f64;
                sum += d * d;
            }
        }
    }
    Ok(sum.sqrt())
}

/// Trains a fresh model for the full schedule, snapshotting at each epoch in `snapshot_epochs`.
pub fn train_with_snapshots(cfg: &RunConfig, splits: &Splits, snapshot_epochs: &[usize]) -> Result<(ModelState, Vec<Snapshot>)> {
    let rng = RngState::new(cfg.seed);
    let train_cfg = train_config(cfg);
    let mut model = ModelState::init(cfg.build_architecture()?, &rng)?;
    let mut velocity = Velocity::zeros(&model);
    let mut cuts: Vec<usize> = snapshot_epochs.iter().copied().filter(|&e| e < cfg.total_epochs).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut snapshots = Vec::with_capacity(cuts.len());
    let mut epoch = 0;
    for cut in cuts {
        train_epochs(&mut model, &mut velocity, &splits.train, &train_cfg, &rng, epoch..cut)?;
        epoch = cut;
        snapshots.push(Snapshot {
            epoch,
            model: model.clone(),
            velocity: velocity.clone(),
        });
    }
    train_epochs(
        &mut model,
        &mut velocity,
        &splits.train,
        &train_cfg,
        &rng,
        epoch..cfg.total_epochs,
    )?;
    Ok((model, snapshots))
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.batch_size,
        sgd: cfg.sgd.clone(),
        augmentation: cfg.dataset.augmentation,
    }
}

/// Metrics of a retrained model relative to the unpruned baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub acc_loss: f64,
    pub accounting: Accounting,
    pub params_reduction: f64,
    pub flops_reduction: f64,
}

/// A trained unpruned model together with what the pruning loop needs.
pub struct Baseline {
    pub cfg: RunConfig,
    pub splits: Splits,
    pub model: ModelState,
    pub snapshot: Snapshot,
    pub accuracy: f64,
    pub accounting: Accounting,
}

impl Baseline {
    pub fn train(cfg: &RunConfig) -> Result<Self> {
        Ok(Self::train_with_snapshots(cfg, &[])?.0)
    }

    /// Like [`Baseline::train`], also returning snapshots at `extra_epochs`.
    pub fn train_with_snapshots(cfg: &RunConfig, extra_epochs: &[usize]) -> Result<(Self, Vec<Snapshot>)> {
        cfg.validate()?;
        let splits = cfg.dataset.load()?;
        let k = cfg.rewind_epoch();
        let mut epochs = extra_epochs.to_vec();
        epochs.push(k);
        let (model, snaps) = train_with_snapshots(cfg, &splits, &epochs)?;
        let snapshot = snaps
            .iter()
            .find(|s| s.epoch == k)
            .cloned()
            .expect("rewind epoch lies inside the schedule");
        let accuracy = evaluate_top1(&model, &splits.test)?;
        let accounting = total_accounting(&model);
        let baseline = Baseline {
            cfg: cfg.clone(),
            splits,
            model,
            snapshot,
            accuracy,
            accounting,
        };
        Ok((baseline, snaps))
    }

    /// Applies `masks` to `from`, rewinds and retrains the remaining epochs.
    pub fn retrain(&self, from: &ModelState, masks: Vec<FilterMask>) -> Result<ModelState> {
        self.retrain_from(from, masks, &self.snapshot, self.cfg.rewind_weights)
    }

    pub fn retrain_from(
        &self,
        from: &ModelState,
        masks: Vec<FilterMask>,
        snapshot: &Snapshot,
        rewind_weights: bool,
    ) -> Result<ModelState> {
        let mut pruned = from.clone();
        pruned.set_masks(masks)?;
        let (mut model, mut velocity) = rewind(&pruned, Some(snapshot), rewind_weights)?;
        let rng = RngState::new(self.cfg.seed);
        train_epochs(
            &mut model,
            &mut velocity,
            &self.splits.train,
            &train_config(&self.cfg),
            &rng,
            snapshot.epoch..self.cfg.total_epochs,
        )?;
        Ok(model)
    }

    pub fn evaluate(&self, model: &ModelState) -> Result<Evaluation> {
        let accuracy = evaluate_top1(model, &self.splits.test)?;
        let accounting = total_accounting(model);
        Ok(Evaluation {
            accuracy,
            acc_loss: self.accuracy - accuracy,
            params_reduction: accounting.params_reduction_pct(&self.accounting),
            flops_reduction: accounting.flops_reduction_pct(&self.accounting),
            accounting,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub t: f64,
    pub lambda: f64,
    pub action: String,
    pub acceptable: bool,
    pub accuracy: f64,
    pub acc_loss: f64,
    pub params_remaining: u64,
    pub params_reduction_pct: f64,
    pub flops_remaining: u64,
    pub flops_reduction_pct: f64,
    pub pruned_filters: usize,
    pub layer_thresholds: Vec<f64>,
    pub masks: Vec<String>,
    pub stability: f64,
    pub wall_time_s: f64,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub status: Termination,
    pub rounds_run: usize,
    pub baseline_accuracy: f64,
    pub baseline_params: u64,
    pub baseline_flops: u64,
    pub final_round: usize,
    pub final_t: f64,
    pub final_accuracy: f64,
    pub final_acc_loss: f64,
    pub final_params: u64,
    pub final_flops: u64,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
    pub min_lambda: f64,
    /// Last acceptable round and first round past the target.
    pub last_below_target: Option<usize>,
    pub first_above_target: Option<usize>,
    pub final_checkpoint: String,
}

pub const TRACE_HEADER: &str = "round,T,lambda,acc,acc_loss,params_red_pct,flops_red_pct,action";

fn trace_row(r: &RoundRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.round, r.t, r.lambda, r.accuracy, r.acc_loss, r.params_reduction_pct, r.flops_reduction_pct, r.action
    )
}

fn checkpoint_rel(round: usize) -> String {
    format!("checkpoints/round_{round:04}.pkckpt")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mask_strings(model: &ModelState) -> Vec<String> {
    model.masks.iter().map(FilterMask::to_bit_string).collect()
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: FinalReport,
    pub rounds: Vec<RoundRecord>,
}

/// Runs the adaptive pruning loop, writing all artifacts under `dir`.
pub fn run_experiment(cfg: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    let baseline = Baseline::train(cfg)?;
    run_with_baseline(&baseline, dir)
}

pub fn run_with_baseline(baseline: &Baseline, dir: &Path) -> Result<RunOutcome> {
    let cfg = &baseline.cfg;
    for sub in ["", "rounds", "checkpoints"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_text(&dir.join("config.json"), &cfg.to_json())?;

    let policy = cfg.policy;
    let goal = policy.size_goal();
    let size_of = |a: &Accounting| match goal {
        crate::pruning::PruneGoal::Params => a.total_params,
        crate::pruning::PruneGoal::Flops => a.total_flops,
    };
    let mut controller = Controller::new(policy, cfg.controller.clone(), size_of(&baseline.accounting))?;

    let mut base = baseline.model.clone();
    base.round = 0;
    save_checkpoint(&base, dir.join(checkpoint_rel(0)))?;
    let mut rounds = vec![RoundRecord {
        round: 0,
        t: controller.threshold(),
        lambda: controller.state.lambda,
        action: "baseline".into(),
        acceptable: true,
        accuracy: baseline.accuracy,
        acc_loss: 0.0,
        params_remaining: baseline.accounting.total_params,
        params_reduction_pct: 0.0,
        flops_remaining: baseline.accounting.total_flops,
        flops_reduction_pct: 0.0,
        pruned_filters: 0,
        layer_thresholds: Vec::new(),
        masks: mask_strings(&base),
        stability: 0.0,
        wall_time_s: 0.0,
        checkpoint: Some(checkpoint_rel(0)),
    }];
    write_json(&dir.join("rounds/round_0000.json"), &rounds[0])?;
    let mut trace = format!("{TRACE_HEADER}\n{}\n", trace_row(&rounds[0]));
    let mut kept_over_target = false;

    let status = loop {
        let started = Instant::now();
        let round = controller.round();
        let t = controller.threshold();
        let lambda = controller.state.lambda;

        let summary = collect_attention(&base, &baseline.splits.train, &cfg.attention)?;
        write_text(&dir.join(format!("attn_round_{round:04}.csv")), &summary.to_csv())?;
        let outcome = prune_round(&base, &summary, t, goal)?;
        let pruned_filters = outcome.pruned_count();
        let mut model = baseline.retrain(&base, outcome.masks)?;
        model.round = round;
        let eval = baseline.evaluate(&model)?;
        let ckpt = checkpoint_rel(round);
        save_checkpoint(&model, dir.join(&ckpt))?;

        let observed = Observed {
            acc_loss: Some(eval.acc_loss),
            param_reduction: Some(eval.params_reduction),
            flops_reduction: Some(eval.flops_reduction),
            current_params: Some(eval.accounting.total_params),
            current_flops: Some(eval.accounting.total_flops),
        };
        let decision = controller.observe(&observed, Some(ckpt.clone()))?;

        let keep_ckpt = decision.acceptable || (!kept_over_target && policy.kind != PolicyKind::AccuracyGuaranteed);
        if !decision.acceptable && keep_ckpt {
            kept_over_target = true;
        }
        if !keep_ckpt {
            let p = dir.join(&ckpt);
            fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
        let record = RoundRecord {
            round,
            t,
            lambda,
            action: decision.action.label(),
            acceptable: decision.acceptable,
            accuracy: eval.accuracy,
            acc_loss: eval.acc_loss,
            params_remaining: eval.accounting.total_params,
            params_reduction_pct: eval.params_reduction,
            flops_remaining: eval.accounting.total_flops,
            flops_reduction_pct: eval.flops_reduction,
            pruned_filters,
            layer_thresholds: outcome.thresholds,
            masks: mask_strings(&model),
            stability: stability_to_pruning(&model, &baseline.model)?,
            wall_time_s: started.elapsed().as_secs_f64(),
            checkpoint: keep_ckpt.then_some(ckpt),
        };
        write_json(&dir.join(format!("rounds/round_{round:04}.json")), &record)?;
        writeln!(trace, "{}", trace_row(&record)).expect("write to string");
        rounds.push(record);

        match decision.action {
            Action::Continue => base = model,
            Action::Rollback { to_round } => {
                let path = rounds[to_round]
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint(format!("round {to_round} has no checkpoint")))?;
                base = load_checkpoint(dir.join(path))?;
            }
            Action::Terminate { status } => break status,
        }
    };
    write_text(&dir.join("trace.csv"), &trace)?;

    let final_round = controller.state.final_round(status);
    let fin = &rounds[final_round];
    let final_ckpt = "checkpoints/final.pkckpt".to_string();
    let src = dir.join(fin.checkpoint.as_ref().expect("acceptable rounds keep checkpoints"));
    fs::copy(&src, dir.join(&final_ckpt)).map_err(|e| Error::io(&src, e))?;
    let report = FinalReport {
        status,
        rounds_run: rounds.len() - 1,
        baseline_accuracy: baseline.accuracy,
        baseline_params: baseline.accounting.total_params,
        baseline_flops: baseline.accounting.total_flops,
        final_round,
        final_t: fin.t,
        final_accuracy: fin.accuracy,
        final_acc_loss: fin.acc_loss,
        final_params: fin.params_remaining,
        final_flops: fin.flops_remaining,
        params_reduction_pct: fin.params_reduction_pct,
        flops_reduction_pct: fin.flops_reduction_pct,
        min_lambda: controller.state.min_lambda(),
        last_below_target: controller.state.last_acceptable(),
        first_above_target: controller.state.first_unacceptable(),
        final_checkpoint: final_ckpt,
    };
    write_json(&dir.join("final_report.json"), &report)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        report,
        rounds,
    })
}

/// One row of an ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub accuracy: f64,
    pub acc_loss: f64,
    pub params_red: f64,
}

/// Scoring methods compared by the one-shot sweep.
pub fn sweep_methods() -> Vec<(String, Option<(AttentionFunction, f64)>)> {
    let mut v: Vec<(String, Option<(AttentionFunction, f64)>)> = [
        (AttentionFunction::Mean, 1.0),
        (AttentionFunction::Mean, 2.0),
        (AttentionFunction::Mean, 4.0),
        (AttentionFunction::Sum, 1.0),
        (AttentionFunction::Max, 1.0),
    ]
    .into_iter()
    .map(|(f, p)| (format!("attention_{}_p{}", f.name(), p), Some((f, p))))
    .collect();
    v.push(("l1_norm".into(), None));
    v
}

fn method_scores(baseline: &Baseline, model: &ModelState, method: Option<(AttentionFunction, f64)>) -> Result<Vec<Vec<f64>>> {
    match method {
        Some((function, p)) => {
            let cfg = AttentionConfig {
                function,
                p,
                ..baseline.cfg.attention.clone()
            };
            Ok(collect_attention(model, &baseline.splits.train, &cfg)?.scores)
        }
        None => Ok(l1_filter_scores(model)),
    }
}

/// Prunes `rate` of every layer's filters once per sweep method, retrains and evaluates.
pub fn oneshot_sweep(baseline: &Baseline, rate: f64) -> Result<Vec<MethodResult>> {
    oneshot_methods(baseline, rate, sweep_methods())
}

/// One-shot comparison of the run's configured attention function against the L1 norm.
pub fn oneshot_compare(baseline: &Baseline, rate: f64) -> Result<Vec<MethodResult>> {
    let a = &baseline.cfg.attention;
    let methods = vec![
        (format!("attention_{}_p{}", a.function.name(), a.p), Some((a.function, a.p))),
        ("l1_norm".to_string(), None),
    ];
    oneshot_methods(baseline, rate, methods)
}

pub fn oneshot_methods(
    baseline: &Baseline,
    rate: f64,
    methods: Vec<(String, Option<(AttentionFunction, f64)>)>,
) -> Result<Vec<MethodResult>> {
    methods
        .into_iter()
        .map(|(method, m)| {
            let scores = method_scores(baseline, &baseline.model, m)?;
            let masks = prune_fraction(&baseline.model, &scores, rate)?;
            let model = baseline.retrain(&baseline.model, masks)?;
            let eval = baseline.evaluate(&model)?;
            Ok(MethodResult {
                method,
                accuracy: eval.accuracy,
                acc_loss: eval.acc_loss,
                params_red: eval.params_reduction,
            })
        })
        .collect()
}

pub fn methods_csv(rows: &[MethodResult]) -> String {
    let mut s = String::from("method,acc_loss,params_red\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.method, r.acc_loss, r.params_red).expect("write to string");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedCriterion {
    /// Attention scores from the run's attention config.
    Attention,
    L1Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedRateRound {
    pub round: usize,
    pub accuracy: f64,
    pub acc_loss: f64,
    pub params_red: f64,
    pub flops_red: f64,
}

/// Non-adaptive iterative pruning: each round removes `rate` of every
/// layer's live filters. Stops once the accuracy loss reaches `stop_loss`,
/// before a round whose masks would exceed `max_params_red`, when nothing
/// more can be pruned, or after `max_rounds`.
pub fn fixed_rate_run(
    baseline: &Baseline,
    criterion: FixedCriterion,
    rate: f64,
    stop_loss: f64,
    max_params_red: f64,
    max_rounds: usize,
) -> Result<Vec<FixedRateRound>> {
    let method = match criterion {
        FixedCriterion::Attention => Some((baseline.cfg.attention.function, baseline.cfg.attention.p)),
        FixedCriterion::L1Norm => None,
    };
    let mut base = baseline.model.clone();
    let mut out = Vec::new();
    for round in 1..=max_rounds {
        let scores = method_scores(baseline, &base, method)?;
        let masks = prune_fraction(&base, &scores, rate)?;
        if masks == base.masks {
            break;
        }
        let mut probe = base.clone();
        probe.set_masks(masks.clone())?;
        if total_accounting(&probe).params_reduction_pct(&baseline.accounting) > max_params_red {
            break;
        }
        let model = baseline.retrain(&base, masks)?;
        let eval = baseline.evaluate(&model)?;
        out.push(FixedRateRound {
            round,
            accuracy: eval.accuracy,
            acc_loss: eval.acc_loss,
            params_red: eval.params_reduction,
            flops_red: eval.flops_reduction,
        });
        if eval.acc_loss >= stop_loss {
            break;
        }
        base = model;
    }
    Ok(out)
}

pub fn fixed_rate_csv(rows: &[FixedRateRound]) -> String {
    let mut s = String::from("round,acc,acc_loss,params_red,flops_red\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.round, r.accuracy, r.acc_loss, r.params_red, r.flops_red
        )
        .expect("write to string");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewindPoint {
    pub k: usize,
    pub accuracy: f64,
    pub stability: f64,
}

/// For each rewind fraction, prunes the trained model once with the same
/// attention masks, rewinds to epoch `k` and retrains to the end.
pub fn rewinding_sweep(cfg: &RunConfig, fractions: &[f64], rate: f64) -> Result<Vec<RewindPoint>> {
    let ks: Vec<usize> = fractions
        .iter()
        .map(|f| ((f * cfg.total_epochs as f64).round() as usize).clamp(1, cfg.total_epochs - 1))
        .collect();
    let (baseline, snapshots) = Baseline::train_with_snapshots(cfg, &ks)?;
    let trained = &baseline.model;
    let scores = collect_attention(trained, &baseline.splits.train, &cfg.attention)?.scores;
    let masks = prune_fraction(trained, &scores, rate)?;
    ks.iter()
        .map(|&k| {
            let snap = snapshots
                .iter()
                .find(|s| s.epoch == k)
                .ok_or_else(|| Error::Checkpoint(format!("no snapshot at epoch {k}")))?;
            let model = baseline.retrain_from(trained, masks.clone(), snap, cfg.rewind_weights)?;
            Ok(RewindPoint {
                k,
                accuracy: evaluate_top1(&model, &baseline.splits.test)?,
                stability: stability_to_pruning(&model, trained)?,
            })
        })
        .collect()
}

pub fn rewind_csv(points: &[RewindPoint]) -> String {
    let mut s = String::from("k,accuracy,stability\n");
    for p in points {
        writeln!(s, "{},{},{}", p.k, p.accuracy, p.stability).expect("write to string");
    }
    s
}
