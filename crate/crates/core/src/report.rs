//! Re-derives a run's reported percentages from its checkpoints and masks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{FinalReport, RoundRecord};
use crate::model::{load_checkpoint, total_accounting, Accounting, FilterMask, ModelState};

/// Largest tolerated gap between a stored and a recomputed percentage.
pub const DISCREPANCY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Checkpoint,
    Masks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub round: usize,
    pub t: f64,
    pub lambda: f64,
    pub action: String,
    pub accuracy: f64,
    pub acc_loss: f64,
    pub params_remaining: u64,
    pub params_red_pct: f64,
    pub flops_remaining: u64,
    pub flops_red_pct: f64,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub discrepancies: Vec<String>,
    pub final_report: Option<FinalReport>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every round record of `dir` and recomputes its accounting.
///
/// Rounds whose checkpoint was kept are recomputed from the checkpoint;
/// the others from the mask bit strings in the round record.
pub fn build_report(dir: &Path) -> Result<RunReport> {
    let cfg = RunConfig::load(dir.join("config.json"))?;
    let baseline = load_checkpoint(dir.join("checkpoints/round_0000.pkckpt"))?;
    let base_acct = total_accounting(&baseline);
    let template = ModelState::zeros(cfg.build_architecture()?)?;

    let rounds_dir = dir.join("rounds");
    let mut files: Vec<_> = fs::read_dir(&rounds_dir)
        .map_err(|e| Error::io(&rounds_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();

    let mut rows = Vec::with_capacity(files.len());
    let mut discrepancies = Vec::new();
    for path in files {
        let rec: RoundRecord = read_json(&path)?;
        let masks = rec
            .masks
            .iter()
            .map(|s| FilterMask::from_bit_string(s))
            .collect::<Result<Vec<_>>>()?;
        let (acct, source) = match &rec.checkpoint {
            Some(ckpt) => {
                let model = load_checkpoint(dir.join(ckpt))?;
                if model.masks != masks {
                    discrepancies.push(format!("round {}: checkpoint masks differ from the round record", rec.round));
                }
                (total_accounting(&model), Source::Checkpoint)
            }
            None => {
                let mut m = template.clone();
                m.set_masks(masks)?;
                (total_accounting(&m), Source::Masks)
            }
        };
        let row = row_from(&rec, &acct, &base_acct, source);
        check(
            &mut discrepancies,
            rec.round,
            "params_red_pct",
            rec.params_reduction_pct,
            row.params_red_pct,
        );
        check(
            &mut discrepancies,
            rec.round,
            "flops_red_pct",
            rec.flops_reduction_pct,
            row.flops_red_pct,
        );
        if rec.params_remaining != row.params_remaining {
            discrepancies.push(format!(
                "round {}: params_remaining stored {} recomputed {}",
                rec.round, rec.params_remaining, row.params_remaining
            ));
        }
        if rec.flops_remaining != row.flops_remaining {
            discrepancies.push(format!(
                "round {}: flops_remaining stored {} recomputed {}",
                rec.round, rec.flops_remaining, row.flops_remaining
            ));
        }
        rows.push(row);
    }
    let final_path = dir.join("final_report.json");
    let final_report = if final_path.exists() {
        Some(read_json(&final_path)?)
    } else {
        None
    };
    Ok(RunReport {
        rows,
        discrepancies,
        final_report,
    })
}

fn row_from(rec: &RoundRecord, acct: &Accounting, base: &Accounting, source: Source) -> ReportRow {
    ReportRow {
        round: rec.round,
        t: rec.t,
        lambda: rec.lambda,
        action: rec.action.clone(),
        accuracy: rec.accuracy,
        acc_loss: rec.acc_loss,
        params_remaining: acct.total_params,
        params_red_pct: acct.params_reduction_pct(base),
        flops_remaining: acct.total_flops,
        flops_red_pct: acct.flops_reduction_pct(base),
        source,
    }
}

fn check(out: &mut Vec<String>, round: usize, what: &str, stored: f64, recomputed: f64) {
    if (stored - recomputed).abs() > DISCREPANCY_TOL {
        out.push(format!("round {round}: {what} stored {stored} recomputed {recomputed}"));
    }
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "round,T,lambda,acc,acc_loss,params_remaining,params_red_pct,flops_remaining,flops_red_pct,action,source\n",
        );
        for r in &self.rows {
            let source = match r.source {
                Source::Checkpoint => "checkpoint",
                Source::Masks => "masks",
            };
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.t,
                r.lambda,
                r.accuracy,
                r.acc_loss,
                r.params_remaining,
                r.params_red_pct,
                r.flops_remaining,
                r.flops_red_pct,
                r.action,
                source
            )
            .expect("write to string");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
