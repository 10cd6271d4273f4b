//! CSV and text artifacts: training history, evaluation reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::loss::LossBreakdown;
use crate::train::EpochRecord;

pub const HISTORY_HEADER: &str = "epoch,lr,r_t,loss_total,loss_nat_label,loss_rob,loss_nat_domain,loss_adv_domain,train_nat_acc,train_rob_acc,domain_acc,val_nat_acc,val_rob_acc";
pub const REPORT_HEADER: &str = "attack_name,norm,eps,steps,natural_acc,robust_acc,f1_robust";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.lr,
            r.r_t,
            l.total,
            l.nat_label,
            l.rob,
            l.nat_domain,
            l.adv_domain,
            r.train_nat_acc,
            r.train_rob_acc,
            r.domain_acc,
            r.val_nat_acc,
            r.val_rob_acc
        );
    }
    out
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), history_csv(history).as_bytes())
}

/// Reads a history CSV back. `lambda` is not stored in the file and must be
/// supplied to restore the breakdown.
pub fn read_history(path: impl AsRef<Path>, lambda: f64) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(Error::format(path, "unexpected history header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("row {}: {e}", i + 1)))?;
            if f.len() != 13 {
                return Err(Error::format(path, format!("row {}: expected 13 columns, got {}", i + 1, f.len())));
            }
            Ok(EpochRecord {
                epoch: f[0] as usize,
                lr: f[1],
                r_t: f[2],
                loss: LossBreakdown {
                    total: f[3],
                    nat_label: f[4],
                    rob: f[5],
                    nat_domain: f[6],
                    adv_domain: f[7],
                    lambda,
                    r_t: f[2],
                },
                train_nat_acc: f[8],
                train_rob_acc: f[9],
                domain_acc: f[10],
                val_nat_acc: f[11],
                val_rob_acc: f[12],
            })
        })
        .collect()
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    let _ = writeln!(out, "natural,none,0,0,{},{},", report.natural_acc, report.natural_acc);
    for a in &report.attacks {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            a.name,
            a.spec.norm.name(),
            a.spec.eps,
            a.spec.iters,
            report.natural_acc,
            a.robust_acc,
            a.f1_robust
        );
    }
    out
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), report_csv(report).as_bytes())
}

/// Human-readable summary with per-class accuracies.
pub fn summary_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "examples        {}", report.examples);
    let _ = writeln!(out, "natural acc     {:.4}", report.natural_acc);
    for a in &report.attacks {
        let _ = writeln!(
            out,
            "{:<15} robust {:.4}  f1 {:.4}  (tr {}, fr {}, fn {})  domain acc {:.4}",
            a.name, a.robust_acc, a.f1_robust, a.true_robust, a.false_robust, a.false_natural, a.domain_acc
        );
    }
    let _ = writeln!(out, "\nper-class accuracy");
    let _ = write!(out, "class  natural");
    for a in &report.attacks {
        let _ = write!(out, "  {}", a.name);
    }
    out.push('\n');
    for (c, nat) in report.per_class_natural.iter().enumerate() {
        let _ = write!(out, "{c:>5}  {nat:.4}");
        for a in &report.attacks {
            let _ = write!(out, "  {:.4}", a.per_class_robust[c]);
        }
        out.push('\n');
    }
    out
}
