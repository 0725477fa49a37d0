//! Tables recomputed from archived records: CSV files plus aligned text.
//!
//! Success rates are percentages over clean-correct samples; accuracies are
//! fractions over all samples. Undefined cells print as `--`.

use std::fs;
use std::path::Path;

use chainshift_core::repair::RepairReport;
use chainshift_core::search::{
    clean_accuracy, family_accuracy, shifted_accuracy, success_rate, success_rate_at_budget, AttackRecord, Optimizer,
};
use chainshift_core::Family;

use crate::error::{HarnessError, IoContext, Result};

pub const UNDEFINED: &str = "--";

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, header: &[&str]) -> Self {
        Self { name, header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|i| {
                std::iter::once(&self.header)
                    .chain(&self.rows)
                    .map(|r| r[i].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect();
            padded.join("  ").trim_end().to_string()
        };
        let mut out = format!("{}\n{}\n", line(&self.header), "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        for row in &self.rows {
            out += &line(row);
            out.push('\n');
        }
        out
    }
}

fn frac(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.into(), |v| format!("{v:.4}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.into(), |v| format!("{v:.2}"))
}

fn tau_cell(tau: f64) -> String {
    format!("{tau:.2}")
}

/// Records grouped by `(tau, optimizer)` in order of first appearance.
fn groups(records: &[AttackRecord]) -> Vec<((f64, Optimizer), Vec<AttackRecord>)> {
    let mut out: Vec<((f64, Optimizer), Vec<AttackRecord>)> = Vec::new();
    for r in records {
        let key = (r.tau, r.optimizer);
        match out.iter_mut().find(|(k, _)| k.0.to_bits() == key.0.to_bits() && k.1 == key.1) {
            Some((_, v)) => v.push(r.clone()),
            None => out.push((key, vec![r.clone()])),
        }
    }
    out
}

/// Families present in every record, in canonical order.
fn common_families(records: &[AttackRecord]) -> Vec<Family> {
    Family::ALL.into_iter().filter(|&f| records.iter().all(|r| r.family(f).is_some())).collect()
}

/// Overall and per-modality accuracy and success per `(tau, optimizer)`.
pub fn summary(records: &[AttackRecord]) -> Table {
    let mut t = Table::new(
        "summary",
        &["tau", "optimizer", "modality", "n", "clean_accuracy", "shifted_accuracy", "success_rate"],
    );
    for ((tau, opt), rs) in groups(records) {
        let mut tags: Vec<String> =
            rs.iter().map(|r| r.modality.map_or("untagged", |m| m.tag()).to_string()).collect();
        tags.sort();
        tags.dedup();
        let mut subsets: Vec<(String, Vec<AttackRecord>)> = Vec::new();
        if tags.len() > 1 {
            for tag in tags {
                let sub = rs.iter().filter(|r| r.modality.map_or("untagged", |m| m.tag()) == tag).cloned().collect();
                subsets.push((tag, sub));
            }
        }
        subsets.push(("all".into(), rs));
        for (tag, sub) in subsets {
            t.rows.push(vec![
                tau_cell(tau),
                opt.tag().into(),
                tag,
                sub.len().to_string(),
                frac(clean_accuracy(&sub)),
                frac(shifted_accuracy(&sub)),
                pct(success_rate(&sub, None)),
            ]);
        }
    }
    t
}

/// Success rate of each family's own best result, one column per family.
pub fn family_success(records: &[AttackRecord]) -> Table {
    let mut t = Table::new("family_success", &["tau", "optimizer"]);
    t.header.extend(Family::ALL.iter().map(Family::to_string));
    t.header.push("winner".into());
    for ((tau, opt), rs) in groups(records) {
        let mut row = vec![tau_cell(tau), opt.tag().to_string()];
        for f in Family::ALL {
            let present = rs.iter().all(|r| r.family(f).is_some());
            row.push(if present { pct(success_rate(&rs, Some(f))) } else { UNDEFINED.into() });
        }
        row.push(pct(success_rate(&rs, None)));
        t.rows.push(row);
    }
    t
}

/// Accuracy with no shift, with each family run alone, and with the full
/// campaign (winner over all families present).
pub fn ablation(records: &[AttackRecord]) -> Table {
    let mut t = Table::new("ablation", &["tau", "optimizer", "setting", "accuracy"]);
    for ((tau, opt), rs) in groups(records) {
        let mut push = |setting: String, v: Option<f64>| t.rows.push(vec![tau_cell(tau), opt.tag().into(), setting, frac(v)]);
        push("Clean".into(), clean_accuracy(&rs));
        for f in common_families(&rs) {
            let label = if f.code().len() == 1 { format!("Only-{}", f.code()) } else { f.to_string() };
            push(label, family_accuracy(&rs, f));
        }
        push("Full".into(), shifted_accuracy(&rs));
    }
    t
}

/// Success rate after the first `b` trials of each family; needs traces.
pub fn budget(records: &[AttackRecord], budgets: &[usize]) -> Option<Table> {
    let mut t = Table::new("budget", &["tau", "optimizer", "budget", "success_rate"]);
    for ((tau, opt), rs) in groups(records) {
        for &b in budgets {
            if rs.iter().any(|r| r.trials_per_family < b) {
                continue;
            }
            let v = success_rate_at_budget(&rs, b);
            if v.is_none() && rs.iter().any(|r| r.clean_correct()) {
                return None;
            }
            t.rows.push(vec![tau_cell(tau), opt.tag().into(), b.to_string(), pct(v)]);
        }
    }
    Some(t)
}

pub fn repair(report: &RepairReport) -> Table {
    let mut t = Table::new("repair", &["group", "n", "clean_before", "clean_after", "adv_before", "adv_after", "adv_gain"]);
    let f = |v: f64| if v.is_nan() { UNDEFINED.to_string() } else { format!("{v:.4}") };
    for r in &report.rows {
        t.rows.push(vec![
            r.group.clone(),
            r.count.to_string(),
            f(r.clean_before),
            f(r.clean_after),
            f(r.adv_before),
            f(r.adv_after),
            f(r.adv_after - r.adv_before),
        ]);
    }
    t
}

/// Attack tables for an archive; budget rows only when traces were recorded.
pub fn attack_tables(records: &[AttackRecord], budgets: &[usize]) -> Vec<Table> {
    let mut tables = vec![summary(records), family_success(records), ablation(records)];
    if records.iter().all(|r| r.per_family.iter().all(|f| f.trace.is_some())) && !records.is_empty() {
        let budgets: Vec<usize> = if budgets.is_empty() {
            let max = records.iter().map(|r| r.trials_per_family).min().unwrap_or(0);
            (1..=max).collect()
        } else {
            budgets.to_vec()
        };
        tables.extend(budget(records, &budgets));
    }
    tables
}

/// Writes `<name>.csv` for each table and a combined `report.txt`.
pub fn write_tables(dir: &Path, tables: &[Table]) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut text = String::from("accuracy: fraction of all samples; success rate: % of clean-correct samples flipped\n");
    for t in tables {
        let path = dir.join(format!("{}.csv", t.name));
        fs::write(&path, t.to_csv()).at(&path)?;
        text += &format!("\n[{}]\n{}", t.name, t.to_text());
    }
    let path = dir.join("report.txt");
    fs::write(&path, text).at(&path)
}

/// Reads a CSV written by [`write_tables`] back into header and rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::format(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| HarnessError::format(e.to_string()))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| HarnessError::format(e.to_string()))?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chainshift_core::search::{FamilyResult, TrialStatus};
    use chainshift_core::{FamilySpec, Label};

    fn record(id: &str, j_clean: f64, fams: &[(Family, f64)]) -> AttackRecord {
        let (wf, wj) = fams.iter().copied().fold((fams[0].0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        AttackRecord {
            sample_id: id.into(),
            modality: None,
            label: Label::Positive,
            winner_family: wf,
            theta: FamilySpec::neutral(wf),
            tau: 0.8,
            alpha_star: 1.0,
            ssim_global: 1.0,
            ssim_roi: 1.0,
            j_clean,
            j_adv: wj,
            success: j_clean > 0.0 && wj < 0.0,
            status: TrialStatus::Ok,
            trials_per_family: 2,
            optimizer: Optimizer::Tpe,
            seed: 0,
            per_family: fams
                .iter()
                .map(|&(family, j)| FamilyResult {
                    family,
                    j_adv: j,
                    alpha_star: 1.0,
                    success: j_clean > 0.0 && j < 0.0,
                    status: TrialStatus::Ok,
                    trace: Some(vec![Some(j + 0.5), Some(j)]),
                })
                .collect(),
        }
    }

    #[test]
    fn tables_follow_the_conventions() {
        let rs = vec![
            record("a", 0.2, &[(Family::A, 0.1), (Family::AR, -0.1)]),
            record("b", 0.2, &[(Family::A, -0.1), (Family::AR, 0.1)]),
            record("c", -0.2, &[(Family::A, -0.3), (Family::AR, -0.3)]),
        ];
        let fam = family_success(&rs);
        assert_eq!(fam.rows[0][2..].to_vec(), ["50.00", "--", "--", "50.00", "--", "--", "--", "100.00"]);
        let ab = ablation(&rs);
        let cells: Vec<(&str, &str)> = ab.rows.iter().map(|r| (r[2].as_str(), r[3].as_str())).collect();
        assert_eq!(cells, [("Clean", "0.6667"), ("Only-A", "0.3333"), ("A∘R", "0.3333"), ("Full", "0.0000")]);
        let b = budget(&rs, &[1, 2]).unwrap();
        assert_eq!(b.rows.iter().map(|r| r[3].as_str()).collect::<Vec<_>>(), ["0.00", "100.00"]);
        assert_eq!(summary(&rs).rows[0][3..], ["3", "0.6667", "0.0000", "100.00"]);
    }

    #[test]
    fn csv_roundtrips_and_text_aligns() {
        let t = ablation(&[record("a", 0.2, &[(Family::A, 0.1)])]);
        let dir = tempfile::tempdir().unwrap();
        write_tables(dir.path(), &[t.clone()]).unwrap();
        let (h, rows) = read_csv(&dir.path().join("ablation.csv")).unwrap();
        assert_eq!((h, rows), (t.header.clone(), t.rows.clone()));
        let text = t.to_text();
        let widths: Vec<usize> = text.lines().skip(2).map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{text}");
    }
}
