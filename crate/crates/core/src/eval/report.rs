use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{EvalReport, PairEval};

/// Accuracy table with one row per method and one column per domain, plus the
/// macro average. Cells a report has no pairs for print as `-` and are noted
/// below the table.
pub fn render_table(reports: &[EvalReport]) -> String {
    let domains: BTreeSet<&str> = reports
        .iter()
        .flat_map(|r| r.accuracy.per_domain.keys().map(String::as_str))
        .collect();
    let label_w = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max("method".len());
    let col_w = |d: &str| d.len().max(6);

    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "method");
    for d in &domains {
        let _ = write!(out, "  {:>w$}", d, w = col_w(d));
    }
    let _ = writeln!(out, "  {:>6}", "avg");
    let mut missing = Vec::new();
    for r in reports {
        let _ = write!(out, "{:<label_w$}", r.label);
        for d in &domains {
            match r.accuracy.per_domain.get(*d) {
                Some(c) => {
                    let _ = write!(out, "  {:>w$.2}", 100.0 * c.accuracy, w = col_w(d));
                }
                None => {
                    let _ = write!(out, "  {:>w$}", "-", w = col_w(d));
                    missing.push(format!("{} has no pairs in domain `{d}`", r.label));
                }
            }
        }
        let _ = writeln!(out, "  {:>6.2}", 100.0 * r.accuracy.macro_average());
    }
    for m in missing {
        let _ = writeln!(out, "note: {m}");
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn render_details(report: &EvalReport) -> String {
    let mut out = String::new();
    if let Some(routing) = &report.routing {
        let _ = writeln!(out, "\nrouting (mean pi over chosen responses)");
        let _ = writeln!(out, "{:<16}  {:>7}  {:>7}  {:>7}  {:>6}", "domain", "pi_L", "pi_M", "pi_A", "n");
        for (d, c) in routing {
            let [l, m, a] = c.pi_mean;
            let _ = writeln!(out, "{d:<16}  {l:>7.4}  {m:>7.4}  {a:>7.4}  {:>6}", c.count);
        }
    }
    if let Some(al) = &report.alignment {
        let _ = writeln!(out, "\nalignment (gradient at {} views)", al.point.name());
        let _ = writeln!(
            out,
            "{:<16}  {:>6}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
            "domain", "stage", "L", "M", "A", "gated", "excluded"
        );
        for (d, cell) in &al.per_domain {
            for (stage, s) in [("before", &cell.before), ("after", &cell.after)] {
                let _ = writeln!(
                    out,
                    "{d:<16}  {stage:>6}  {:>8}  {:>8}  {:>8}  {:>8}  {:>8}",
                    fmt_opt(s.per_view[0]),
                    fmt_opt(s.per_view[1]),
                    fmt_opt(s.per_view[2]),
                    fmt_opt(s.gate_weighted),
                    s.excluded.iter().sum::<usize>()
                );
            }
        }
    }
    for n in &report.notes {
        let _ = writeln!(out, "note: {n}");
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Per-pair CSV: id, domain, rewards, chosen routing weights and alignments.
pub fn write_csv(pairs: &[PairEval]) -> String {
    let mut out = String::from(
        "id,domain,r_chosen,r_rejected,pi_L,pi_M,pi_A,align_before_L,align_before_M,align_before_A,align_after_L,align_after_M,align_after_A\n",
    );
    let cell = |a: Option<[Option<f64>; 3]>, v: usize| a.and_then(|a| a[v]).map_or(String::new(), |x| x.to_string());
    for p in pairs {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&p.id),
            csv_field(&p.domain),
            p.r_chosen,
            p.r_rejected,
            p.pi_chosen[0],
            p.pi_chosen[1],
            p.pi_chosen[2]
        );
        for a in [p.align_before, p.align_after] {
            for v in 0..3 {
                let _ = write!(out, ",{}", cell(a, v));
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub text: PathBuf,
    pub csv: Option<PathBuf>,
}

/// Writes `<stem>.json`, `<stem>.txt` and, when `pairs` is given, `<stem>.csv` into `dir`.
pub fn emit_report(report: &EvalReport, pairs: Option<&[PairEval]>, dir: &Path, stem: &str) -> Result<ReportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |path: PathBuf, body: String| -> Result<PathBuf> {
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let text = format!("{}{}", render_table(std::slice::from_ref(report)), render_details(report));
    Ok(ReportFiles {
        json: write(dir.join(format!("{stem}.json")), json)?,
        text: write(dir.join(format!("{stem}.txt")), text)?,
        csv: pairs
            .map(|p| write(dir.join(format!("{stem}.csv")), write_csv(p)))
            .transpose()?,
    })
}
