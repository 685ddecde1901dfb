//! Static report from a run directory's CSV artifacts.
//!
//! Tables copy CSV cells verbatim, so every number in `report.md` can be
//! found in `metrics.csv` or `attacks.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{csv_err, io_err, HarnessError, Result, Stage};
use crate::experiment::{ATTACKS_FILE, METRICS_FILE};

pub const REPORT_FILE: &str = "report.md";

const METRIC_COLUMNS: [&str; 7] = [
    "epoch",
    "lr",
    "ce_sum",
    "entropy_term",
    "logdet_term",
    "total_loss",
    "val_acc",
];
const ACCURACY_COLUMNS: [&str; 7] = [
    "attack",
    "epsilon",
    "n_steps",
    "mode",
    "n_votes",
    "accuracy",
    "n_examples",
];

struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err(Stage::Report, path))?;
        let headers = r
            .headers()
            .map_err(csv_err(Stage::Report, path))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()
            .map_err(csv_err(Stage::Report, path))?;
        Ok(Self { headers, rows })
    }

    fn column(&self, name: &str, path: &Path) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::MissingArtifacts {
                dir: path.to_path_buf(),
                names: vec![format!("column `{name}`")],
            })
    }

    fn markdown(&self, columns: &[&str], path: &Path) -> Result<String> {
        let idx: Vec<usize> = columns
            .iter()
            .map(|c| self.column(c, path))
            .collect::<Result<_>>()?;
        let mut out = format!("| {} |\n|{}\n", columns.join(" | "), "---|".repeat(columns.len()));
        for row in &self.rows {
            let cells: Vec<&str> = idx.iter().map(|&i| row[i].as_str()).collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        Ok(out)
    }
}

/// One plotted series: accuracy against ε for a single threat mode.
type Series = Vec<(f64, f64)>;
type PlotGroups = BTreeMap<(String, String, String), BTreeMap<String, Series>>;

/// Points grouped by `(attack, n_steps, n_votes)` then by mode.
fn plot_groups(table: &Table, path: &Path) -> Result<PlotGroups> {
    let [attack, eps, steps, mode, votes, acc] =
        ["attack", "epsilon", "n_steps", "mode", "n_votes", "accuracy"].map(|c| table.column(c, path));
    let (attack, eps, steps, mode, votes, acc) = (attack?, eps?, steps?, mode?, votes?, acc?);
    let mut groups: BTreeMap<(String, String, String), BTreeMap<String, Series>> = BTreeMap::new();
    for row in &table.rows {
        if row[attack] == "clean" {
            continue;
        }
        let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        groups
            .entry((row[attack].clone(), row[steps].clone(), row[votes].clone()))
            .or_default()
            .entry(row[mode].clone())
            .or_default()
            .push((parse(&row[eps]), parse(&row[acc])));
    }
    for series in groups.values_mut().flat_map(|g| g.values_mut()) {
        series.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.dedup_by(|a, b| a.0 == b.0);
    }
    groups.retain(|_, g| g.values().any(|s| s.len() >= 2));
    Ok(groups)
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn svg_plot(title: &str, series: &BTreeMap<String, Series>) -> String {
    let xs = series.values().flatten().map(|p| p.0);
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
        (l.min(x), h.max(x))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |x: f64| PAD + (x - lo) / span * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - y.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{title}</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{tick:.2}</text>"#,
            PAD - 6.0,
            py(tick) + 4.0
        );
    }
    for (x, anchor) in [(lo, "start"), (hi, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}">{x}</text>"#,
            px(x),
            H - PAD + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">epsilon</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">accuracy</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (i, (mode, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        for &(x, y) in points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                px(x),
                py(y)
            );
        }
        let ly = PAD + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{mode}</text>"#,
            W - PAD
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.md` and one SVG per attack with at least two budgets.
/// Returns the files written. Output depends only on the CSV contents.
pub fn emit_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let missing: Vec<String> = [METRICS_FILE, ATTACKS_FILE]
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(HarnessError::MissingArtifacts {
            dir: dir.to_path_buf(),
            names: missing,
        });
    }
    let metrics_path = dir.join(METRICS_FILE);
    let attacks_path = dir.join(ATTACKS_FILE);
    let metrics = Table::read(&metrics_path)?;
    let attacks = Table::read(&attacks_path)?;

    let mut md = String::from("# Run report\n\n");
    let _ = write!(md, "## Training history\n\nSource: `{METRICS_FILE}`\n\n");
    md.push_str(&metrics.markdown(&METRIC_COLUMNS, &metrics_path)?);
    let _ = write!(
        md,
        "\n## Accuracy\n\nSource: `{ATTACKS_FILE}`. Epsilon is in normalized `[-1, 1]` pixel units.\n\n"
    );
    md.push_str(&attacks.markdown(&ACCURACY_COLUMNS, &attacks_path)?);

    let mut written = Vec::new();
    let groups = plot_groups(&attacks, &attacks_path)?;
    if !groups.is_empty() {
        md.push_str("\n## Accuracy vs epsilon\n\n");
    }
    for ((attack, steps, votes), series) in &groups {
        let name = format!("plot_{attack}_s{steps}_v{votes}.svg");
        let title = format!("{attack} ({steps} steps), {votes} vote(s)");
        let path = dir.join(&name);
        fs::write(&path, svg_plot(&title, series)).map_err(io_err(Stage::Report, &path))?;
        let _ = writeln!(md, "![{title}]({name})\n");
        written.push(path);
    }
    let path = dir.join(REPORT_FILE);
    fs::write(&path, md).map_err(io_err(Stage::Report, &path))?;
    written.insert(0, path);
    Ok(written)
}
