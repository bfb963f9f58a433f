//! Summary tables and box plots from a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{aggregate, MetricsReport, Role, VolumeEntry};
use crate::experiment::find_metrics;
use crate::trainer::Strategy;

/// Row order of the summary table.
const ROW_ORDER: [&str; 7] = ["CurSeg", "IncSeg", "CurIncSeg", "finetune", "ReSeg", "LwfSeg", "AeiSeg"];

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mean: Option<f64>,
    pub omitted: usize,
}

/// Per split label, per strategy, per role: pooled Dice and MSD over every
/// holdout and seed found.
#[derive(Debug, Clone, Default)]
pub struct Summary {
    pub splits: BTreeMap<String, BTreeMap<String, BTreeMap<Role, (Cell, Cell)>>>,
    pub entries: BTreeMap<(String, String, Role), Vec<VolumeEntry>>,
}

fn row_rank(name: &str) -> usize {
    ROW_ORDER.iter().position(|r| *r == name).unwrap_or(ROW_ORDER.len())
}

pub fn summarize(reports: &[MetricsReport]) -> Summary {
    let mut entries: BTreeMap<(String, String, Role), Vec<VolumeEntry>> = BTreeMap::new();
    for r in reports {
        for e in &r.per_volume {
            entries.entry((r.ir.clone(), r.strategy.clone(), e.role)).or_default().push(e.clone());
        }
    }
    let mut splits: BTreeMap<String, BTreeMap<String, BTreeMap<Role, (Cell, Cell)>>> = BTreeMap::new();
    for ((ir, strategy, role), es) in &entries {
        let refs: Vec<&VolumeEntry> = es.iter().collect();
        let a = aggregate(&refs);
        splits.entry(ir.clone()).or_default().entry(strategy.clone()).or_default().insert(
            *role,
            (
                Cell {
                    mean: a.mean_dice,
                    omitted: a.omitted,
                },
                Cell {
                    mean: a.mean_msd,
                    omitted: a.omitted,
                },
            ),
        );
    }
    Summary { splits, entries }
}

fn fmt_cell(c: Option<&Cell>, scale: f64, digits: usize) -> String {
    match c {
        None => "-".to_string(),
        Some(Cell { mean: None, omitted }) => format!("n/a ({omitted})"),
        Some(Cell { mean: Some(m), omitted: 0 }) => format!("{:.*}", digits, m * scale),
        Some(Cell { mean: Some(m), omitted }) => format!("{:.*} ({omitted})", digits, m * scale),
    }
}

fn sorted_rows(rows: &BTreeMap<String, BTreeMap<Role, (Cell, Cell)>>) -> Vec<&String> {
    let mut names: Vec<&String> = rows.keys().collect();
    names.sort_by_key(|n| (row_rank(n), n.to_string()));
    names
}

impl Summary {
    /// `split,method,dice_cur,dice_inc,msd_cur,msd_inc`, Dice in percent,
    /// omitted volume counts in parentheses.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,method,dice_cur,dice_inc,msd_cur,msd_inc\n");
        for (ir, rows) in &self.splits {
            for name in sorted_rows(rows) {
                let r = &rows[name];
                let get = |role: Role, dice: bool| r.get(&role).map(|(d, m)| if dice { d } else { m });
                let _ = writeln!(
                    s,
                    "{ir},{name},{},{},{},{}",
                    fmt_cell(get(Role::Cur, true), 100.0, 1),
                    fmt_cell(get(Role::Inc, true), 100.0, 1),
                    fmt_cell(get(Role::Cur, false), 1.0, 2),
                    fmt_cell(get(Role::Inc, false), 1.0, 2),
                );
            }
        }
        s
    }

    /// Aligned text tables, one Dice and one MSD block per split.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (ir, rows) in &self.splits {
            for (title, dice, scale, digits) in [("Dice [%]", true, 100.0, 1), ("MSD [mm]", false, 1.0, 2)] {
                let _ = writeln!(s, "{ir} {title}");
                let _ = writeln!(s, "{:<10} {:>12} {:>12}", "Method", "Cur", "Inc");
                for name in sorted_rows(rows) {
                    let r = &rows[name];
                    let get = |role: Role| r.get(&role).map(|(d, m)| if dice { d } else { m });
                    let _ = writeln!(
                        s,
                        "{:<10} {:>12} {:>12}",
                        name,
                        fmt_cell(get(Role::Cur), scale, digits),
                        fmt_cell(get(Role::Inc), scale, digits)
                    );
                }
                s.push('\n');
            }
        }
        s
    }
}

/// Linear-interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Box plot of labelled groups: median, quartiles, whiskers at 1.5 IQR, outliers as dots.
pub fn box_plot_svg(title: &str, y_label: &str, groups: &[(String, Vec<f64>)]) -> String {
    let (w, h, left, top, bottom) = (80.0 + 70.0 * groups.len().max(1) as f64, 360.0, 60.0, 40.0, 90.0);
    let plot_h = h - top - bottom;
    let all: Vec<f64> = groups.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite()).collect();
    let (mut lo, mut hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| top + plot_h * (1.0 - (v - lo) / (hi - lo));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, top + plot_h);
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 4.0, y(v) + 4.0);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/>"##, y(v), w - 10.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        escape(y_label)
    );
    for (i, (name, vals)) in groups.iter().enumerate() {
        let cx = left + 45.0 + 70.0 * i as f64;
        let mut v: Vec<f64> = vals.iter().copied().filter(|x| x.is_finite()).collect();
        v.sort_by(f64::total_cmp);
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="end" transform="rotate(-40 {cx:.1} {:.1})">{}</text>"#,
            top + plot_h + 14.0,
            top + plot_h + 14.0,
            escape(name)
        );
        if v.is_empty() {
            continue;
        }
        let (q1, med, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let lo_w = v.iter().copied().find(|&x| x >= q1 - 1.5 * iqr).unwrap_or(q1);
        let hi_w = v.iter().rev().copied().find(|&x| x <= q3 + 1.5 * iqr).unwrap_or(q3);
        let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, y(lo_w), y(q1));
        let _ = writeln!(s, r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#, y(q3), y(hi_w));
        for wv in [lo_w, hi_w] {
            let _ = writeln!(s, r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="black"/>"#, cx - 8.0, y(wv), cx + 8.0);
        }
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="36" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - 18.0,
            y(q3),
            (y(q1) - y(q3)).max(0.5)
        );
        let _ = writeln!(s, r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="black" stroke-width="2"/>"#, cx - 18.0, y(med), cx + 18.0);
        for &o in v.iter().filter(|&&x| x < lo_w || x > hi_w) {
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{:.1}" r="2.5" fill="none" stroke="black"/>"#, y(o));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub dir: PathBuf,
    pub text: String,
    pub csv: String,
    pub plots: Vec<PathBuf>,
}

/// Read every metrics file under `run_dir` and write `report/` with the
/// summary table (text and CSV) and per-split Dice/MSD box plots.
pub fn report(run_dir: &Path) -> Result<ReportOutput> {
    if !run_dir.is_dir() {
        return Err(Error::Missing(format!("run directory {}", run_dir.display())));
    }
    let paths = find_metrics(run_dir)?;
    if paths.is_empty() {
        return Err(Error::Missing(format!("no metrics.json under {}", run_dir.display())));
    }
    let reports = paths
        .iter()
        .map(|p| MetricsReport::from_json(&fs::read_to_string(p)?).map_err(|e| Error::format(p, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&reports);
    let dir = run_dir.join("report");
    fs::create_dir_all(&dir)?;
    let text = summary.to_text();
    let csv = summary.to_csv();
    fs::write(dir.join("summary.txt"), &text)?;
    fs::write(dir.join("summary.csv"), &csv)?;
    let mut plots = Vec::new();
    for ir in summary.splits.keys() {
        let mut keys: Vec<&(String, String, Role)> = summary.entries.keys().filter(|k| &k.0 == ir).collect();
        keys.sort_by_key(|k| (k.2, row_rank(&k.1)));
        for (metric, label) in [("dice", "Dice"), ("msd", "MSD [mm]")] {
            let groups: Vec<(String, Vec<f64>)> = keys
                .iter()
                .map(|k| {
                    let vals = summary.entries[*k]
                        .iter()
                        .filter(|e| !e.omitted)
                        .filter_map(|e| if metric == "dice" { Some(e.dice) } else { e.msd })
                        .collect();
                    (format!("{} {}", k.1, k.2.as_str()), vals)
                })
                .collect();
            let path = dir.join(format!("{metric}_{ir}.svg"));
            fs::write(&path, box_plot_svg(&format!("{ir} per-volume {label}"), label, &groups))?;
            plots.push(path);
        }
    }
    Ok(ReportOutput { dir, text, csv, plots })
}

/// Reports of one strategy in `run_dir`.
pub fn reports_for(run_dir: &Path, strategy: Strategy) -> Result<Vec<MetricsReport>> {
    find_metrics(run_dir)?
        .iter()
        .map(|p| MetricsReport::from_json(&fs::read_to_string(p)?))
        .filter(|r| r.as_ref().map_or(true, |r| r.strategy == strategy.label()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: u32, role: Role, dice: f64, omitted: bool) -> VolumeEntry {
        VolumeEntry {
            volume_id: v,
            role,
            class: 1,
            dice,
            msd: (!omitted).then_some(0.5),
            omitted,
        }
    }

    #[test]
    fn omissions_render_in_parentheses() {
        let r = MetricsReport::new(
            "LwfSeg",
            "IR01",
            1,
            0,
            vec![entry(1, Role::Cur, 0.9, false), entry(2, Role::Cur, 0.0, true), entry(1, Role::Inc, 0.5, false)],
        );
        let s = summarize(&[r]);
        let csv = s.to_csv();
        assert_eq!(csv.lines().nth(1).unwrap(), "IR01,LwfSeg,90.0 (1),50.0,0.50 (1),0.50");
        assert!(s.to_text().contains("90.0 (1)"));
    }

    #[test]
    fn rows_follow_the_table_order() {
        let a = MetricsReport::new("AeiSeg", "IR01", 1, 0, vec![entry(1, Role::Cur, 0.9, false)]);
        let b = MetricsReport::new("CurSeg", "IR01", 1, 0, vec![entry(1, Role::Cur, 0.8, false)]);
        let csv = summarize(&[a, b]).to_csv();
        let rows: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(rows, vec!["CurSeg", "AeiSeg"]);
    }

    #[test]
    fn box_plot_is_wellformed() {
        let svg = box_plot_svg("t", "Dice", &[("a".into(), vec![0.1, 0.5, 0.6, 0.7, 3.0]), ("b".into(), vec![])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        // fences at [0.2, 1.0]: 0.1 and 3.0 are outliers
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!((quantile(&[1.0, 2.0, 3.0, 4.0], 0.5) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(report(d.path()), Err(Error::Missing(_))));
    }
}
