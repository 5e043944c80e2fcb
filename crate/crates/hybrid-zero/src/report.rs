//! Figure data from a suite's `results.csv`: per-group confidence bands,
//! A/B differences, a summary of the final epochs and a small SVG render.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hybrid_zero_core::stats::{
    improvement_factor, paired_difference, t_confidence_band, t_interval, unpaired_difference, welch_interval, Factor,
    Interval, Level, SampleSeries,
};
use serde::{Deserialize, Serialize};

use crate::orchestrator::{read_csv, write_csv, RunError};
use crate::store;
use crate::suite::{ResultRow, NO_EVAL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// one band per (arm, eval) group
    Bands,
    /// same seeds and checkpoints under two evaluations
    PairedDifference,
    /// independently trained arms
    UnpairedDifference,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesKey {
    pub arm: String,
    pub eval: String,
}

impl SeriesKey {
    pub fn label(&self) -> String {
        if self.eval == NO_EVAL || self.eval == "default" {
            self.arm.clone()
        } else {
            format!("{}/{}", self.arm, self.eval)
        }
    }
}

fn one() -> usize {
    1
}

fn fifth() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSpec {
    pub figure: String,
    pub metric: String,
    pub comparison: Comparison,
    pub level: Level,
    /// trailing window applied to the plotted series
    #[serde(default = "one")]
    pub rolling: usize,
    /// share of the last epochs summarised as the final window
    #[serde(default = "fifth")]
    pub final_fraction: f64,
    #[serde(default)]
    pub minuend: Option<SeriesKey>,
    #[serde(default)]
    pub subtrahend: Option<SeriesKey>,
}

impl ReportSpec {
    pub fn check(&self, arms: &BTreeSet<&str>, evals: &BTreeSet<&str>) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Other(format!("report: {m}")));
        if self.rolling == 0 || !(self.final_fraction > 0.0 && self.final_fraction <= 1.0) {
            return bad("rolling must be positive and final_fraction in (0, 1]");
        }
        let pair = [&self.minuend, &self.subtrahend];
        for key in pair.iter().copied().flatten() {
            if !arms.contains(key.arm.as_str()) {
                return bad(&format!("unknown arm {}", key.arm));
            }
            if key.eval != NO_EVAL && !evals.contains(key.eval.as_str()) {
                return bad(&format!("unknown eval {}", key.eval));
            }
        }
        match (self.comparison, &self.minuend, &self.subtrahend) {
            (Comparison::Bands, _, _) => Ok(()),
            (_, Some(a), Some(b)) if a == b => bad("minuend and subtrahend are the same series"),
            (Comparison::PairedDifference, Some(a), Some(b)) if a.arm != b.arm => {
                bad("a paired difference compares two evaluations of one arm")
            }
            (_, Some(_), Some(_)) => Ok(()),
            _ => bad("differences need a minuend and a subtrahend"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRow {
    pub epoch: u32,
    pub arm: String,
    pub mean: f64,
    pub ci_halfwidth: f64,
    pub level: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub arm: String,
    pub eval: String,
    pub seeds: usize,
    pub final_epoch: u32,
    /// across seeds at the last epoch
    pub at_final_epoch: Interval,
    /// across seeds of the per-seed mean over the final window
    pub final_window: Interval,
    pub overall_mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSummary {
    pub minuend: SeriesKey,
    pub subtrahend: SeriesKey,
    pub paired: bool,
    /// minuend minus subtrahend over the final window
    pub final_window: Interval,
    /// minuend over subtrahend, final-window means
    pub factor: Factor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub suite: String,
    pub figure: String,
    pub metric: String,
    pub level: Level,
    pub final_window_epochs: Vec<u32>,
    pub groups: Vec<GroupSummary>,
    pub difference: Option<DifferenceSummary>,
}

impl Summary {
    pub fn group(&self, arm: &str, eval: &str) -> Option<&GroupSummary> {
        self.groups.iter().find(|g| g.arm == arm && g.eval == eval)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<FigureRow>,
    pub summary: Summary,
}

/// Per-group series restricted to the epochs every seed reports.
pub fn group_series(rows: &[ResultRow], metric: &str) -> BTreeMap<SeriesKey, SampleSeries> {
    let mut raw: BTreeMap<SeriesKey, BTreeMap<u64, BTreeMap<u32, f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.metric == metric) {
        raw.entry(SeriesKey { arm: r.arm.clone(), eval: r.eval.clone() })
            .or_default()
            .entry(r.seed)
            .or_default()
            .insert(r.epoch, r.value);
    }
    raw.into_iter()
        .map(|(k, seeds)| {
            let mut common: Option<BTreeSet<u32>> = None;
            for s in seeds.values() {
                let e: BTreeSet<u32> = s.keys().copied().collect();
                common = Some(match common {
                    None => e,
                    Some(c) => c.intersection(&e).copied().collect(),
                });
            }
            let epochs: Vec<u32> = common.unwrap_or_default().into_iter().collect();
            let values = seeds.values().map(|s| epochs.iter().map(|e| s[e]).collect()).collect();
            (k, SampleSeries { epochs, values })
        })
        .collect()
}

fn level_value(l: Level) -> f64 {
    l.value()
}

fn band_rows(label: &str, s: &SampleSeries, spec: &ReportSpec) -> Result<Vec<FigureRow>, RunError> {
    let band = t_confidence_band(&s.rolling(spec.rolling).map_err(stats_err)?, spec.level).map_err(stats_err)?;
    Ok((0..band.epochs.len())
        .map(|k| FigureRow {
            epoch: band.epochs[k],
            arm: label.to_string(),
            mean: band.mean[k],
            ci_halfwidth: band.half_width[k],
            level: level_value(spec.level),
            n: band.n,
        })
        .collect())
}

fn stats_err(e: hybrid_zero_core::stats::StatsError) -> RunError {
    RunError::Other(format!("statistics: {e}"))
}

fn summarize(key: &SeriesKey, s: &SampleSeries, spec: &ReportSpec) -> Result<GroupSummary, RunError> {
    let last = s.epochs.len().checked_sub(1).ok_or_else(|| RunError::Other(format!("{} has no epochs", key.label())))?;
    let at_final: Vec<f64> = s.values.iter().map(|v| v[last]).collect();
    let window = s.final_fraction(spec.final_fraction);
    let all: Vec<f64> = s.values.iter().flatten().copied().collect();
    Ok(GroupSummary {
        arm: key.arm.clone(),
        eval: key.eval.clone(),
        seeds: s.seeds(),
        final_epoch: s.epochs[last],
        at_final_epoch: t_interval(&at_final, spec.level).map_err(stats_err)?,
        final_window: t_interval(&window.seed_means(), spec.level).map_err(stats_err)?,
        overall_mean: all.iter().sum::<f64>() / all.len() as f64,
        min: all.iter().copied().fold(f64::INFINITY, f64::min),
        max: all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Aligns two series on their shared epochs.
fn align(a: &SampleSeries, b: &SampleSeries) -> (SampleSeries, SampleSeries) {
    let shared: BTreeSet<u32> = a.epochs.iter().filter(|e| b.epochs.contains(e)).copied().collect();
    let pick = |s: &SampleSeries| {
        let idx: Vec<usize> = (0..s.epochs.len()).filter(|&k| shared.contains(&s.epochs[k])).collect();
        SampleSeries {
            epochs: idx.iter().map(|&k| s.epochs[k]).collect(),
            values: s.values.iter().map(|v| idx.iter().map(|&k| v[k]).collect()).collect(),
        }
    };
    (pick(a), pick(b))
}

pub fn build_report(suite: &str, spec: &ReportSpec, rows: &[ResultRow]) -> Result<Report, RunError> {
    let groups = group_series(rows, &spec.metric);
    if groups.is_empty() {
        return Err(RunError::Other(format!("no `{}` rows", spec.metric)));
    }
    let mut figure = Vec::new();
    let mut summaries = Vec::new();
    for (k, s) in &groups {
        figure.extend(band_rows(&k.label(), s, spec)?);
        summaries.push(summarize(k, s, spec)?);
    }
    let mut difference = None;
    if let (Some(a), Some(b)) = (&spec.minuend, &spec.subtrahend) {
        let missing = |k: &SeriesKey| RunError::Other(format!("no series for {}", k.label()));
        let (sa, sb) = align(groups.get(a).ok_or_else(|| missing(a))?, groups.get(b).ok_or_else(|| missing(b))?);
        let label = format!("{} - {}", a.label(), b.label());
        let (wa, wb) = (sa.final_fraction(spec.final_fraction), sb.final_fraction(spec.final_fraction));
        let (ma, mb) = (wa.seed_means(), wb.seed_means());
        let paired = spec.comparison == Comparison::PairedDifference;
        let interval = if paired {
            let d = paired_difference(&sa, &sb).map_err(stats_err)?;
            figure.extend(band_rows(&label, &d, spec)?);
            t_interval(&d.final_fraction(spec.final_fraction).seed_means(), spec.level).map_err(stats_err)?
        } else {
            let band = unpaired_difference(&sa.rolling(spec.rolling).map_err(stats_err)?, &sb.rolling(spec.rolling).map_err(stats_err)?, spec.level)
                .map_err(stats_err)?;
            figure.extend((0..band.epochs.len()).map(|k| FigureRow {
                epoch: band.epochs[k],
                arm: label.clone(),
                mean: band.mean[k],
                ci_halfwidth: band.half_width[k],
                level: level_value(spec.level),
                n: band.n,
            }));
            welch_interval(&ma, &mb, spec.level).map_err(stats_err)?
        };
        let factor = improvement_factor(
            &t_interval(&ma, spec.level).map_err(stats_err)?,
            &t_interval(&mb, spec.level).map_err(stats_err)?,
        );
        difference = Some(DifferenceSummary { minuend: a.clone(), subtrahend: b.clone(), paired, final_window: interval, factor });
    }
    let longest = groups.values().max_by_key(|s| s.epochs.len()).expect("non-empty");
    Ok(Report {
        rows: figure,
        summary: Summary {
            suite: suite.to_string(),
            figure: spec.figure.clone(),
            metric: spec.metric.clone(),
            level: spec.level,
            final_window_epochs: longest.final_fraction(spec.final_fraction).epochs,
            groups: summaries,
            difference,
        },
    })
}

/// Line plot of each figure group's mean with its band shaded.
pub fn render_svg(title: &str, rows: &[FigureRow]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut groups: BTreeMap<&str, Vec<&FigureRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(&r.arm).or_default().push(r);
    }
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        x0 = x0.min(r.epoch as f64);
        x1 = x1.max(r.epoch as f64);
        y0 = y0.min(r.mean - finite(r.ci_halfwidth));
        y1 = y1.max(r.mean + finite(r.ci_halfwidth));
    }
    if rows.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M).unwrap();
    writeln!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M).unwrap();
    for (v, anchor, x, y) in [(x0, "start", M, H - M + 16.0), (x1, "end", W - M, H - M + 16.0)] {
        writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{v}</text>"#).unwrap();
    }
    for (v, y) in [(y0, H - M), (y1, M)] {
        writeln!(s, r#"<text x="{:.1}" y="{y:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#, M - 4.0).unwrap();
    }
    for (i, (label, pts)) in groups.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let upper: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", px(r.epoch as f64), py(r.mean + finite(r.ci_halfwidth)))).collect();
        let lower: Vec<String> = pts.iter().rev().map(|r| format!("{:.2},{:.2}", px(r.epoch as f64), py(r.mean - finite(r.ci_halfwidth)))).collect();
        writeln!(s, r#"<polygon points="{} {}" fill="{c}" fill-opacity="0.15" stroke="none"/>"#, upper.join(" "), lower.join(" ")).unwrap();
        let line: Vec<String> = pts.iter().map(|r| format!("{:.2},{:.2}", px(r.epoch as f64), py(r.mean))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, line.join(" ")).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" fill="{c}">{}</text>"#, M + 10.0, M + 16.0 * (i as f64 + 1.0), escape(label)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `<figure>.csv`, `<figure>.svg` and `summary.toml` next to the
/// suite's `results.csv`.
pub fn export(suite_dir: &Path, suite: &str, spec: &ReportSpec) -> Result<(Summary, Vec<PathBuf>), RunError> {
    let rows: Vec<ResultRow> = read_csv(&suite_dir.join("results.csv"))?;
    let report = build_report(suite, spec, &rows)?;
    let csv_path = suite_dir.join(format!("{}.csv", spec.figure));
    write_csv(&csv_path, &report.rows)?;
    let svg_path = suite_dir.join(format!("{}.svg", spec.figure));
    let title = format!("{suite}: {} ({}% band)", spec.metric, (level_value(spec.level) * 100.0).round());
    store::write_atomic(&svg_path, render_svg(&title, &report.rows).as_bytes())?;
    let summary_path = suite_dir.join("summary.toml");
    let text = toml::to_string(&report.summary).map_err(|e| RunError::Other(e.to_string()))?;
    store::write_atomic(&summary_path, text.as_bytes())?;
    Ok((report.summary, vec![csv_path, svg_path, summary_path]))
}

pub fn load_summary(suite_dir: &Path) -> Result<Summary, RunError> {
    let text = String::from_utf8_lossy(&store::read(&suite_dir.join("summary.toml"))?).into_owned();
    toml::from_str(&text).map_err(|e| RunError::Other(format!("summary: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(arms: &[(&str, &str, [[f64; 4]; 3])]) -> Vec<ResultRow> {
        let mut out = Vec::new();
        for (arm, eval, seeds) in arms {
            for (seed, vals) in seeds.iter().enumerate() {
                for (epoch, v) in vals.iter().enumerate() {
                    out.push(ResultRow {
                        suite: "s".into(),
                        arm: arm.to_string(),
                        eval: eval.to_string(),
                        seed: seed as u64,
                        epoch: epoch as u32,
                        metric: "headline".into(),
                        value: *v,
                    });
                }
            }
        }
        out
    }

    fn spec(comparison: Comparison, a: (&str, &str), b: (&str, &str)) -> ReportSpec {
        ReportSpec {
            figure: "figure".into(),
            metric: "headline".into(),
            comparison,
            level: Level::P95,
            rolling: 1,
            final_fraction: 0.5,
            minuend: Some(SeriesKey { arm: a.0.into(), eval: a.1.into() }),
            subtrahend: Some(SeriesKey { arm: b.0.into(), eval: b.1.into() }),
        }
    }

    #[test]
    fn paired_difference_of_identical_evaluations_is_zero() {
        let data = [[4.0, 3.0, 2.0, 1.0], [5.0, 4.0, 3.0, 2.0], [6.0, 5.0, 4.0, 3.0]];
        let r = rows(&[("arm", "gumbel", data), ("arm", "zero", data)]);
        let rep = build_report("s", &spec(Comparison::PairedDifference, ("arm", "gumbel"), ("arm", "zero")), &r).unwrap();
        let d = rep.summary.difference.clone().unwrap();
        assert!(d.paired);
        assert_eq!(d.final_window.mean, 0.0);
        assert_eq!(d.final_window.half_width, 0.0);
        assert_eq!(d.factor.factor, 1.0);
        let g = rep.summary.group("arm", "zero").unwrap();
        assert_eq!(g.at_final_epoch.mean, 2.0);
        // seed means over epochs 2..=3: 1.5, 2.5, 3.5
        assert!((g.final_window.mean - 2.5).abs() < 1e-12);
        assert_eq!((g.min, g.max), (1.0, 6.0));
    }

    #[test]
    fn unpaired_difference_and_schema() {
        let a = [[9.0, 8.0, 7.0, 6.0], [9.0, 8.0, 8.0, 7.0], [10.0, 9.0, 7.0, 5.0]];
        let b = [[9.0, 5.0, 3.0, 2.0], [9.0, 4.0, 2.0, 1.0], [10.0, 6.0, 3.0, 3.0]];
        let r = rows(&[("off", "default", a), ("on", "default", b)]);
        let rep = build_report("s", &spec(Comparison::UnpairedDifference, ("off", "default"), ("on", "default")), &r).unwrap();
        let d = rep.summary.difference.as_ref().unwrap();
        assert!(!d.paired);
        assert!(d.final_window.mean > 0.0);
        assert!(!d.factor.lower_bound_only && d.factor.factor > 1.0);
        // three series: two arms and the difference, four epochs each
        assert_eq!(rep.rows.len(), 12);
        assert!(rep.rows.iter().all(|r| r.ci_halfwidth >= 0.0 && r.n == 3 && r.level == 0.95));
    }

    #[test]
    fn export_is_byte_stable_and_svg_is_well_formed() {
        let dir = tempfile::tempdir().unwrap();
        let a = [[1.0, 2.0, 3.0, 4.0], [2.0, 2.0, 3.0, 5.0], [1.0, 3.0, 3.0, 4.0]];
        write_csv(&dir.path().join("results.csv"), rows(&[("x<y>", "default", a)])).unwrap();
        let mut sp = spec(Comparison::Bands, ("x<y>", "default"), ("x<y>", "default"));
        sp.minuend = None;
        sp.subtrahend = None;
        let (_, files) = export(dir.path(), "s", &sp).unwrap();
        let first: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
        export(dir.path(), "s", &sp).unwrap();
        let second: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        let header = String::from_utf8(first[0].clone()).unwrap();
        assert!(header.starts_with("epoch,arm,mean,ci_halfwidth,level,n\n"));
        let svg = String::from_utf8(first[1].clone()).unwrap();
        assert_well_formed(&svg);
        assert!(svg.contains("x&lt;y&gt;"));
        assert_eq!(load_summary(dir.path()).unwrap().groups.len(), 1);
    }

    fn assert_well_formed(xml: &str) {
        let mut reader = quick_xml::Reader::from_str(xml);
        let mut depth = 0i32;
        loop {
            match reader.read_event().expect("well-formed XML") {
                quick_xml::events::Event::Start(_) => depth += 1,
                quick_xml::events::Event::End(_) => depth -= 1,
                quick_xml::events::Event::GeneralRef(r) => {
                    assert!(["amp", "lt", "gt", "quot"].contains(&&*r.decode().unwrap()));
                }
                quick_xml::events::Event::Eof => break,
                _ => {}
            }
        }
        assert_eq!(depth, 0);
    }
}
