//! Self-contained SVG charts of aggregate and inclusion tables.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{HarnessError, Result};
use crate::experiment::{final_period, header_check, parse, read_aggregates, AggregateRow};
use crate::suites::InclusionPoint;

pub const INCLUSION_COLUMNS: [&str; 3] = ["id", "target", "empirical"];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    RewardVariance,
    BiasVsReward,
    InclusionCheck,
}

impl PlotKind {
    pub const ALL: [PlotKind; 3] = [PlotKind::RewardVariance, PlotKind::BiasVsReward, PlotKind::InclusionCheck];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::RewardVariance => "reward-variance",
            PlotKind::BiasVsReward => "bias-vs-reward",
            PlotKind::InclusionCheck => "inclusion-check",
        }
    }
}

impl FromStr for PlotKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = PlotKind::ALL.iter().map(|k| k.name()).collect();
            HarnessError::Config(format!("kind: unknown plot {s:?}, expected one of {names:?}"))
        })
    }
}

/// One named sequence of points, drawn in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn write_inclusion(path: &Path, points: &[InclusionPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(INCLUSION_COLUMNS)?;
    for p in points {
        w.write_record([p.id.0.to_string(), p.target.to_string(), p.empirical.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_inclusion(path: &Path) -> Result<Vec<InclusionPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    header_check(path, r.headers()?, &INCLUSION_COLUMNS)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        out.push(InclusionPoint {
            id: popest::ObsId(parse(path, line, "id", &rec[0])?),
            target: parse(path, line, "target", &rec[1])?,
            empirical: parse(path, line, "empirical", &rec[2])?,
        });
    }
    Ok(out)
}

/// Final-period series per strategy, ordered by parameter. Rows with a
/// non-numeric parameter sort first.
pub fn aggregate_series(rows: &[AggregateRow], kind: PlotKind) -> Vec<Series> {
    let mut out: Vec<(String, Vec<(f64, f64, f64)>)> = Vec::new();
    for r in final_period(rows) {
        let y = match kind {
            PlotKind::BiasVsReward => r.bias_ipw,
            _ => r.var_ipw,
        };
        let order = r.param.parse::<f64>().unwrap_or(f64::NEG_INFINITY);
        let point = (order, r.mean_reward, y);
        match out.iter_mut().find(|(name, _)| *name == r.strategy) {
            Some((_, pts)) => pts.push(point),
            None => out.push((r.strategy.clone(), vec![point])),
        }
    }
    out.into_iter()
        .map(|(name, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series {
                name,
                points: pts.into_iter().map(|(_, x, y)| (x, y)).collect(),
            }
        })
        .collect()
}

/// Reads `csv` (aggregate, sweep, or inclusion table per `kind`) and renders it.
pub fn plot_file(csv: &Path, kind: PlotKind) -> Result<String> {
    match kind {
        PlotKind::InclusionCheck => Ok(render_inclusion(&read_inclusion(csv)?)),
        _ => Ok(render_aggregate(&read_aggregates(csv)?, kind)),
    }
}

pub fn render_aggregate(rows: &[AggregateRow], kind: PlotKind) -> String {
    let (title, y_label) = match kind {
        PlotKind::BiasVsReward => ("Bias versus reward", "IPW bias"),
        _ => ("Reward versus variance", "IPW variance"),
    };
    let series = aggregate_series(rows, kind);
    let mut chart = Chart::new(title, "mean reward", y_label, series.iter().flat_map(|s| s.points.iter().copied()));
    for (i, s) in series.iter().enumerate() {
        chart.series(s, PALETTE[i % PALETTE.len()], i);
    }
    chart.finish()
}

pub fn render_inclusion(points: &[InclusionPoint]) -> String {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.target, p.empirical)).collect();
    // Square domain so the identity line is the diagonal.
    let hi = xy.iter().map(|&(x, y)| x.max(y)).fold(0.0, f64::max);
    let bounds = xy.iter().copied().chain([(0.0, 0.0), (hi, hi)]);
    let mut chart = Chart::new("Inclusion check", "target inclusion probability", "empirical inclusion probability", bounds);
    chart.empty = xy.is_empty();
    if !chart.empty {
        chart.identity();
        chart.scatter(&xy, PALETTE[0]);
    }
    chart.finish()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

struct Chart {
    body: String,
    x: (f64, f64),
    y: (f64, f64),
    empty: bool,
}

impl Chart {
    fn new(title: &str, x_label: &str, y_label: &str, points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut x = (f64::INFINITY, f64::NEG_INFINITY);
        let mut y = x;
        let mut empty = true;
        for (px, py) in points.filter(|(a, b)| a.is_finite() && b.is_finite()) {
            empty = false;
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        let pad = |(lo, hi): (f64, f64)| {
            if lo > hi {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 * (1.0 + lo.abs()) {
                (lo - 0.5 * (1.0 + lo.abs()) * 0.1, hi + 0.5 * (1.0 + hi.abs()) * 0.1)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        let mut c = Self {
            body: String::new(),
            x: pad(x),
            y: pad(y),
            empty,
        };
        c.axes(title, x_label, y_label);
        c
    }

    fn sx(&self, v: f64) -> f64 {
        LEFT + (v - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn sy(&self, v: f64) -> f64 {
        HEIGHT - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }

    fn axes(&mut self, title: &str, x_label: &str, y_label: &str) {
        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
        let b = &mut self.body;
        let _ = writeln!(b, r#"<text class="title" x="{}" y="18" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, escape(title));
        let _ = writeln!(b, r#"<line class="axis x-axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
        let _ = writeln!(b, r#"<line class="axis y-axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
        let _ = writeln!(
            b,
            r#"<text class="axis-label x-label" x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (x0 + x1) / 2.0,
            HEIGHT - 15.0,
            escape(x_label)
        );
        let _ = writeln!(
            b,
            r#"<text class="axis-label y-label" x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
        for i in 0..=TICKS {
            let f = i as f64 / TICKS as f64;
            let (vx, vy) = (self.x.0 + f * (self.x.1 - self.x.0), self.y.0 + f * (self.y.1 - self.y.0));
            let (px, py) = (self.sx(vx), self.sy(vy));
            let b = &mut self.body;
            let _ = writeln!(b, r#"<line class="tick" x1="{px:.2}" y1="{y0}" x2="{px:.2}" y2="{}" stroke="black"/>"#, y0 + 5.0);
            let _ = writeln!(b, r#"<text class="tick-label" x="{px:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#, y0 + 18.0, tick_label(vx));
            let _ = writeln!(b, r#"<line class="tick" x1="{}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/>"#, x0 - 5.0);
            let _ = writeln!(b, r#"<text class="tick-label" x="{}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#, x0 - 8.0, py + 3.0, tick_label(vy));
        }
    }

    fn series(&mut self, s: &Series, color: &str, slot: usize) {
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.sx(x), self.sy(y))).collect();
        let name = escape(&s.name);
        let _ = writeln!(
            self.body,
            r#"<polyline class="series" data-strategy="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(self.body, r#"<circle class="marker" cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>"#);
        }
        let ly = TOP + 10.0 + 18.0 * slot as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(self.body, r#"<line class="legend-swatch" x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#, lx + 18.0);
        let _ = writeln!(self.body, r#"<text class="legend" x="{}" y="{}">{name}</text>"#, lx + 24.0, ly + 4.0);
    }

    fn scatter(&mut self, pts: &[(f64, f64)], color: &str) {
        for &(x, y) in pts {
            let _ = writeln!(
                self.body,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="2" fill="{color}"/>"#,
                self.sx(x),
                self.sy(y)
            );
        }
    }

    fn identity(&mut self) {
        let lo = self.x.0.max(self.y.0);
        let hi = self.x.1.min(self.y.1);
        let _ = writeln!(
            self.body,
            r#"<line class="identity" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
            self.sx(lo),
            self.sy(lo),
            self.sx(hi),
            self.sy(hi)
        );
    }

    fn finish(mut self) -> String {
        if self.empty {
            let _ = writeln!(
                self.body,
                r#"<text class="no-data" x="{}" y="{}" text-anchor="middle">no data</text>"#,
                (LEFT + WIDTH - RIGHT) / 2.0,
                (TOP + HEIGHT - BOTTOM) / 2.0
            );
        }
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, param: &str, period: usize, reward: f64, var: f64) -> AggregateRow {
        AggregateRow {
            strategy: strategy.into(),
            param: param.into(),
            period,
            mean_reward: reward,
            reward_ci95: 0.0,
            var_model: 0.0,
            var_ipw: var,
            var_dr: 0.0,
            bias_model: 0.0,
            bias_ipw: -var,
            bias_dr: 0.0,
            n_reps: 3,
        }
    }

    #[test]
    fn empty_table_has_axes_and_annotation() {
        let svg = render_aggregate(&[], PlotKind::RewardVariance);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("x-axis") && svg.contains("y-axis"));
        assert!(svg.contains("no data"));
        assert!(!svg.contains("<polyline"));
        let svg = render_inclusion(&[]);
        assert!(svg.contains("no data"));
    }

    #[test]
    fn one_polyline_per_strategy_from_final_period() {
        let rows = vec![
            row("srs", "init", 0, 9.0, 9.0),
            row("entropy", "1", 1, 2.0, 1.0),
            row("entropy", "0.1", 1, 3.0, 2.0),
            row("srs", "", 1, 1.0, 0.5),
        ];
        let series = aggregate_series(&rows, PlotKind::RewardVariance);
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].points, vec![(3.0, 2.0), (2.0, 1.0)]);
        let svg = render_aggregate(&rows, PlotKind::BiasVsReward);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches(r#"class="legend""#).count(), 2);
        assert!(svg.contains(">entropy</text>") && svg.contains(">srs</text>"));
        assert!(!svg.contains("no data"));
    }

    #[test]
    fn inclusion_plot_has_identity_and_points() {
        let pts: Vec<_> = (0..5)
            .map(|i| InclusionPoint {
                id: popest::ObsId(i),
                target: i as f64 / 10.0,
                empirical: i as f64 / 10.0 + 0.01,
            })
            .collect();
        let svg = render_inclusion(&pts);
        assert_eq!(svg.matches(r#"class="identity""#).count(), 1);
        assert_eq!(svg.matches(r#"class="point""#).count(), 5);
    }

    #[test]
    fn inclusion_csv_round_trip_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inc.csv");
        let pts = vec![InclusionPoint {
            id: popest::ObsId(4),
            target: 0.25,
            empirical: 0.3,
        }];
        write_inclusion(&path, &pts).unwrap();
        let back = read_inclusion(&path).unwrap();
        assert_eq!((back[0].id, back[0].target, back[0].empirical), (pts[0].id, 0.25, 0.3));
        assert!(matches!(plot_file(&path, PlotKind::RewardVariance), Err(HarnessError::Schema(_))));
    }

    #[test]
    fn labels_are_escaped() {
        assert_eq!(escape("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }
}
