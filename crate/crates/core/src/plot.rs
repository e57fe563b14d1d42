//! Convergence-curve emission: average test accuracy per round, one curve
//! per strategy, as a self-contained SVG plus a delimiter-separated sidecar
//! of the plotted series.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricRow;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 62.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 46.0;

/// One curve: average accuracy (over clients and seeds) per evaluated round.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub strategy: String,
    pub points: Vec<(u64, f64)>,
}

/// Average accuracy rows into per-strategy, per-round series.
pub fn accuracy_series(rows: &[MetricRow], strategies: &[Option<String>]) -> Result<Vec<Series>> {
    if rows.len() != strategies.len() {
        return Err(Error::config("rows and strategy tags must align"));
    }
    let mut grouped: BTreeMap<(String, u64), (f64, usize)> = BTreeMap::new();
    for (row, strategy) in rows.iter().zip(strategies) {
        if row.split != "test" || row.metric != "accuracy" {
            continue;
        }
        let name = strategy.clone().unwrap_or_else(|| "run".to_string());
        let slot = grouped.entry((name, row.round)).or_insert((0.0, 0));
        slot.0 += row.value;
        slot.1 += 1;
    }
    if grouped.is_empty() {
        return Err(Error::config("metrics contain no test accuracy rows"));
    }
    let mut series: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for ((name, round), (sum, count)) in grouped {
        series
            .entry(name)
            .or_default()
            .push((round, 100.0 * sum / count as f64));
    }
    Ok(series
        .into_iter()
        .map(|(strategy, points)| Series { strategy, points })
        .collect())
}

fn nice_ticks(min: f64, max: f64, count: usize) -> Vec<f64> {
    if (max - min).abs() < 1e-12 {
        return vec![min];
    }
    let span = max - min;
    let raw_step = span / count as f64;
    let magnitude = 10f64.powf(raw_step.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * magnitude)
        .find(|&s| span / s <= count as f64)
        .unwrap_or(10.0 * magnitude);
    let start = (min / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut tick = start;
    while tick <= max + 1e-9 {
        ticks.push(tick);
        tick += step;
    }
    ticks
}

/// Render the series as an SVG document.
pub fn render_svg(series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::config("nothing to plot"));
    }
    let x_min = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).min().unwrap() as f64;
    let x_max = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).max().unwrap() as f64;
    let y_min = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(f64::INFINITY, f64::min);
    let y_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(f64::NEG_INFINITY, f64::max);
    let y_pad = ((y_max - y_min) * 0.05).max(0.5);
    let (y_lo, y_hi) = (y_min - y_pad, y_max + y_pad);
    let x_span = (x_max - x_min).max(1.0);

    let to_x = |v: f64| MARGIN_L + (v - x_min) / x_span * (WIDTH - MARGIN_L - MARGIN_R);
    let to_y = |v: f64| HEIGHT - MARGIN_B - (v - y_lo) / (y_hi - y_lo) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333\"/>\n",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    ));
    for tick in nice_ticks(x_min, x_max, 6) {
        let x = to_x(tick);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#ccc\" stroke-dasharray=\"3,3\"/>\n",
            MARGIN_T,
            HEIGHT - MARGIN_B
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\" fill=\"#333\">{tick:.0}</text>\n",
            HEIGHT - MARGIN_B + 16.0
        ));
    }
    for tick in nice_ticks(y_lo, y_hi, 6) {
        let y = to_y(tick);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#ccc\" stroke-dasharray=\"3,3\"/>\n",
            MARGIN_L,
            WIDTH - MARGIN_R
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\" fill=\"#333\">{tick:.1}</text>\n",
            MARGIN_L - 6.0,
            y + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#111\">round</text>\n",
        MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0,
        HEIGHT - 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" fill=\"#111\" transform=\"rotate(-90 14 {})\">average test accuracy (%)</text>\n",
        MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0,
        MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0
    ));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|&(r, v)| format!("{:.2},{:.2}", to_x(r as f64), to_y(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        let legend_y = MARGIN_T + 16.0 + i as f64 * 16.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{legend_y:.1}\" x2=\"{}\" y2=\"{legend_y:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            MARGIN_L + 10.0,
            MARGIN_L + 34.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"11\" fill=\"#111\">{}</text>\n",
            MARGIN_L + 40.0,
            legend_y + 4.0,
            s.strategy
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// The plotted series as `strategy,round,accuracy` rows for diffing.
pub fn render_sidecar(series: &[Series]) -> String {
    let mut out = String::from("strategy,round,accuracy\n");
    for s in series {
        for &(round, value) in &s.points {
            out.push_str(&format!("{},{round},{value}\n", s.strategy));
        }
    }
    out
}

/// Write the SVG and its sidecar (`<out>.csv`) next to each other.
pub fn write_plot(series: &[Series], out: &Path) -> Result<()> {
    let svg = render_svg(series)?;
    std::fs::write(out, svg)?;
    let sidecar = out.with_extension("svg.csv");
    std::fs::write(sidecar, render_sidecar(series))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: u64, value: f64) -> MetricRow {
        MetricRow {
            round,
            client: 0,
            domain: "a".into(),
            split: "test".into(),
            metric: "accuracy".into(),
            value,
            seed: 1,
        }
    }

    #[test]
    fn single_strategy_single_curve() {
        let rows = vec![row(1, 0.5), row(2, 0.6), row(3, 0.7)];
        let tags = vec![None, None, None];
        let series = accuracy_series(&rows, &tags).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].points.len(), 3);
        let svg = render_svg(&series).unwrap();
        assert!(svg.contains("<polyline"));
        assert!(svg.starts_with("<svg"));
    }

    #[test]
    fn empty_metrics_is_an_error() {
        let rows: Vec<MetricRow> = Vec::new();
        assert!(accuracy_series(&rows, &[]).is_err());
    }

    #[test]
    fn two_strategies_two_curves_and_sidecar_counts() {
        let rows = vec![row(1, 0.5), row(2, 0.6), row(1, 0.4), row(2, 0.5)];
        let tags = vec![
            Some("fraug".to_string()),
            Some("fraug".to_string()),
            Some("fedavg".to_string()),
            Some("fedavg".to_string()),
        ];
        let series = accuracy_series(&rows, &tags).unwrap();
        assert_eq!(series.len(), 2);
        let svg = render_svg(&series).unwrap();
        assert!(svg.contains(">fraug<"));
        assert!(svg.contains(">fedavg<"));
        let sidecar = render_sidecar(&series);
        // header + rounds x strategies
        assert_eq!(sidecar.lines().count(), 1 + 4);
    }

    #[test]
    fn rows_average_over_clients() {
        let mut rows = vec![row(1, 0.2)];
        rows.push(MetricRow {
            client: 1,
            value: 0.4,
            ..row(1, 0.0)
        });
        let series = accuracy_series(&rows, &[None, None]).unwrap();
        assert!((series[0].points[0].1 - 30.0).abs() < 1e-9);
    }
}
