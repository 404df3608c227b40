//! Self-contained SVG line charts of a training metrics CSV.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, WithPath};
use crate::run::{require, resolve, RunDir};

#[derive(Args, Serialize)]
pub struct PlotArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// metrics.csv written by pretrain or finetune.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Output directory; the chart is written to plot.svg inside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlotConfig {
    pub metrics: PathBuf,
    pub out: PathBuf,
}

const LOSSES: [&str; 3] = ["loss_av", "loss_a", "loss_v"];
const WEIGHTS: [&str; 2] = ["w_a", "w_v"];
const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 240.0;
const LEFT: f64 = 70.0;
const TOP: f64 = 30.0;

/// One numeric column; empty cells are `None`.
struct Column {
    name: &'static str,
    values: Vec<Option<f64>>,
}

fn read_columns(path: &std::path::Path) -> CliResult<(Vec<f64>, Vec<Column>)> {
    let mut reader = csv::Reader::from_path(path).at(path)?;
    let header = reader.headers().at(path)?.clone();
    let index = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::data(format!("{}: missing column `{name}`", path.display())))
    };
    let step_idx = index("step")?;
    let wanted: Vec<(&'static str, usize)> =
        LOSSES.iter().chain(&WEIGHTS).map(|&n| index(n).map(|i| (n, i))).collect::<CliResult<_>>()?;
    let mut steps = Vec::new();
    let mut columns: Vec<Column> = wanted.iter().map(|&(name, _)| Column { name, values: Vec::new() }).collect();
    for (row, record) in reader.records().enumerate() {
        let record = record.at(path)?;
        let line = row + 2;
        let parse = |i: usize, name: &str| -> CliResult<Option<f64>> {
            let cell = record.get(i).unwrap_or("").trim();
            if cell.is_empty() {
                return Ok(None);
            }
            cell.parse::<f64>()
                .map(Some)
                .map_err(|_| CliError::data(format!("{}: line {line}: `{cell}` in column `{name}` is not a number", path.display())))
        };
        let step = parse(step_idx, "step")?
            .ok_or_else(|| CliError::data(format!("{}: line {line}: empty step", path.display())))?;
        steps.push(step);
        for (col, &(name, i)) in columns.iter_mut().zip(&wanted) {
            col.values.push(parse(i, name)?);
        }
    }
    if steps.is_empty() {
        return Err(CliError::data(format!("{}: no metric rows", path.display())));
    }
    Ok((steps, columns))
}

fn range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

fn scale(v: f64, lo: f64, hi: f64, px: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo) * px
    } else {
        px / 2.0
    }
}

fn chart(svg: &mut String, id: &str, title: &str, offset: f64, steps: &[f64], columns: &[&Column]) {
    let (x_lo, x_hi) = range(steps.iter().copied()).unwrap_or((0.0, 0.0));
    let y = range(columns.iter().flat_map(|c| c.values.iter().flatten().copied()));
    let (y_lo, y_hi) = y.unwrap_or((0.0, 0.0));
    let top = offset + TOP;
    let _ = writeln!(
        svg,
        r#"<g class="chart" id="{id}" data-x-min="{x_lo}" data-x-max="{x_hi}" data-y-min="{y_lo}" data-y-max="{y_hi}" data-left="{LEFT}" data-top="{top}" data-width="{WIDTH}" data-height="{HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<text x="{LEFT}" y="{}" font-size="14">{title}</text>"#, top - 10.0);
    let _ = writeln!(svg, r##"<rect x="{LEFT}" y="{top}" width="{WIDTH}" height="{HEIGHT}" fill="none" stroke="#444"/>"##);
    let bottom = top + HEIGHT;
    let _ = writeln!(svg, r#"<text class="x-min" x="{LEFT}" y="{}" font-size="11">{x_lo}</text>"#, bottom + 14.0);
    let _ = writeln!(svg, r#"<text class="x-max" x="{}" y="{}" font-size="11" text-anchor="end">{x_hi}</text>"#, LEFT + WIDTH, bottom + 14.0);
    let _ = writeln!(svg, r#"<text class="y-min" x="{}" y="{bottom}" font-size="11" text-anchor="end">{y_lo}</text>"#, LEFT - 4.0);
    let _ = writeln!(svg, r#"<text class="y-max" x="{}" y="{}" font-size="11" text-anchor="end">{y_hi}</text>"#, LEFT - 4.0, top + 10.0);
    if y.is_none() {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12">no data</text>"#, LEFT + 10.0, top + 30.0);
    }
    for (k, col) in columns.iter().enumerate() {
        let points: Vec<String> = steps
            .iter()
            .zip(&col.values)
            .filter_map(|(&x, v)| v.filter(|v| v.is_finite()).map(|v| (x, v)))
            .map(|(x, v)| {
                let px = LEFT + scale(x, x_lo, x_hi, WIDTH);
                let py = bottom - scale(v, y_lo, y_hi, HEIGHT);
                format!("{px:.3},{py:.3}")
            })
            .collect();
        if points.is_empty() {
            continue;
        }
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-column="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            col.name,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            LEFT + WIDTH + 10.0,
            top + 16.0 * (k as f64 + 1.0),
            col.name
        );
    }
    svg.push_str("</g>\n");
}

fn render(steps: &[f64], columns: &[Column]) -> String {
    let by_name = |names: &[&str]| -> Vec<&Column> { columns.iter().filter(|c| names.contains(&c.name)).collect() };
    let total_h = 2.0 * (HEIGHT + TOP + 40.0);
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{total_h}" viewBox="0 0 {w} {total_h}">"#,
        w = LEFT + WIDTH + 90.0
    );
    svg.push('\n');
    chart(&mut svg, "losses", "caption losses (nats)", 0.0, steps, &by_name(&LOSSES));
    chart(&mut svg, "weights", "MBP weights", HEIGHT + TOP + 40.0, steps, &by_name(&WEIGHTS));
    svg.push_str("</svg>\n");
    svg
}

pub fn run(args: PlotArgs) -> CliResult<()> {
    let cfg: PlotConfig = resolve(&args)?;
    require(&cfg.metrics, "metrics")?;
    let dir = RunDir::create(&cfg.out, "plot", &cfg)?;
    let (steps, columns) = read_columns(&cfg.metrics)?;
    dir.write("plot.svg", render(&steps, &columns).as_bytes())?;
    println!("plotted {} rows to {}", steps.len(), dir.file("plot.svg").display());
    dir.finish()
}
