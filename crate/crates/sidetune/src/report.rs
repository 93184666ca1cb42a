//! Report emission: human-readable tables, machine-readable JSON records,
//! and the sweep trend plot as a standalone SVG.

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::{EpochRecord, EvalReport, SweepRow};

/// Table-style rendering: overall accuracy followed by one column per
/// class, mirroring the per-class accuracy presentation.
pub fn render_eval_table(report: &EvalReport, class_names: &[String]) -> String {
    let mut header = vec!["OA".to_string()];
    let mut values = vec![format!("{:.1}%", 100.0 * report.overall_accuracy)];
    for (i, name) in class_names.iter().enumerate() {
        header.push(name.clone());
        let cell = match report.per_class_accuracy.get(i).copied().flatten() {
            Some(acc) => format!("{:.1}%", 100.0 * acc),
            None => "-".to_string(),
        };
        values.push(cell);
    }
    let widths: Vec<usize> = header
        .iter()
        .zip(values.iter())
        .map(|(h, v)| h.len().max(v.len()))
        .collect();
    let mut out = String::new();
    for (h, w) in header.iter().zip(widths.iter()) {
        out.push_str(&format!("{h:>width$}  ", width = w));
    }
    out.push('\n');
    for (v, w) in values.iter().zip(widths.iter()) {
        out.push_str(&format!("{v:>width$}  ", width = w));
    }
    out.push('\n');
    out
}

/// One JSON record per line.
pub fn write_history_jsonl(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut body = String::new();
    for record in history {
        body.push_str(&serde_json::to_string(record).expect("record serializes"));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Sweep table: one row per configuration with the blend, the dense-layer
/// variant, and accuracies.
pub fn render_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("config  alphas            fc     val_acc  test_acc\n");
    for (i, row) in rows.iter().enumerate() {
        let alphas = row
            .job
            .alphas
            .iter()
            .map(|a| format!("{a:.2}"))
            .collect::<Vec<_>>()
            .join(",");
        let fc = row
            .job
            .fc_width
            .map_or("none".to_string(), |w| w.to_string());
        let val = row
            .best_val_accuracy
            .map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
        out.push_str(&format!(
            "{i:>6}  [{alphas}]  {fc:>5}  {val:>7}  {:>7.1}%\n",
            100.0 * row.test_accuracy
        ));
    }
    out
}

/// Tab-separated sweep data underlying the plot.
pub fn render_sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("index\talpha0\talpha1\talpha2\tfc\ttest_accuracy\n");
    for (i, row) in rows.iter().enumerate() {
        let a = &row.job.alphas;
        out.push_str(&format!(
            "{i}\t{}\t{}\t{}\t{}\t{}\n",
            a.first().unwrap_or(&0.0),
            a.get(1).unwrap_or(&0.0),
            a.get(2).unwrap_or(&0.0),
            row.job.fc_width.map_or("none".to_string(), |w| w.to_string()),
            row.test_accuracy
        ));
    }
    out
}

/// Accuracy-versus-configuration line plot, one polyline per dense-layer
/// variant, alpha configurations on the x axis in sweep order.
pub fn sweep_plot_svg(rows: &[SweepRow], title: &str) -> String {
    const W: f64 = 720.0;
    const H: f64 = 460.0;
    const ML: f64 = 64.0;
    const MR: f64 = 24.0;
    const MT: f64 = 40.0;
    const MB: f64 = 96.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

    // Group rows by fc variant, preserving the sweep's configuration order.
    let mut variants: Vec<Option<usize>> = Vec::new();
    for row in rows {
        if !variants.contains(&row.job.fc_width) {
            variants.push(row.job.fc_width);
        }
    }
    let mut configs: Vec<&Vec<f64>> = Vec::new();
    for row in rows {
        if !configs.contains(&&row.job.alphas) {
            configs.push(&row.job.alphas);
        }
    }
    let n = configs.len().max(1);

    let ys: Vec<f64> = rows.iter().map(|r| r.test_accuracy).collect();
    let y_min = ys.iter().cloned().fold(1.0f64, f64::min).min(0.99);
    let y_max = ys.iter().cloned().fold(0.0f64, f64::max).max(y_min + 1e-3);
    let pad = 0.05 * (y_max - y_min);
    let (y_lo, y_hi) = ((y_min - pad).max(0.0), (y_max + pad).min(1.0));

    let x_at = |i: usize| ML + (W - ML - MR) * (i as f64 + 0.5) / n as f64;
    let y_at = |v: f64| MT + (H - MT - MB) * (1.0 - (v - y_lo) / (y_hi - y_lo));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        title
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    // Y ticks.
    for t in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * t as f64 / 4.0;
        let y = y_at(v);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{ML}\" y2=\"{y}\" stroke=\"black\"/>\n",
            ML - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{:.1}%</text>\n",
            ML - 8.0,
            y + 4.0,
            100.0 * v
        ));
    }
    // X tick labels: the alpha triples.
    for (i, alphas) in configs.iter().enumerate() {
        let label = alphas
            .iter()
            .map(|a| format!("{a:.1}"))
            .collect::<Vec<_>>()
            .join("/");
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\" transform=\"rotate(-45 {} {})\">{}</text>\n",
            x_at(i),
            H - MB + 14.0,
            x_at(i),
            H - MB + 14.0,
            label
        ));
    }
    // One polyline per variant.
    for (vi, variant) in variants.iter().enumerate() {
        let color = colors[vi % colors.len()];
        let mut points = Vec::new();
        for (ci, cfg) in configs.iter().enumerate() {
            if let Some(row) = rows
                .iter()
                .find(|r| r.job.fc_width == *variant && &r.job.alphas == *cfg)
            {
                points.push(format!("{},{}", x_at(ci), y_at(row.test_accuracy)));
            }
        }
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        for p in &points {
            let mut it = p.split(',');
            let x: f64 = it.next().unwrap().parse().unwrap();
            let y: f64 = it.next().unwrap().parse().unwrap();
            svg.push_str(&format!(
                "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
        let label = variant.map_or("no fc".to_string(), |w| format!("fc {w}"));
        let lx = W - MR - 110.0;
        let ly = MT + 18.0 * vi as f64;
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 22.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            lx + 28.0,
            ly + 4.0,
            label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
