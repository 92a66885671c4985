//! Loss-versus-epoch output for plotting.

use std::fmt::Write as _;

use thm_core::train::{format_sig6, RunRecord};

/// Whitespace-separated columns readable by gnuplot, e.g.
/// `plot "loss.dat" using 1:2 with lines, "" using 1:3 with lines`.
pub fn gnuplot_data(record: &RunRecord) -> String {
    let mut s = String::from("# epoch train_loss valid_loss dev_bleu test_bleu\n");
    s.push_str(&record.to_loss_log());
    s
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Train and validation loss against epoch as a standalone SVG chart.
pub fn svg(record: &RunRecord) -> String {
    let series: [(&str, &str, Vec<f64>); 2] = [
        ("train", "#1f77b4", record.rows.iter().map(|r| r.train_loss).collect()),
        ("valid", "#d62728", record.rows.iter().map(|r| r.valid_loss).collect()),
    ];
    let finite = series.iter().flat_map(|s| s.2.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo.min(0.0), hi.max(lo + 1e-9)) } else { (0.0, 1.0) };
    let n = record.rows.len().max(2);
    let x = |e: usize| MARGIN + (e as f64 - 1.0) / (n as f64 - 1.0) * (W - 2.0 * MARGIN);
    let y = |v: f64| H - MARGIN - (v - lo) / (hi - lo) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<polyline points="{x0},{y1} {x0},{y0} {x1},{y0}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">loss</text>"#, H / 2.0, H / 2.0);
    for (v, anchor_y) in [(lo, y0), (hi, y1)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 4.0, anchor_y + 4.0, format_sig6(v));
    }
    if let Some(last) = record.rows.last() {
        let _ = writeln!(s, r#"<text x="{x0}" y="{}" text-anchor="middle">1</text>"#, y0 + 16.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x(last.epoch), y0 + 16.0, last.epoch);
    }
    for (i, (name, colour, values)) in series.iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(e, &v)| format!("{:.2},{:.2}", x(e + 1), y(v)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, pts.join(" "));
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{colour}">{name}</text>"#, W - MARGIN - 40.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use thm_core::train::EpochRow;

    fn record() -> RunRecord {
        RunRecord {
            rows: (1..=3)
                .map(|e| EpochRow {
                    epoch: e,
                    train_loss: 4.0 / e as f64,
                    valid_loss: 5.0 / e as f64,
                    dev_bleu: 10.0 * e as f64,
                    test_bleu: 9.0 * e as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn data_file_reparses() {
        let r = record();
        let want = RunRecord::from_loss_log(&r.to_loss_log()).unwrap();
        assert_eq!(RunRecord::from_loss_log(&gnuplot_data(&r)).unwrap(), want);
    }

    #[test]
    fn svg_has_one_line_per_series() {
        let s = svg(&record());
        assert!(s.starts_with("<svg"));
        assert_eq!(s.matches("stroke-width=\"2\"").count(), 2);
    }
}
