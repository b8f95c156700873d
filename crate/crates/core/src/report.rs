//! Plot data: validation-perplexity curves and pairwise win/tie/loss bars as
//! CSV, with optional self-contained SVG renderings.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::PairwiseStratum;
use crate::train::MetricRecord;

/// One named curve of `(x, y)` points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub fn valid_curve(name: &str, records: &[MetricRecord]) -> Series {
    Series {
        name: name.to_string(),
        points: records
            .iter()
            .filter_map(|r| match r {
                MetricRecord::Valid { step, valid_ppl } => Some((*step as f64, *valid_ppl)),
                _ => None,
            })
            .collect(),
    }
}

/// Long-format CSV: `series,step,valid_ppl`.
pub fn curves_csv(series: &[Series]) -> String {
    let mut s = String::from("series,step,valid_ppl\n");
    for c in series {
        for (x, y) in &c.points {
            let _ = writeln!(s, "{},{},{}", c.name, x, y);
        }
    }
    s
}

/// Parses `step,value` or `series,step,value` CSV (header and `#` lines skipped).
pub fn parse_curves_csv(text: &str, default_name: &str) -> Result<Vec<Series>> {
    let mut out: Vec<Series> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let (name, x, y) = match cols.as_slice() {
            [x, y] => (default_name, *x, *y),
            [n, x, y] => (*n, *x, *y),
            _ => return Err(Error::Validation(format!("line {}: expected 2 or 3 columns", i + 1))),
        };
        let (Ok(x), Ok(y)) = (x.parse::<f64>(), y.parse::<f64>()) else {
            if out.is_empty() && i == 0 {
                continue; // header
            }
            return Err(Error::Validation(format!("line {}: non-numeric value", i + 1)));
        };
        match out.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((x, y)),
            None => out.push(Series {
                name: name.to_string(),
                points: vec![(x, y)],
            }),
        }
    }
    Ok(out)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line plot with one `<circle>` per data point; `log_y` plots ln(y).
pub fn line_svg(series: &[Series], title: &str, x_label: &str, y_label: &str, log_y: bool) -> String {
    let ty = |y: f64| if log_y { y.ln() } else { y };
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(ty(y));
        y1 = y1.max(ty(y));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (ty(y) - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - PAD, W - PAD, H - PAD);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, esc(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#, H / 2.0, H / 2.0, esc(y_label));
    for (v, anchor, x, y) in [(x0, "start", PAD, H - PAD + 16.0), (x1, "end", W - PAD, H - PAD + 16.0)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v}</text>"#);
    }
    let label_y = |v: f64| if log_y { format!("{:.3}", v.exp()) } else { format!("{v:.3}") };
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 4.0, H - PAD, label_y(y0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, PAD - 4.0, PAD + 4.0, label_y(y1));
    for (i, c) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = c.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        for &(x, y) in &c.points {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, sx(x), sy(y));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, W - PAD - 120.0, PAD + 14.0 * i as f64, esc(&c.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Stacked win/tie/loss bars, one per stratum.
pub fn pairwise_svg(strata: &[PairwiseStratum], name_a: &str, name_b: &str) -> String {
    let shown: Vec<&PairwiseStratum> = strata.iter().filter(|s| s.occurrences > 0).collect();
    let n = shown.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let bar = slot * 0.6;
    let ph = H - 2.0 * PAD;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{} wins / ties / {} wins (%)</text>"#,
        W / 2.0,
        esc(name_a),
        esc(name_b)
    );
    for (i, st) in shown.iter().enumerate() {
        let x = PAD + slot * i as f64 + (slot - bar) / 2.0;
        let mut top = PAD;
        let parts = [
            (st.win_a_pct.unwrap_or(0.0), COLORS[0]),
            (st.tie_pct.unwrap_or(0.0), "#bbbbbb"),
            (st.win_b_pct.unwrap_or(0.0), COLORS[1]),
        ];
        for (pct, color) in parts {
            let h = ph * pct / 100.0;
            let _ = writeln!(s, r#"<rect x="{x:.2}" y="{top:.2}" width="{bar:.2}" height="{h:.2}" fill="{color}"/>"#);
            top += h;
        }
        let _ = writeln!(s, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, x + bar / 2.0, H - PAD + 16.0, esc(&st.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Parses the pairwise CSV written by the compare stage.
pub fn parse_pairwise_csv(text: &str) -> Result<Vec<PairwiseStratum>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 6 {
            return Err(Error::Validation(format!("pairwise CSV row `{line}` needs 6 columns")));
        }
        let pct = |v: &str| -> Result<Option<f64>> {
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| Error::Validation(format!("bad percentage `{v}`")))
            }
        };
        let occurrences: u64 = c[2].parse().map_err(|_| Error::Validation(format!("bad count `{}`", c[2])))?;
        out.push(PairwiseStratum {
            label: c[0].to_string(),
            upper_bound: c[1].parse().ok(),
            occurrences,
            wins_a: 0,
            ties: 0,
            wins_b: 0,
            win_a_pct: pct(c[3])?,
            tie_pct: pct(c[4])?,
            win_b_pct: pct(c[5])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::StepKind;

    #[test]
    fn three_rows_three_circles() {
        let series = parse_curves_csv("step,valid_ppl\n50,120.5\n100,80.25\n150,60\n", "run").unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].points.len(), 3);
        let svg = line_svg(&series, "Validation", "step", "ppl", true);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn curves_from_metrics() {
        let recs = vec![
            MetricRecord::Step {
                step: 0,
                kind: StepKind::Token,
                loss: 1.0,
                lr: 0.1,
            },
            MetricRecord::Valid { step: 1, valid_ppl: 9.0 },
        ];
        let c = valid_curve("base", &recs);
        assert_eq!(c.points, vec![(1.0, 9.0)]);
        let csv = curves_csv(&[c.clone()]);
        assert_eq!(parse_curves_csv(&csv, "x").unwrap(), vec![c]);
    }

    #[test]
    fn pairwise_round_trip() {
        let csv = "# h\nstratum,upper_bound,occurrences,win_a_pct,tie_pct,win_b_pct\n<=20,20,3,66.6,0,33.3\n20-50,50,0,,,\n";
        let rows = parse_pairwise_csv(csv).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].win_a_pct, None);
        let svg = pairwise_svg(&rows, "A", "B");
        assert_eq!(svg.matches("<rect").count(), 1 + 3);
    }
}
