//! Aggregation of grid results into mean ± std tables and SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::experiment::ResultRow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model: String,
    pub theta_deg: f64,
    pub trans_px: usize,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Groups by (model, rotation, translation) in first-seen order. Errored
/// rows are dropped.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Summary> {
    let mut groups: Vec<(String, f64, usize, Vec<f64>)> = Vec::new();
    for r in rows.iter().filter(|r| !r.errored()) {
        match groups
            .iter_mut()
            .find(|g| g.0 == r.model && g.1 == r.theta_deg && g.2 == r.trans_px)
        {
            Some(g) => g.3.push(r.test_err),
            None => groups.push((r.model.clone(), r.theta_deg, r.trans_px, vec![r.test_err])),
        }
    }
    groups
        .into_iter()
        .map(|(model, theta_deg, trans_px, errs)| {
            let (mean, std) = mean_std(&errs);
            Summary {
                model,
                theta_deg,
                trans_px,
                n: errs.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, rows: &[Summary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<Summary>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<Summary>, _>>()?)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Test error versus the x-axis augmentation parameter, one line per model,
/// with ±1 std error bars. `by_rotation` picks θ (else translation) as x.
pub fn render_svg(rows: &[Summary], by_rotation: bool) -> Result<String> {
    if rows.is_empty() {
        return Err(config_err("nothing to plot"));
    }
    let xval = |s: &Summary| if by_rotation { s.theta_deg } else { s.trans_px as f64 };
    let (w, h, margin) = (640.0, 420.0, 60.0);
    let xmin = rows.iter().map(xval).fold(f64::INFINITY, f64::min);
    let mut xmax = rows.iter().map(xval).fold(f64::NEG_INFINITY, f64::max);
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    let mut ymax = rows.iter().map(|s| s.mean + s.std).fold(0.0, f64::max);
    if ymax <= 0.0 {
        ymax = 1.0;
    }
    ymax *= 1.1;
    let px = |x: f64| margin + (x - xmin) / (xmax - xmin) * (w - 2.0 * margin);
    let py = |y: f64| h - margin - y / ymax * (h - 2.0 * margin);

    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = margin,
        b = h - margin,
        r = w - margin,
        t = margin
    );
    for i in 0..=4 {
        let y = ymax * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            margin - 6.0,
            py(y) + 4.0,
            y
        );
    }
    let mut xs: Vec<f64> = rows.iter().map(xval).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in &xs {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(*x),
            h - margin + 18.0,
            x
        );
    }
    let xlabel = if by_rotation { "max rotation (deg)" } else { "max translation (px)" };
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xlabel}</text>"#,
        w / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">test error</text>"#,
        h / 2.0,
        h / 2.0
    );

    for (k, model) in models.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut pts: Vec<&Summary> = rows.iter().filter(|r| r.model == *model).collect();
        pts.sort_by(|a, b| xval(a).total_cmp(&xval(b)));
        let path: Vec<String> = pts
            .iter()
            .map(|p| format!("{:.1},{:.1}", px(xval(p)), py(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for p in &pts {
            let (x, lo, hi) = (px(xval(p)), py((p.mean - p.std).max(0.0)), py(p.mean + p.std));
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{lo:.1}" x2="{x:.1}" y2="{hi:.1}" stroke="{color}"/><circle cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                py(p.mean)
            );
        }
        let ly = margin + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - margin - 150.0,
            ly - 9.0,
            w - margin - 135.0,
            ly,
            escape(model)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, theta: f64, seed: u64, err: f64) -> ResultRow {
        ResultRow {
            model: model.into(),
            theta_deg: theta,
            trans_px: 0,
            seed,
            epochs: 1,
            test_err: err,
            train_err: 0.0,
            seconds: 1.0,
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let rows = [row("a", 0.0, 0, 1.0), row("a", 0.0, 1, 2.0), row("a", 0.0, 2, 3.0)];
        let s = aggregate(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].n, s[0].mean, s[0].std), (3, 2.0, 1.0));
    }

    #[test]
    fn single_row_and_errored_rows() {
        let rows = [row("a", 0.0, 0, 0.5), row("b", 0.0, 0, f64::NAN)];
        let s = aggregate(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].mean, s[0].std), (0.5, 0.0));
    }

    #[test]
    fn summary_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = aggregate(&[row("a", 0.0, 0, 0.1), row("a", 60.0, 0, 0.2), row("b", 0.0, 0, 0.3)]);
        write_summary(&p, &s).unwrap();
        assert_eq!(read_summary(&p).unwrap(), s);
    }

    #[test]
    fn svg_is_deterministic() {
        let s = aggregate(&[row("a", 0.0, 0, 0.1), row("a", 60.0, 0, 0.2), row("b<", 0.0, 0, 0.3)]);
        let a = render_svg(&s, true).unwrap();
        assert_eq!(a, render_svg(&s, true).unwrap());
        assert!(a.starts_with("<svg") && a.contains("b&lt;"));
        assert!(render_svg(&[], true).is_err());
    }
}
