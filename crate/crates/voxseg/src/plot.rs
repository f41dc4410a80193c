//! Accuracy/loss-versus-epoch line charts emitted as SVG 1.1 markup, one
//! polyline per series with a small legend. No rendering dependencies.

use std::fs;
use std::io;
use std::path::Path;

use crate::trainer::EpochLog;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;

pub struct Series<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn axis_bounds(series: &[Series<'_>]) -> (f64, f64, f64, f64) {
    let mut x_max = f64::MIN;
    let mut y_max = f64::MIN;
    let mut x_min = f64::MAX;
    for s in series {
        for &(x, y) in &s.points {
            x_max = x_max.max(x);
            x_min = x_min.min(x);
            y_max = y_max.max(y);
        }
    }
    // Anchor y at zero; pad the top so curves stay inside the frame.
    (x_min, x_max.max(x_min + 1.0), 0.0, (y_max * 1.05).max(1e-9))
}

/// Renders a titled line chart. Every data point becomes one polyline
/// coordinate pair, in input order.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let (x_min, x_max, y_min, y_max) = axis_bounds(series);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let map_x = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * plot_w;
    let map_y = |y: f64| HEIGHT - MARGIN - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    svg.push_str(r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    svg.push('\n');
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>"#,
        WIDTH / 2.0
    ));
    svg.push('\n');

    // Axes.
    svg.push_str(&format!(
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    ));
    svg.push_str(&format!(
        r#"<line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{x_label}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        r#"<text x="16" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 16 {})">{y_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    ));
    svg.push('\n');

    // Y-axis ticks at quarters.
    for i in 0..=4 {
        let y = y_min + (y_max - y_min) * i as f64 / 4.0;
        let py = map_y(y);
        svg.push_str(&format!(
            r#"<line x1="{x0}" y1="{py}" x2="{x1}" y2="{py}" stroke="lightgray" stroke-dasharray="4 4"/><text x="{xt}" y="{yt}" text-anchor="end" font-family="sans-serif" font-size="10">{y:.3}</text>"#,
            x0 = MARGIN,
            x1 = WIDTH - MARGIN,
            xt = MARGIN - 6.0,
            yt = py + 3.0
        ));
        svg.push('\n');
    }

    for (i, s) in series.iter().enumerate() {
        let points: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", map_x(x), map_y(y)))
            .collect();
        svg.push_str(&format!(
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            points.join(" ")
        ));
        svg.push('\n');
        let ly = MARGIN + 16.0 * i as f64;
        svg.push_str(&format!(
            r#"<line x1="{x0}" y1="{ly}" x2="{x1}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{xt}" y="{yt}" font-family="sans-serif" font-size="11">{n}</text>"#,
            x0 = WIDTH - MARGIN - 110.0,
            x1 = WIDTH - MARGIN - 90.0,
            c = s.color,
            xt = WIDTH - MARGIN - 84.0,
            yt = ly + 4.0,
            n = s.name
        ));
        svg.push('\n');
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `accuracy.svg` and `loss.svg` (train + validation series each).
pub fn plot_runlog(epochs: &[EpochLog], out_dir: &Path) -> io::Result<()> {
    fs::create_dir_all(out_dir)?;
    let xs = |f: &dyn Fn(&EpochLog) -> f64| -> Vec<(f64, f64)> {
        epochs.iter().map(|e| (e.epoch as f64, f(e))).collect()
    };
    let accuracy = line_chart(
        "Training and validation accuracy",
        "Epochs",
        "Accuracy",
        &[
            Series {
                name: "train accuracy",
                color: "#1f77b4",
                points: xs(&|e| e.train_acc),
            },
            Series {
                name: "validation accuracy",
                color: "#d62728",
                points: xs(&|e| e.val_acc),
            },
        ],
    );
    fs::write(out_dir.join("accuracy.svg"), accuracy)?;
    let loss = line_chart(
        "Training and validation loss",
        "Epochs",
        "Loss",
        &[
            Series {
                name: "train loss",
                color: "#2ca02c",
                points: xs(&|e| e.train_loss),
            },
            Series {
                name: "validation loss",
                color: "#9467bd",
                points: xs(&|e| e.val_loss),
            },
        ],
    );
    fs::write(out_dir.join("loss.svg"), loss)?;
    Ok(())
}

/// Extracts the coordinate pairs of every polyline in an SVG (test helper
/// for downstream checks; exact inverse of the emitter's format).
pub fn polyline_points(svg: &str) -> Vec<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for part in svg.split("<polyline").skip(1) {
        let Some(start) = part.find("points=\"") else {
            continue;
        };
        let rest = &part[start + 8..];
        let Some(end) = rest.find('"') else {
            continue;
        };
        let coords: Vec<(f64, f64)> = rest[..end]
            .split_whitespace()
            .filter_map(|pair| {
                let (x, y) = pair.split_once(',')?;
                Some((x.parse().ok()?, y.parse().ok()?))
            })
            .collect();
        out.push(coords);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_epochs(n: usize) -> Vec<EpochLog> {
        (1..=n)
            .map(|epoch| EpochLog {
                epoch,
                train_loss: 1.0 / epoch as f64,
                val_loss: 1.2 / epoch as f64,
                train_acc: 1.0 - 1.0 / (epoch + 1) as f64,
                val_acc: 1.0 - 1.3 / (epoch + 1) as f64,
                train_dice: [0.5; 3],
                val_dice: [0.5; 3],
                wall_seconds: 0.0,
            })
            .collect()
    }

    #[test]
    fn every_epoch_becomes_a_polyline_point() {
        let epochs = fake_epochs(50);
        let svg = line_chart(
            "t",
            "x",
            "y",
            &[Series {
                name: "loss",
                color: "red",
                points: epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect(),
            }],
        );
        let lines = polyline_points(&svg);
        // One data polyline plus one legend swatch uses <line>, not polyline.
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].len(), 50);
    }

    #[test]
    fn monotone_loss_gives_monotone_y_coordinates() {
        let epochs = fake_epochs(20);
        let svg = line_chart(
            "t",
            "x",
            "y",
            &[Series {
                name: "loss",
                color: "red",
                points: epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect(),
            }],
        );
        let pts = &polyline_points(&svg)[0];
        // Decreasing loss maps to increasing SVG y (screen-down axis).
        for pair in pts.windows(2) {
            assert!(pair[1].1 >= pair[0].1, "y coordinates must be monotone");
        }
    }

    #[test]
    fn plot_runlog_writes_both_charts() {
        let dir = std::env::temp_dir().join("voxseg_plot_test");
        let _ = fs::remove_dir_all(&dir);
        plot_runlog(&fake_epochs(5), &dir).unwrap();
        let acc = fs::read_to_string(dir.join("accuracy.svg")).unwrap();
        let loss = fs::read_to_string(dir.join("loss.svg")).unwrap();
        assert!(acc.contains("<svg"));
        assert_eq!(polyline_points(&acc).len(), 2, "train and validation series");
        assert_eq!(polyline_points(&loss).len(), 2);
        fs::remove_dir_all(&dir).ok();
    }
}
