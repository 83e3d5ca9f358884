//! Results tables: CSV input and output, grouped means and a plain SVG chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiment::ResultRow;

/// Writes rows with a header, in the given order.
pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads rows by column name, so column order does not matter. `param`
/// and `value` may be absent.
pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()
        .map_err(|e| csv_error(path, e))?;
    if rows.is_empty() {
        return Err(Error::EmptySet("input CSV"));
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        kind => Error::Parse {
            offset,
            message: format!("{}: {kind:?}", path.display()),
        },
    }
}

/// Mean over seeds of one (method, target, param, value) group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMean {
    pub method: String,
    pub target: String,
    pub param: String,
    pub value: String,
    pub runs: usize,
    pub accuracy: f64,
    pub shift_rate: f64,
    pub source_accuracy: f64,
    pub source_shift_rate: f64,
}

/// Groups keep the order of first appearance.
pub fn group_means(rows: &[ResultRow]) -> Vec<GroupMean> {
    let mut order: Vec<(String, String, String, String)> = Vec::new();
    let mut acc: BTreeMap<(String, String, String, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.method.clone(),
            r.target.clone(),
            r.param.clone(),
            r.value.clone(),
        );
        let slot = acc.entry(key.clone()).or_default();
        if slot.is_empty() {
            order.push(key);
        }
        slot.push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &acc[&key];
            let n = g.len() as f64;
            let mean = |f: fn(&ResultRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            GroupMean {
                runs: g.len(),
                accuracy: mean(|r| r.accuracy),
                shift_rate: mean(|r| r.shift_rate),
                source_accuracy: mean(|r| r.source_accuracy),
                source_shift_rate: mean(|r| r.source_shift_rate),
                method: key.0,
                target: key.1,
                param: key.2,
                value: key.3,
            }
        })
        .collect()
}

pub fn write_groups(path: &Path, groups: &[GroupMean]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for g in groups {
        w.serialize(g).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// `(x, accuracy, shift rate)` of one plotted group.
type Point = (f64, f64, f64);

/// Accuracy (solid) and shift rate (dashed) per (method, target) series.
/// The x axis is the swept value when every value is numeric, otherwise
/// the group's position among the distinct values.
pub fn render_svg(groups: &[GroupMean]) -> String {
    let numeric: Option<Vec<f64>> = groups.iter().map(|g| g.value.parse::<f64>().ok()).collect();
    let mut labels: Vec<&str> = Vec::new();
    for g in groups {
        if !labels.contains(&g.value.as_str()) {
            labels.push(&g.value);
        }
    }
    let xs: Vec<f64> = match &numeric {
        Some(v) => v.clone(),
        None => groups
            .iter()
            .map(|g| labels.iter().position(|l| *l == g.value).unwrap_or(0) as f64)
            .collect(),
    };
    let (mut lo, mut hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - lo) / (hi - lo) * pw;
    let py = |y: f64| TOP + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y:.1}</text>"##,
            LEFT + pw,
            py(y),
            py(y),
            LEFT - 6.0,
            py(y) + 4.0
        );
    }
    let ticks: Vec<(f64, String)> = match &numeric {
        Some(v) => {
            let mut t: Vec<f64> = v.clone();
            t.sort_by(f64::total_cmp);
            t.dedup();
            t.into_iter().map(|x| (x, fmt_num(x))).collect()
        }
        None => labels
            .iter()
            .enumerate()
            .map(|(i, l)| (i as f64, l.to_string()))
            .collect(),
    };
    for (x, text) in &ticks {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(*x),
            TOP + ph + 16.0,
            escape(text)
        );
    }
    let param = groups
        .iter()
        .map(|g| g.param.as_str())
        .find(|p| !p.is_empty())
        .unwrap_or("");
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 10.0,
        escape(param)
    );

    let mut series: Vec<(String, Vec<Point>)> = Vec::new();
    for (g, &x) in groups.iter().zip(&xs) {
        let name = if g.target.is_empty() {
            g.method.clone()
        } else {
            format!("{} / {}", g.method, g.target)
        };
        let point = (x, g.accuracy, g.shift_rate);
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push(point),
            None => series.push((name, vec![point])),
        }
    }
    for (i, (name, pts)) in series.iter_mut().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = COLORS[i % COLORS.len()];
        for (dash, pick) in [("", 1usize), (r#" stroke-dasharray="4 3""#, 2)] {
            let coords: Vec<String> = pts
                .iter()
                .map(|p| {
                    let y = if pick == 1 { p.1 } else { p.2 };
                    format!("{:.1},{:.1}", px(p.0), py(y))
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                coords.join(" ")
            );
            for c in &coords {
                let (cx, cy) = c.split_once(',').unwrap_or(("0", "0"));
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>"#);
            }
        }
        let ly = TOP + 14.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" x2="{:.1}" y1="{ly:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 16.0,
            lx + 20.0,
            ly + 4.0,
            escape(name)
        );
    }
    let ly = TOP + 14.0 * series.len() as f64 + 8.0;
    let lx = LEFT + pw + 12.0;
    let _ = writeln!(
        s,
        r#"<text x="{lx}" y="{ly:.1}">solid: accuracy</text><text x="{lx}" y="{:.1}">dashed: shift rate</text>"#,
        ly + 14.0
    );
    s.push_str("</svg>\n");
    s
}

fn fmt_num(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e9 {
        format!("{x:.0}")
    } else {
        format!("{x}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, value: &str, acc: f64) -> ResultRow {
        ResultRow {
            method: method.into(),
            target: "t".into(),
            seed,
            param: if value.is_empty() {
                String::new()
            } else {
                "alpha".into()
            },
            value: value.into(),
            accuracy: acc,
            shift_rate: 0.5,
            source_accuracy: 0.9,
            source_shift_rate: 0.0,
            wall_time: 1.0,
        }
    }

    #[test]
    fn means_per_group_in_first_seen_order() {
        let rows = vec![
            row("TS", 0, "1", 0.2),
            row("Baseline", 0, "1", 0.1),
            row("TS", 1, "1", 0.4),
        ];
        let g = group_means(&rows);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].method, "TS");
        assert_eq!(g[0].runs, 2);
        assert!((g[0].accuracy - 0.3).abs() < 1e-12);
        assert_eq!(g[1].method, "Baseline");
    }

    #[test]
    fn reads_reordered_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(
            &p,
            "accuracy,seed,target,method,shift_rate,source_shift_rate,source_accuracy\n0.5,3,far,TS,1,0,0.9\n",
        )
        .unwrap();
        let rows = read_rows(&p).unwrap();
        assert_eq!(rows[0].method, "TS");
        assert_eq!(rows[0].seed, 3);
        assert_eq!(rows[0].param, "");
    }

    #[test]
    fn empty_csv_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(
            &p,
            "method,target,seed,accuracy,shift_rate,source_accuracy,source_shift_rate\n",
        )
        .unwrap();
        assert!(matches!(read_rows(&p), Err(Error::EmptySet(_))));
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let rows = vec![
            row("TS", 0, "0", 0.2),
            row("TS", 0, "2", 0.6),
            row("TS", 0, "5", 0.4),
        ];
        let svg = render_svg(&group_means(&rows));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
