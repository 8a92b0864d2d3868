//! Static trend charts: a median line over a shaded 95% band, with dots for
//! observed values.

use std::fmt::Write;

pub struct Series<'a> {
    pub title: &'a str,
    pub years: &'a [i32],
    pub median: &'a [f64],
    pub lo: &'a [f64],
    pub hi: &'a [f64],
    /// Observed risk per year, where data exist.
    pub observed: &'a [Option<f64>],
}

const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(series: &Series, width: u32, height: u32) -> String {
    let (w, h) = (width as f64, height as f64);
    let n = series.years.len();
    let values = series
        .lo
        .iter()
        .chain(series.hi)
        .chain(series.median)
        .chain(series.observed.iter().flatten())
        .copied()
        .filter(|v| v.is_finite());
    let (mut y_min, mut y_max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !y_min.is_finite() {
        (y_min, y_max) = (0.0, 1.0);
    }
    let pad = ((y_max - y_min) * 0.05).max(y_max.abs() * 1e-3).max(1e-12);
    y_min = (y_min - pad).max(0.0);
    y_max += pad;

    let x_of = |i: usize| {
        if n <= 1 {
            LEFT + (w - LEFT - RIGHT) / 2.0
        } else {
            LEFT + (w - LEFT - RIGHT) * i as f64 / (n - 1) as f64
        }
    };
    let y_of = |v: f64| TOP + (h - TOP - BOTTOM) * (1.0 - (v - y_min) / (y_max - y_min));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(series.title)
    );
    let (x0, x1, y0, y1) = (LEFT, w - RIGHT, TOP, h - BOTTOM);
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="{y1:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="black"/>"#
    );
    for (i, year) in series.years.iter().enumerate() {
        let x = x_of(i);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{year}</text>"#,
            y1 + 16.0
        );
    }
    for k in 0..=4 {
        let v = y_min + (y_max - y_min) * k as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/>"#,
            x0 - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3e}</text>"#,
            x0 - 6.0,
            y + 4.0
        );
    }

    let mut band: Vec<String> = (0..n)
        .map(|i| format!("{:.2},{:.2}", x_of(i), y_of(series.hi[i])))
        .collect();
    band.extend(
        (0..n)
            .rev()
            .map(|i| format!("{:.2},{:.2}", x_of(i), y_of(series.lo[i]))),
    );
    let _ = writeln!(
        s,
        r##"<polygon class="band" points="{}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>"##,
        band.join(" ")
    );
    let d: Vec<String> = (0..n)
        .map(|i| {
            format!(
                "{}{:.2},{:.2}",
                if i == 0 { "M" } else { "L" },
                x_of(i),
                y_of(series.median[i])
            )
        })
        .collect();
    let _ = writeln!(
        s,
        r##"<path class="median" d="{}" fill="none" stroke="#08519c" stroke-width="2"/>"##,
        d.join(" ")
    );
    for (i, obs) in series.observed.iter().enumerate() {
        if let Some(v) = obs {
            let _ = writeln!(
                s,
                r#"<circle class="observed" cx="{:.2}" cy="{:.2}" r="3.5" fill="black"/>"#,
                x_of(i),
                y_of(*v)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr<'a>(svg: &'a str, element: &str, name: &str) -> &'a str {
        let start = svg.find(&format!("<{element} ")).unwrap();
        let tail = &svg[start..];
        let key = format!(" {name}=\"");
        let a = tail.find(&key).unwrap() + key.len();
        let b = tail[a..].find('"').unwrap();
        &tail[a..a + b]
    }

    fn pairs(s: &str) -> Vec<(f64, f64)> {
        s.split([' ', 'M', 'L'])
            .filter(|p| !p.is_empty())
            .map(|p| {
                let (x, y) = p.split_once(',').unwrap();
                (x.parse().unwrap(), y.parse().unwrap())
            })
            .collect()
    }

    fn example(observed: &[Option<f64>]) -> String {
        let years: Vec<i32> = (2014..2022).collect();
        let median: Vec<f64> = (0..8).map(|i| 0.01 + 0.001 * i as f64).collect();
        let lo: Vec<f64> = median.iter().map(|m| m * 0.8).collect();
        let hi: Vec<f64> = median.iter().map(|m| m * 1.3).collect();
        render(
            &Series {
                title: "S1 <risk>",
                years: &years,
                median: &median,
                lo: &lo,
                hi: &hi,
                observed,
            },
            640,
            400,
        )
    }

    #[test]
    fn one_path_one_band_and_markers_only_for_data() {
        let obs: Vec<Option<f64>> = (0..8).map(|i| (i < 6).then_some(0.011)).collect();
        let svg = example(&obs);
        assert_eq!(svg.matches("<path").count(), 1);
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert_eq!(svg.matches("<circle").count(), 6);
        assert!(svg.contains("S1 &lt;risk&gt;"));
        assert_eq!(example(&[None; 8]).matches("<circle").count(), 0);
    }

    #[test]
    fn band_brackets_the_median() {
        let svg = example(&[None; 8]);
        let line = pairs(attr(&svg, "path", "d"));
        let band = pairs(attr(&svg, "polygon", "points"));
        assert_eq!(line.len(), 8);
        assert_eq!(band.len(), 16);
        for (i, &(x, y)) in line.iter().enumerate() {
            let upper = band[i];
            let lower = band[15 - i];
            assert_eq!(upper.0, x);
            assert_eq!(lower.0, x);
            // screen y grows downward
            assert!(upper.1 <= y && y <= lower.1);
        }
    }
}
