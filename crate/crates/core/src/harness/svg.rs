//! Hand-built SVG charts: accuracy against log data amount, one colour per
//! model size, and a single dashed line at the human-level threshold.

use std::fmt::Write;

use crate::eval::ProtocolKind;
use crate::scaling::{clamp_pct, predict, CanonicalScalingParams};
use crate::scenarios::HUMAN_LEVEL_PCT;

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 210.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];
const CURVE_SAMPLES: usize = 96;

pub(crate) struct Series {
    pub name: String,
    /// (i in thousands, accuracy %)
    pub points: Vec<(f64, f64)>,
    /// Fitted law and the resolution its curve is drawn at.
    pub law: Option<(CanonicalScalingParams, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn title(protocol: ProtocolKind) -> &'static str {
    match protocol {
        ProtocolKind::NoFinetune => "Accuracy without fine-tuning (linear probe)",
        ProtocolKind::Finetune2Pct => "Accuracy with 2% label fine-tuning",
    }
}

fn tick_label(v: f64) -> String {
    if v >= 1.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.6}");
        s.trim_end_matches('0').to_string()
    }
}

struct Axes {
    lo: f64,
    hi: f64,
}

impl Axes {
    fn x(&self, i: f64) -> f64 {
        LEFT + (i.log10() - self.lo) / (self.hi - self.lo) * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, acc: f64) -> f64 {
        TOP + (100.0 - acc) / 100.0 * (HEIGHT - TOP - BOTTOM)
    }
}

pub(crate) fn render_protocol_chart(protocol: ProtocolKind, series: &[Series]) -> String {
    let all_i: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let (mut lo, mut hi) = all_i
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| {
            (a.min(i.log10()), b.max(i.log10()))
        });
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(0.15);
    let ax = Axes {
        lo: lo - pad,
        hi: hi + pad,
    };
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (ax.y(0.0), ax.y(100.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="28" font-size="15" text-anchor="middle">{} ({protocol})</text>"#,
        (x0 + x1) / 2.0,
        title(protocol)
    );

    // horizontal grid and y ticks
    for k in 0..=5 {
        let acc = 20.0 * k as f64;
        let y = ax.y(acc);
        let _ = writeln!(
            s,
            r##"<path class="grid" d="M{x0:.2} {y:.2}H{x1:.2}" stroke="#e5e5e5"/>"##
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{acc:.0}</text>"#,
            x0 - 6.0,
            y + 4.0
        );
    }
    // x ticks at 1, 2, 5 per decade
    for decade in (ax.lo.floor() as i32)..=(ax.hi.ceil() as i32) {
        for m in [1.0, 2.0, 5.0] {
            let v = m * 10f64.powi(decade);
            let lv = v.log10();
            if lv < ax.lo || lv > ax.hi {
                continue;
            }
            let x = ax.x(v);
            let _ = writeln!(
                s,
                r##"<path class="tick" d="M{x:.2} {y0:.2}v5" stroke="#333"/>"##
            );
            let _ = writeln!(
                s,
                r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                y0 + 18.0,
                tick_label(v)
            );
        }
    }
    let _ = writeln!(
        s,
        r##"<path class="axis" d="M{x0:.2} {y1:.2}V{y0:.2}H{x1:.2}" fill="none" stroke="#333"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">data amount i (thousands of images, log scale)</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(20 {:.2}) rotate(-90)" text-anchor="middle">accuracy (%)</text>"#,
        (y0 + y1) / 2.0
    );

    let yt = ax.y(HUMAN_LEVEL_PCT);
    let _ = writeln!(
        s,
        r##"<line class="threshold" x1="{x0:.2}" y1="{yt:.2}" x2="{x1:.2}" y2="{yt:.2}" stroke="#555" stroke-width="1.5" stroke-dasharray="6 4"/>"##
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.2}" y="{:.2}" text-anchor="end" fill="#555">human level</text>"##,
        x1 - 4.0,
        yt - 6.0
    );

    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(s, r#"<g class="series" data-model="{}">"#, esc(&ser.name));
        if let Some((params, ppi)) = ser.law {
            let mut d = String::new();
            for j in 0..=CURVE_SAMPLES {
                let lv = ax.lo + (ax.hi - ax.lo) * j as f64 / CURVE_SAMPLES as f64;
                let i = 10f64.powf(lv);
                if let Ok(acc) = predict(&params, i, ppi) {
                    let _ = write!(
                        d,
                        "{}{:.2} {:.2}",
                        if d.is_empty() { "M" } else { "L" },
                        ax.x(i),
                        ax.y(clamp_pct(acc))
                    );
                }
            }
            let _ = writeln!(
                s,
                r#"<path class="fit" d="{d}" fill="none" stroke="{color}" stroke-width="2"/>"#
            );
        }
        for &(i, acc) in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}" fill-opacity="0.75"><title>{}: i={i}, {acc:.2}%</title></circle>"#,
                ax.x(i),
                ax.y(clamp_pct(acc)),
                esc(&ser.name)
            );
        }
        let _ = writeln!(s, "</g>");
    }

    // legend
    let lx = x1 + 20.0;
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (k, ser) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let ly = TOP + 10.0 + 34.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.2}" y="{:.2}" width="14" height="14" fill="{color}"/>"#,
            ly - 11.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}">{}</text>"#,
            lx + 20.0,
            esc(&ser.name)
        );
        if let Some((_, ppi)) = ser.law {
            let _ = writeln!(
                s,
                r##"<text x="{:.2}" y="{:.2}" font-size="10" fill="#666">fit drawn at ppi {ppi:.1}</text>"##,
                lx + 20.0,
                ly + 13.0
            );
        }
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}
