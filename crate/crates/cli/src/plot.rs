//! Static SVG figures.

use std::fmt::Write;

use posdiffae::evaluation::Projection;
use posdiffae::training::EpochRecord;

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }

    fn axes(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let _ = write!(
            s,
            r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#333"/>"##,
            W - 2.0 * PAD,
            H - 2.0 * PAD
        );
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{xlabel}</text>"#,
            W / 2.0,
            H - 12.0
        );
        let _ = write!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 14 {})">{ylabel}</text>"#,
            H / 2.0,
            H / 2.0
        );
        for (v, anchor_x) in [(self.x0, PAD), (self.x1, W - PAD)] {
            let _ = write!(
                s,
                r#"<text x="{anchor_x}" y="{}" text-anchor="middle" font-size="10">{v:.3}</text>"#,
                H - PAD + 14.0
            );
        }
        for (v, anchor_y) in [(self.y0, H - PAD), (self.y1, PAD)] {
            let _ = write!(
                s,
                r#"<text x="{}" y="{anchor_y}" text-anchor="end" font-size="10">{v:.3}</text>"#,
                PAD - 4.0
            );
        }
    }
}

fn open() -> String {
    format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}"><rect width="100%" height="100%" fill="white"/>"#)
}

/// Projected latents coloured by region, with each region's 2-sigma ellipse.
pub fn latent_scatter(p: &Projection, regions: &[usize], names: &[String]) -> String {
    let f = Frame::new(p.coords.column(0).to_vec().into_iter(), p.coords.column(1).to_vec().into_iter());
    let mut s = open();
    f.axes(&mut s, "component 1", "component 2");
    for (row, &reg) in p.coords.rows().into_iter().zip(regions) {
        let _ = write!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}" fill-opacity="0.5"/>"#,
            f.px(row[0]),
            f.py(row[1]),
            PALETTE[reg % PALETTE.len()]
        );
    }
    for (i, e) in p.ellipses.iter().enumerate() {
        let colour = PALETTE[e.region % PALETTE.len()];
        // Trace the ellipse as a polygon so unequal axis scales stay exact.
        let pts: Vec<String> = (0..=72)
            .map(|k| {
                let a = k as f64 / 72.0 * std::f64::consts::TAU;
                let (c, sn) = (a.cos() * e.radii[0], a.sin() * e.radii[1]);
                let x = e.center[0] + c * e.axes[0][0] + sn * e.axes[1][0];
                let y = e.center[1] + c * e.axes[0][1] + sn * e.axes[1][1];
                format!("{:.2},{:.2}", f.px(x), f.py(y))
            })
            .collect();
        let dash = if e.degenerate { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = write!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"{dash}/>"#,
            pts.join(" ")
        );
        let name = names.get(e.region).map(String::as_str).unwrap_or("?");
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{name} (n={})</text>"#,
            W - PAD - 150.0,
            PAD + 16.0 + 16.0 * i as f64,
            e.count
        );
    }
    s.push_str("</svg>\n");
    s
}

type Series = (&'static str, fn(&EpochRecord) -> f64);

/// Per-epoch loss terms on a log scale.
pub fn loss_curve(history: &[EpochRecord]) -> String {
    let series: [Series; 4] = [
        ("total", |e| e.total),
        ("l_mse", |e| e.l_mse),
        ("l_r", |e| e.l_r),
        ("l_theta", |e| e.l_theta),
    ];
    let log = |v: f64| v.max(1e-12).log10();
    let all = history.iter().flat_map(|e| series.iter().map(move |(_, g)| log(g(e))));
    let f = Frame::new(history.iter().map(|e| e.epoch as f64), all);
    let mut s = open();
    f.axes(&mut s, "epoch", "log10 loss");
    for (i, (name, get)) in series.iter().enumerate() {
        let pts: Vec<String> = history
            .iter()
            .map(|e| format!("{:.2},{:.2}", f.px(e.epoch as f64), f.py(log(get(e)))))
            .collect();
        let colour = PALETTE[i];
        let _ = write!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{colour}">{name}</text>"#,
            W - PAD - 70.0,
            PAD + 16.0 + 16.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
