//! Static SVG plots: top-down trajectory overlay, per-frame local-salience
//! heatmap and global-salience scatter.

use std::fmt::Write as _;

use crate::heads::PredictionBundle;
use crate::synthworld::EpisodeRecord;
use crate::types::ScenePointCloud;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 20.0;

/// Maps floor coordinates into the square canvas, y pointing up.
struct TopDown {
    x0: f64,
    y0: f64,
    scale: f64,
}

impl TopDown {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
        Self {
            x0: lo[0],
            y0: lo[1],
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (
            MARGIN + (p[0] - self.x0) * self.scale,
            SIZE - MARGIN - (p[1] - self.y0) * self.scale,
        )
    }
}

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn polyline(s: &mut String, view: &TopDown, pts: &[[f64; 3]], color: &str, dash: bool) {
    let coords: Vec<String> = pts
        .iter()
        .map(|p| {
            let (x, y) = view.map([p[0], p[1]]);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let dash = if dash { " stroke-dasharray=\"6 4\"" } else { "" };
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>",
        coords.join(" ")
    );
}

/// Viridis-like ramp on [0, 1].
fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let stops = [(68.0, 1.0, 84.0), (59.0, 82.0, 139.0), (33.0, 145.0, 140.0), (94.0, 201.0, 98.0), (253.0, 231.0, 37.0)];
    let x = t * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let f = x - i as f64;
    let lerp = |a: f64, b: f64| (a + f * (b - a)).round() as u8;
    let (a, b) = (stops[i], stops[i + 1]);
    format!("#{:02x}{:02x}{:02x}", lerp(a.0, b.0), lerp(a.1, b.1), lerp(a.2, b.2))
}

/// Scene points in gray, observed path (black), ground-truth future (green),
/// predicted future (red, dashed) and gaze points (blue).
pub fn trajectory_svg(scene: &ScenePointCloud, episode: &EpisodeRecord, pred: &PredictionBundle) -> String {
    let observed: Vec<[f64; 3]> = episode.observed.frames.iter().map(|p| (*p.translation()).into()).collect();
    let mut truth = vec![*observed.last().expect("observed frames")];
    truth.extend(episode.future.frames.iter().map(|p| -> [f64; 3] { (*p.translation()).into() }));
    let mut predicted = vec![*observed.last().expect("observed frames")];
    predicted.extend_from_slice(&pred.traj_translation[pred.observed_frames..]);
    let view = TopDown::fit(scene.points.iter().chain(&predicted).map(|p| [p[0], p[1]]));
    let mut s = header(SIZE, SIZE);
    let stride = (scene.len() / 2000).max(1);
    for p in scene.points.iter().step_by(stride) {
        let (x, y) = view.map([p[0], p[1]]);
        let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"1\" fill=\"#bbbbbb\"/>");
    }
    for g in &episode.gaze.points {
        let (x, y) = view.map([g[0], g[1]]);
        let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"#1f77b4\"/>");
    }
    polyline(&mut s, &view, &observed, "#000000", false);
    polyline(&mut s, &view, &truth, "#2ca02c", false);
    polyline(&mut s, &view, &predicted, "#d62728", true);
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"14\" font-family=\"sans-serif\" font-size=\"12\">episode {} ({})</text>",
        episode.id, episode.goal_label
    );
    s.push_str("</svg>\n");
    s
}

/// Frames as rows, scene points binned into at most `bins` columns (bin mean),
/// colors scaled to the maximum. `None` without local salience.
pub fn local_salience_svg(pred: &PredictionBundle, bins: usize) -> Option<String> {
    let rows = &pred.salience.local;
    let n = rows.first()?.len();
    if n == 0 || bins == 0 {
        return None;
    }
    let bins = bins.min(n);
    let binned: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            (0..bins)
                .map(|b| {
                    let (lo, hi) = (b * n / bins, ((b + 1) * n / bins).max(b * n / bins + 1));
                    r[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
                })
                .collect()
        })
        .collect();
    let max = binned.iter().flatten().copied().fold(0.0, f64::max).max(1e-300);
    let (cw, ch) = (4.0, 16.0);
    let (w, h) = (2.0 * MARGIN + cw * bins as f64, 2.0 * MARGIN + ch * rows.len() as f64);
    let mut s = header(w, h);
    for (f, row) in binned.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cw}\" height=\"{ch}\" fill=\"{}\"/>",
                MARGIN + cw * b as f64,
                MARGIN + ch * f as f64,
                ramp(v / max)
            );
        }
    }
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"14\" font-family=\"sans-serif\" font-size=\"12\">local salience (frames × point bins)</text>"
    );
    s.push_str("</svg>\n");
    Some(s)
}

/// Model-resolution scene points top-down, colored by the last block's global
/// salience. `None` without global salience or on a size mismatch.
pub fn global_salience_svg(points: &ScenePointCloud, pred: &PredictionBundle) -> Option<String> {
    let s_g = pred.salience.global.last()?;
    if s_g.len() != points.len() {
        return None;
    }
    let max = s_g.iter().copied().fold(0.0, f64::max).max(1e-300);
    let view = TopDown::fit(points.points.iter().map(|p| [p[0], p[1]]));
    let mut order: Vec<usize> = (0..points.len()).collect();
    // Draw salient points last so they stay visible.
    order.sort_by(|&a, &b| s_g[a].total_cmp(&s_g[b]).then(a.cmp(&b)));
    let mut s = header(SIZE, SIZE);
    for i in order {
        let p = points.points[i];
        let (x, y) = view.map([p[0], p[1]]);
        let _ = writeln!(s, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2\" fill=\"{}\"/>", ramp(s_g[i] / max));
    }
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"14\" font-family=\"sans-serif\" font-size=\"12\">global salience</text>"
    );
    s.push_str("</svg>\n");
    Some(s)
}
