//! Static SVG figures. Output depends only on the inputs, so repeated runs
//! give identical files.

use std::fmt::Write as _;

use mmntp_core::metrics::MetricsReport;

use crate::commands::PlanArtifact;
use crate::config::Provenance;

const MODE_COLORS: [&str; 6] = ["#d95f02", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];
const EGO_COLOR: &str = "#1b9e77";
const TV_COLOR: &str = "#d95f02";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps data coordinates into a plot rectangle.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * self.width
    }

    /// Larger values are drawn higher up.
    fn py(&self, y: f64) -> f64 {
        self.top + (self.y.1 - y) / (self.y.1 - self.y.0) * self.height
    }

    fn polyline(&self, pts: impl IntoIterator<Item = (f64, f64)>) -> String {
        let mut s = String::new();
        for (i, (x, y)) in pts.into_iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:.2},{:.2}", self.px(x), self.py(y));
        }
        s
    }
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self { body: String::new(), width, height }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), style: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" {style}/>"#,
            a.0, a.1, b.0, b.1
        );
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="12">{}</text>"#,
            escape(s)
        );
    }

    fn finish(self, title: &str, prov: &Provenance) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
            w = self.width,
            h = self.height
        );
        let _ = writeln!(out, "<metadata>{}</metadata>", escape(&prov.to_line()));
        let _ = writeln!(out, r#"<rect width="{}" height="{}" fill="white"/>"#, self.width, self.height);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
            self.width / 2.0,
            escape(title)
        );
        out.push_str(&self.body);
        out.push_str("</svg>\n");
        out
    }
}

/// Axes with min/max tick labels.
fn axes(svg: &mut Svg, f: &Frame, xlabel: &str, ylabel: &str) {
    let style = r#"stroke="black" stroke-width="1""#;
    let (x0, x1, y0, y1) = (f.left, f.left + f.width, f.top + f.height, f.top);
    svg.line((x0, y0), (x1, y0), style);
    svg.line((x0, y0), (x0, y1), style);
    svg.text(x0, y0 + 16.0, "middle", &format!("{:.3}", f.x.0));
    svg.text(x1, y0 + 16.0, "middle", &format!("{:.3}", f.x.1));
    svg.text(x0 - 6.0, y0, "end", &format!("{:.3}", f.y.0));
    svg.text(x0 - 6.0, y1 + 4.0, "end", &format!("{:.3}", f.y.1));
    svg.text(f.left + f.width / 2.0, y0 + 32.0, "middle", xlabel);
    svg.text(f.left - 6.0, f.top - 8.0, "start", ylabel);
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

/// Road, vehicles, TV modes and the ego's contingency branches at the
/// planning frame.
pub fn plan_svg(a: &PlanArtifact, prov: &Provenance) -> String {
    let origin = a.prediction.origin;
    let mut xs: Vec<f64> = vec![a.ego.position[0], origin[0]];
    for m in &a.prediction.modes {
        xs.extend(m.traj_params.iter().map(|g| origin[0] + g.mu_long));
    }
    for b in &a.plan.states {
        xs.extend(b.iter().map(|s| s[0]));
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min) - 15.0;
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 15.0;
    let (r0, r1) = a.geometry.road_bounds;
    let mut svg = Svg::new(1000.0, 360.0);
    let f = Frame { x: (lo, hi), y: (r0 - 1.0, r1 + 1.0), left: 20.0, top: 40.0, width: 960.0, height: 240.0 };

    let _ = writeln!(
        svg.body,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#eeeeee"/>"##,
        f.px(lo),
        f.py(r1),
        f.px(hi) - f.px(lo),
        f.py(r0) - f.py(r1)
    );
    let marks = &a.geometry.marking_lats;
    for (i, m) in marks.iter().enumerate() {
        let dashed = i > 0 && i + 1 < marks.len();
        let style = if dashed {
            r##"stroke="#888888" stroke-width="1" stroke-dasharray="8,8""##
        } else {
            r##"stroke="#333333" stroke-width="2""##
        };
        svg.line((f.px(lo), f.py(*m)), (f.px(hi), f.py(*m)), style);
    }
    for v in a.vehicles.iter().filter(|v| v.kin.x > lo && v.kin.x < hi) {
        let b = v.aabb();
        let fill = if v.id == a.ego_id {
            EGO_COLOR
        } else if v.id == a.tv_id {
            TV_COLOR
        } else {
            "#999999"
        };
        let _ = writeln!(
            svg.body,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}" stroke="black" stroke-width="0.5"/>"#,
            f.px(b.min[0]),
            f.py(b.max[1]),
            f.px(b.max[0]) - f.px(b.min[0]),
            f.py(b.min[1]) - f.py(b.max[1])
        );
    }
    for (n, m) in a.prediction.modes.iter().enumerate() {
        let pts = std::iter::once((origin[0], origin[1]))
            .chain(m.traj_params.iter().map(|g| (origin[0] + g.mu_long, origin[1] + g.mu_lat)));
        let _ = writeln!(
            svg.body,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="{:.2}" stroke-dasharray="4,3"/>"#,
            f.polyline(pts),
            MODE_COLORS[n % MODE_COLORS.len()],
            1.0 + 3.0 * m.prob
        );
    }
    for (n, b) in a.plan.states.iter().enumerate() {
        let _ = writeln!(
            svg.body,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2" stroke-opacity="{:.3}"/>"#,
            f.polyline(b.iter().map(|s| (s[0], s[1]))),
            EGO_COLOR,
            0.35 + 0.65 * a.plan.probs[n]
        );
    }

    let u0 = a.plan.controls.first().and_then(|c| c.first()).copied().unwrap_or([0.0, 0.0]);
    svg.text(20.0, 310.0, "start", &format!(
        "ego {} (green): {} branches sharing u0 = ({:.3}, {:.3}) m/s^2",
        a.ego_id,
        a.plan.controls.len(),
        u0[0],
        u0[1]
    ));
    let probs: Vec<String> = a.prediction.modes.iter().map(|m| format!("{:.3}", m.prob)).collect();
    svg.text(20.0, 328.0, "start", &format!("target {} (orange): mode probabilities {}", a.tv_id, probs.join(", ")));
    svg.text(20.0, 346.0, "start", &format!(
        "objective {:.4}, KKT residual {:.2e}, {} iterations",
        a.plan.objective, a.plan.kkt_residual, a.plan.iterations
    ));
    svg.finish(&format!("Contingency plan, scene {} frame {}", a.scene_id, a.frame), prov)
}

/// Epoch-mean L_total.
pub fn loss_svg(rows: &[(usize, f64)], prov: &Provenance) -> String {
    let mut svg = Svg::new(640.0, 400.0);
    let (e0, e1) = (rows.first().map_or(0, |r| r.0) as f64, rows.last().map_or(1, |r| r.0) as f64);
    let lmin = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let lmax = rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let f = Frame { x: padded(e0, e1), y: padded(lmin, lmax), left: 80.0, top: 50.0, width: 520.0, height: 290.0 };
    axes(&mut svg, &f, "epoch", "L_total");
    let _ = writeln!(
        svg.body,
        r##"<polyline points="{}" fill="none" stroke="#1b9e77" stroke-width="2"/>"##,
        f.polyline(rows.iter().map(|r| (r.0 as f64, r.1)))
    );
    svg.finish("Training loss", prov)
}

/// minRMSE-K against the prediction horizon, one line per K.
pub fn metrics_svg(r: &MetricsReport, prov: &Provenance) -> String {
    let mut svg = Svg::new(640.0, 400.0);
    let hs = &r.horizons_s;
    let vmax = r.min_rmse.values().flatten().copied().fold(0.0, f64::max);
    let h0 = hs.first().copied().unwrap_or(0.0);
    let h1 = hs.last().copied().unwrap_or(1.0);
    let f = Frame { x: padded(h0, h1), y: (0.0, vmax.max(1e-9) * 1.05), left: 80.0, top: 50.0, width: 440.0, height: 290.0 };
    axes(&mut svg, &f, "horizon (s)", "minRMSE-K (m)");
    for (i, (k, v)) in r.min_rmse.iter().enumerate() {
        let color = MODE_COLORS[i % MODE_COLORS.len()];
        let _ = writeln!(
            svg.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            f.polyline(hs.iter().copied().zip(v.iter().copied()))
        );
        let y = 70.0 + 18.0 * i as f64;
        svg.line((535.0, y - 4.0), (555.0, y - 4.0), &format!(r#"stroke="{color}" stroke-width="2""#));
        svg.text(560.0, y, "start", &format!("K = {k}"));
    }
    svg.finish(&format!("minRMSE-K on {} samples", r.samples), prov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn loss_figure_is_well_formed() {
        let prov = Provenance::new("plot", &[], &RunConfig::default());
        let svg = loss_svg(&[(1, 10.0), (2, 4.0), (3, 3.0)], &prov);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("<metadata>") && svg.contains("polyline"));
        assert!(!svg.contains("NaN"));
        assert_eq!(svg, loss_svg(&[(1, 10.0), (2, 4.0), (3, 3.0)], &prov));
    }

    #[test]
    fn metadata_is_escaped() {
        assert_eq!(escape("a<b & c>"), "a&lt;b &amp; c&gt;");
    }
}
