//! Standalone SVG figures for the two-dimensional experiments.
//!
//! # Coordinate mapping
//!
//! A [`Viewport`] maps data coordinates `(x, y)` in
//! `[x_min, x_max] × [y_min, y_max]` onto a plot area of
//! `plot_w × plot_h` pixels whose top-left corner sits at `(margin, margin)`:
//!
//! ```text
//! px = margin + (x − x_min) / (x_max − x_min) · plot_w
//! py = margin + (y_max − y) / (y_max − y_min) · plot_h
//! ```
//!
//! so `y` grows upwards as in an ordinary plot. Each figure records the
//! mapping in an SVG `<desc>` element.
//!
//! Glyphs: a cross marks the common class, a circle the uncommon class. The
//! analytic equal-density boundary is a dotted black line.

use std::fmt::Write as _;

use crate::analysis::{Classifier, TailLabels, TailLabel};
use crate::data::{boundary_log_ratio, Dataset2D, GaussianSpec, GridSpec};

pub const COMMON_COLOR: &str = "#2e8b57";
pub const UNCOMMON_COLOR: &str = "#7b3fa0";
pub const RARE_COLOR: &str = "#e6b800";
pub const HARD_COLOR: &str = "#d62728";
pub const UNLABELED_COLOR: &str = "#9e9e9e";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub plot_w: f64,
    pub plot_h: f64,
    pub margin: f64,
}

impl Viewport {
    /// Square viewport over a grid's extent.
    pub fn for_grid(grid: GridSpec, size: f64) -> Self {
        Self {
            x_min: grid.min,
            x_max: grid.max,
            y_min: grid.min,
            y_max: grid.max,
            plot_w: size,
            plot_h: size,
            margin: 30.0,
        }
    }

    pub fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.margin + (x - self.x_min) / (self.x_max - self.x_min) * self.plot_w,
            self.margin + (self.y_max - y) / (self.y_max - self.y_min) * self.plot_h,
        )
    }

    pub fn total_w(&self) -> f64 {
        self.plot_w + 2.0 * self.margin
    }

    pub fn total_h(&self) -> f64 {
        self.plot_h + 2.0 * self.margin
    }

    fn describe(&self) -> String {
        format!(
            "px = {m} + (x - {x0}) / {dx} * {w}; py = {m} + ({y1} - y) / {dy} * {h}",
            m = self.margin,
            x0 = self.x_min,
            dx = self.x_max - self.x_min,
            w = self.plot_w,
            y1 = self.y_max,
            dy = self.y_max - self.y_min,
            h = self.plot_h,
        )
    }
}

/// Minimal SVG writer. Elements are appended in drawing order.
#[derive(Debug, Default)]
pub struct Svg {
    body: String,
}

impl Svg {
    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" fill-opacity="{opacity}"/>"#
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r}" fill="none" stroke="{stroke}" stroke-width="0.8"/>"#
        );
    }

    pub fn cross(&mut self, cx: f64, cy: f64, r: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<path d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="{stroke}" stroke-width="0.8"/>"#,
            cx - r,
            cy - r,
            cx + r,
            cy + r,
            cx - r,
            cy + r,
            cx + r,
            cy - r
        );
    }

    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), stroke: &str, dash: Option<&str>) {
        let dash = dash.map(|d| format!(r#" stroke-dasharray="{d}""#)).unwrap_or_default();
        let _ = writeln!(
            self.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{stroke}" stroke-width="1.5"{dash}/>"#,
            a.0, a.1, b.0, b.1
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, content: &str) {
        let escaped = content.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="{size}" text-anchor="middle">{escaped}</text>"#
        );
    }

    /// Embeds `inner` translated by `(dx, dy)`.
    pub fn group(&mut self, dx: f64, dy: f64, inner: &Svg) {
        let _ = writeln!(self.body, r#"<g transform="translate({dx:.2},{dy:.2})">"#);
        self.body.push_str(&inner.body);
        self.body.push_str("</g>\n");
    }

    pub fn finish(&self, width: f64, height: f64, desc: &str) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n<desc>{desc}</desc>\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}

/// Zero level set of the log-density ratio on `grid`, via marching squares.
/// Each segment joins two edge crossings found by linear interpolation.
pub fn boundary_segments(common: &GaussianSpec, uncommon: &GaussianSpec, grid: GridSpec) -> Vec<[[f64; 2]; 2]> {
    let n = grid.n;
    let value: Vec<f64> = (0..n * n)
        .map(|k| boundary_log_ratio([grid.coord(k % n), grid.coord(k / n)], common, uncommon, false))
        .collect();
    let at = |i: usize, j: usize| value[j * n + i];
    let mut segments = Vec::new();
    for j in 0..n.saturating_sub(1) {
        for i in 0..n - 1 {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let mut hits = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (corners[e], corners[(e + 1) % 4]);
                let (va, vb) = (at(a.0, a.1), at(b.0, b.1));
                if (va < 0.0) != (vb < 0.0) {
                    let t = va / (va - vb);
                    let (xa, ya) = (grid.coord(a.0), grid.coord(a.1));
                    let (xb, yb) = (grid.coord(b.0), grid.coord(b.1));
                    hits.push([xa + t * (xb - xa), ya + t * (yb - ya)]);
                }
            }
            for pair in hits.chunks_exact(2) {
                segments.push([pair[0], pair[1]]);
            }
        }
    }
    segments
}

fn draw_boundary(svg: &mut Svg, view: &Viewport, data: &Dataset2D, grid: GridSpec) {
    for [a, b] in boundary_segments(&data.common, &data.uncommon, grid) {
        svg.line(view.to_px(a[0], a[1]), view.to_px(b[0], b[1]), "black", Some("3,2"));
    }
}

fn draw_points(svg: &mut Svg, view: &Viewport, data: &Dataset2D, colors: &dyn Fn(usize) -> &'static str) {
    for (id, (p, &label)) in data.points.iter().zip(&data.labels).enumerate() {
        if p[0] < view.x_min || p[0] > view.x_max || p[1] < view.y_min || p[1] > view.y_max {
            continue;
        }
        let (x, y) = view.to_px(p[0], p[1]);
        if label == data.common.label {
            svg.cross(x, y, 1.6, colors(id));
        } else {
            svg.circle(x, y, 2.0, colors(id));
        }
    }
}

fn draw_frame(svg: &mut Svg, view: &Viewport, title: &str) {
    let (x0, y0) = view.to_px(view.x_min, view.y_max);
    let (x1, y1) = view.to_px(view.x_max, view.y_min);
    for (a, b) in [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))] {
        svg.line(a, b, "#444", None);
    }
    svg.text(view.total_w() / 2.0, view.margin * 0.65, 13.0, title);
}

fn class_color(data: &Dataset2D) -> impl Fn(usize) -> &'static str + '_ {
    move |id| {
        if data.labels[id] == data.common.label {
            COMMON_COLOR
        } else {
            UNCOMMON_COLOR
        }
    }
}

fn draw_predictions<C: Classifier + ?Sized>(svg: &mut Svg, view: &Viewport, classifier: &C, data: &Dataset2D, cells: usize) {
    let dx = (view.x_max - view.x_min) / cells as f64;
    let dy = (view.y_max - view.y_min) / cells as f64;
    for j in 0..cells {
        for i in 0..cells {
            let x = view.x_min + (i as f64 + 0.5) * dx;
            let y = view.y_min + (j as f64 + 0.5) * dy;
            let fill = if classifier.predict(&[x, y]) == data.common.label {
                COMMON_COLOR
            } else {
                UNCOMMON_COLOR
            };
            let (px, py) = view.to_px(x - 0.5 * dx, y + 0.5 * dy);
            svg.rect(px, py, dx / (view.x_max - view.x_min) * view.plot_w + 0.3, dy / (view.y_max - view.y_min) * view.plot_h + 0.3, fill, 0.25);
        }
    }
}

/// Data scatter by class with the analytic boundary.
pub fn scatter_figure(data: &Dataset2D, grid: GridSpec, title: &str) -> String {
    let view = Viewport::for_grid(grid, 480.0);
    let mut svg = Svg::default();
    draw_points(&mut svg, &view, data, &class_color(data));
    draw_boundary(&mut svg, &view, data, grid);
    draw_frame(&mut svg, &view, title);
    svg.finish(view.total_w(), view.total_h(), &view.describe())
}

fn prediction_panel<C: Classifier + ?Sized>(classifier: &C, data: &Dataset2D, grid: GridSpec, title: &str, size: f64) -> (Svg, Viewport) {
    let view = Viewport::for_grid(grid, size);
    let mut svg = Svg::default();
    draw_predictions(&mut svg, &view, classifier, data, 100);
    draw_points(&mut svg, &view, data, &class_color(data));
    draw_boundary(&mut svg, &view, data, grid);
    draw_frame(&mut svg, &view, title);
    (svg, view)
}

/// Predicted class on a cell grid under the data and analytic boundary.
pub fn prediction_figure<C: Classifier + ?Sized>(classifier: &C, data: &Dataset2D, grid: GridSpec, title: &str) -> String {
    let (svg, view) = prediction_panel(classifier, data, grid, title, 480.0);
    svg.finish(view.total_w(), view.total_h(), &view.describe())
}

/// Points coloured by tail label: common green, rare yellow, hard red,
/// unvisited grey.
pub fn tail_label_figure(data: &Dataset2D, labels: &TailLabels, grid: GridSpec, title: &str) -> String {
    let mut color = vec![UNLABELED_COLOR; data.len()];
    for &(id, label) in &labels.labels {
        color[id] = match label {
            TailLabel::Common => COMMON_COLOR,
            TailLabel::Rare => RARE_COLOR,
            TailLabel::Hard => HARD_COLOR,
        };
    }
    let view = Viewport::for_grid(grid, 480.0);
    let mut svg = Svg::default();
    draw_points(&mut svg, &view, data, &|id| color[id]);
    draw_boundary(&mut svg, &view, data, grid);
    draw_frame(&mut svg, &view, title);
    svg.finish(view.total_w(), view.total_h(), &view.describe())
}

/// Points coloured by entropy split: high red, low green, unvisited grey.
pub fn entropy_figure(data: &Dataset2D, high_entropy: &[Option<bool>], grid: GridSpec, title: &str) -> String {
    let view = Viewport::for_grid(grid, 480.0);
    let mut svg = Svg::default();
    draw_points(&mut svg, &view, data, &|id| match high_entropy.get(id).copied().flatten() {
        Some(true) => HARD_COLOR,
        Some(false) => COMMON_COLOR,
        None => UNLABELED_COLOR,
    });
    draw_boundary(&mut svg, &view, data, grid);
    draw_frame(&mut svg, &view, title);
    svg.finish(view.total_w(), view.total_h(), &view.describe())
}

/// One prediction panel per column, titled by the weighting it shows.
pub fn sweep_panel(columns: &[(String, &dyn Classifier)], data: &Dataset2D, grid: GridSpec) -> String {
    let size = 260.0;
    let mut svg = Svg::default();
    let mut view = Viewport::for_grid(grid, size);
    for (k, (title, classifier)) in columns.iter().enumerate() {
        let (panel, v) = prediction_panel(*classifier, data, grid, title, size);
        view = v;
        svg.group(k as f64 * v.total_w(), 0.0, &panel);
    }
    let desc = format!("per panel, offset by panel index times {:.0} px: {}", view.total_w(), view.describe());
    svg.finish(view.total_w() * columns.len().max(1) as f64, view.total_h(), &desc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::FnClassifier;
    use crate::data::gen_toy;

    #[test]
    fn viewport_corners() {
        let v = Viewport::for_grid(GridSpec::evaluation(), 200.0);
        assert_eq!(v.to_px(-4.0, 5.0), (30.0, 30.0));
        assert_eq!(v.to_px(5.0, -4.0), (230.0, 230.0));
        assert!(v.describe().contains("py = 30 + (5 - y) / 9 * 200"));
    }

    #[test]
    fn boundary_segments_lie_on_circle() {
        let (c, u) = (GaussianSpec::common(), GaussianSpec::uncommon());
        let segs = boundary_segments(&c, &u, GridSpec::evaluation());
        assert!(!segs.is_empty());
        let radius = (2.0 * 2f64.ln() + 2.0 * 9.68f64).sqrt();
        let grid_step = 9.0 / 199.0;
        for s in &segs {
            for p in s {
                let r = ((p[0] - 4.4).powi(2) + (p[1] - 4.4).powi(2)).sqrt();
                assert!((r - radius).abs() < grid_step, "{p:?} at radius {r}");
            }
        }
        assert!(boundary_segments(&c, &c, GridSpec::evaluation()).is_empty());
    }

    #[test]
    fn figures_are_wellformed() {
        let data = gen_toy(0);
        let grid = GridSpec::evaluation();
        let scatter = scatter_figure(&data, grid, "toy data");
        assert!(scatter.starts_with("<svg") && scatter.trim_end().ends_with("</svg>"));
        assert!(scatter.contains("<circle") && scatter.contains("<path"));
        assert!(scatter.contains("stroke-dasharray"));
        let majority = FnClassifier(|_: &[f64]| 0);
        let panel = sweep_panel(
            &[("w = 1".to_string(), &majority as &dyn Classifier), ("w = 5".to_string(), &majority)],
            &data,
            grid,
        );
        assert_eq!(panel.matches("<g transform").count(), 2);
        assert!(panel.contains("w = 5"));
    }
}
