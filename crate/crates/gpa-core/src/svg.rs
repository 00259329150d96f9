//! Minimal static SVG emitter: scatter points and polylines, nothing else.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#4878d0", "#ee854a", "#6acc64", "#d65f5f", "#956cb4", "#8c613c", "#dc7ec0", "#82c6e2",
];

/// One embedded sample in the projection plot.
#[derive(Debug, Clone, Copy)]
pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub class_id: usize,
    /// Source points render as circles, target points as squares.
    pub source: bool,
}

struct Viewport {
    width: f64,
    height: f64,
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Viewport {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let pad = 40.0;
        let sx = (self.width - 2.0 * pad) / (self.x_max - self.x_min).max(1e-12);
        let sy = (self.height - 2.0 * pad) / (self.y_max - self.y_min).max(1e-12);
        (
            pad + (x - self.x_min) * sx,
            // SVG y grows downward
            self.height - pad - (y - self.y_min) * sy,
        )
    }
}

fn polyline(out: &mut String, pts: &[(f64, f64)], stroke: &str, width: f64) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        out,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{width}\"/>",
        coords.join(" ")
    );
}

/// Render a two-domain scatter. Color encodes class, shape encodes domain.
pub fn scatter_svg(points: &[ScatterPoint], title: &str) -> String {
    let (width, height) = (640.0, 480.0);
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for p in points {
        x_min = x_min.min(p.x);
        x_max = x_max.max(p.x);
        y_min = y_min.min(p.y);
        y_max = y_max.max(p.y);
    }
    if points.is_empty() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    let vp = Viewport {
        width,
        height,
        x_min,
        x_max,
        y_min,
        y_max,
    };

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(
        out,
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{title}</text>",
        width / 2.0
    );
    // axes frame
    let (x0, y0) = vp.map(x_min, y_min);
    let (x1, y1) = vp.map(x_max, y_max);
    polyline(
        &mut out,
        &[(x0, y1), (x0, y0), (x1, y0)],
        "#888888",
        1.0,
    );

    for p in points {
        let (px, py) = vp.map(p.x, p.y);
        let color = PALETTE[p.class_id % PALETTE.len()];
        if p.source {
            let _ = writeln!(
                out,
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.75\"/>"
            );
        } else {
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"5.2\" height=\"5.2\" fill=\"{color}\" fill-opacity=\"0.75\"/>",
                px - 2.6,
                py - 2.6
            );
        }
    }

    // legend: one row per class, circle+square glyphs
    let classes: usize = points
        .iter()
        .map(|p| p.class_id + 1)
        .max()
        .unwrap_or(0);
    for class in 0..classes {
        let y = 40.0 + class as f64 * 18.0;
        let color = PALETTE[class % PALETTE.len()];
        let _ = writeln!(
            out,
            "<circle cx=\"{:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{color}\"/>",
            width - 110.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">class {class}</text>",
            width - 98.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\">circle = source, square = target</text>",
        40.0, 18.0
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emits_wellformed_svg() {
        let points = vec![
            ScatterPoint {
                x: 0.0,
                y: 0.0,
                class_id: 0,
                source: true,
            },
            ScatterPoint {
                x: 1.0,
                y: 2.0,
                class_id: 1,
                source: false,
            },
        ];
        let svg = scatter_svg(&points, "embedding");
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<circle"));
        assert!(svg.contains("<rect"));
        assert!(svg.contains("embedding"));
    }

    #[test]
    fn empty_input_still_renders() {
        let svg = scatter_svg(&[], "empty");
        assert!(svg.contains("</svg>"));
    }
}
