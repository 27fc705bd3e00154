//! Hand-rolled SVG line chart for per-horizon error curves; no plotting
//! dependency, CSV stays the canonical output.

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    /// (horizon, value) points in drawing order.
    pub points: Vec<(f64, f64)>,
}

pub fn render_line_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (820.0, 500.0);
    let (ml, mr, mt, mb) = (70.0, 160.0, 50.0, 55.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
    let x_max = xs.iter().cloned().fold(1.0, f64::max);
    let y_max = ys.iter().cloned().fold(0.0, f64::max) * 1.1;
    let y_max = if y_max <= 0.0 { 1.0 } else { y_max };

    let x_of = |x: f64| ml + (x - x_min) / (x_max - x_min).max(1e-9) * plot_w;
    let y_of = |y: f64| mt + plot_h - y / y_max * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"28\" font-family=\"sans-serif\" font-size=\"18\" text-anchor=\"middle\">{}</text>\n",
        ml + plot_w / 2.0,
        xml_escape(title)
    ));

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));

    // X ticks at integer horizons.
    let step = ((x_max - x_min) / 10.0).ceil().max(1.0);
    let mut x = x_min;
    while x <= x_max + 1e-9 {
        let px = x_of(x);
        svg.push_str(&format!(
            "<line x1=\"{px}\" y1=\"{}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n",
            mt + plot_h,
            mt + plot_h + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{x:.0}</text>\n",
            mt + plot_h + 20.0
        ));
        x += step;
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">horizon</text>\n",
        ml + plot_w / 2.0,
        mt + plot_h + 42.0
    ));

    // Y ticks.
    for i in 0..=5 {
        let yv = y_max * i as f64 / 5.0;
        let py = y_of(yv);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{ml}\" y2=\"{py}\" stroke=\"black\"/>\n",
            ml - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"end\">{yv:.2}</text>\n",
            ml - 9.0,
            py + 4.0
        ));
        if i > 0 {
            svg.push_str(&format!(
                "<line x1=\"{ml}\" y1=\"{py}\" x2=\"{}\" y2=\"{py}\" stroke=\"#dddddd\"/>\n",
                ml + plot_w
            ));
        }
    }
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0,
        xml_escape(y_label)
    ));

    // Series lines, markers and legend.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", x_of(x), y_of(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        for &(x, y) in &s.points {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                x_of(x),
                y_of(y)
            ));
        }
        let ly = mt + 14.0 + i as f64 * 20.0;
        let lx = ml + plot_w + 12.0;
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 22.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
            lx + 28.0,
            ly + 4.0,
            xml_escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
