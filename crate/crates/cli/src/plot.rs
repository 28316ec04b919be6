//! Minimal SVG bar charts for metric comparisons.

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One group of bars per metric, one bar per series, on a `[0, max]` axis.
pub fn grouped_bars(metrics: &[String], series: &[(String, Vec<f64>)]) -> String {
    let plot_h = 240.0;
    let bar_w = 14.0;
    let gap = 18.0;
    let left = 50.0;
    let top = 30.0;
    let group_w = bar_w * series.len().max(1) as f64 + gap;
    let width = left + group_w * metrics.len() as f64 + 160.0;
    let height = top + plot_h + 110.0;
    let max = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(1.0_f64, f64::max);
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, max) / max);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    for k in 0..=4 {
        let v = max * k as f64 / 4.0;
        let yy = y(v);
        s.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{yy}\" x2=\"{}\" y2=\"{yy}\" stroke=\"#ddd\"/>\n<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>\n",
            width - 160.0,
            left - 6.0,
            yy + 4.0
        ));
    }
    for (m, name) in metrics.iter().enumerate() {
        let gx = left + gap / 2.0 + group_w * m as f64;
        for (k, (_, values)) in series.iter().enumerate() {
            let v = values.get(m).copied().unwrap_or(0.0);
            let v = if v.is_finite() { v } else { 0.0 };
            let x = gx + bar_w * k as f64;
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"><title>{v}</title></rect>\n",
                y(v),
                bar_w - 2.0,
                top + plot_h - y(v),
                PALETTE[k % PALETTE.len()]
            ));
        }
        let cx = gx + bar_w * series.len() as f64 / 2.0;
        let ly = top + plot_h + 12.0;
        s.push_str(&format!(
            "<text x=\"{cx}\" y=\"{ly}\" text-anchor=\"end\" transform=\"rotate(-45 {cx} {ly})\">{}</text>\n",
            escape(name)
        ));
    }
    let lx = width - 150.0;
    for (k, (name, _)) in series.iter().enumerate() {
        let ly = top + 16.0 * k as f64;
        s.push_str(&format!(
            "<rect x=\"{lx}\" y=\"{ly}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>\n",
            PALETTE[k % PALETTE.len()],
            lx + 14.0,
            ly + 9.0,
            escape(name)
        ));
    }
    s.push_str("</svg>\n");
    s
}
