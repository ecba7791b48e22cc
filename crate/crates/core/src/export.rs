//! Attention-profile export: a two-column CSV and an SVG bar chart with a
//! dashed uniform-weight reference line at 1/N.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crate::ioutil::atomic_write;

const CHART_WIDTH: f64 = 640.0;
const CHART_HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 56.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 24.0;
const MARGIN_BOTTOM: f64 = 40.0;

/// Write per-slice scores as `slice_index,score` rows.
pub fn write_scores_csv(path: &Path, scores: &[f64]) -> io::Result<()> {
    let mut text = String::from("slice_index,score\n");
    for (i, s) in scores.iter().enumerate() {
        let _ = writeln!(text, "{i},{s}");
    }
    atomic_write(path, text.as_bytes())
}

/// Write per-slice scores as an SVG bar chart. A dashed horizontal line
/// marks the uniform weight 1/N.
pub fn write_scores_svg(path: &Path, scores: &[f64]) -> io::Result<()> {
    let n = scores.len().max(1);
    let uniform = 1.0 / n as f64;
    let peak = scores
        .iter()
        .cloned()
        .fold(uniform, f64::max)
        .max(f64::MIN_POSITIVE);
    let top = peak * 1.15;

    let plot_w = CHART_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = CHART_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let y_of = |v: f64| MARGIN_TOP + plot_h * (1.0 - v / top);
    let slot = plot_w / n as f64;
    let bar_w = (slot * 0.8).max(1.0);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_WIDTH}" height="{CHART_HEIGHT}" viewBox="0 0 {CHART_WIDTH} {CHART_HEIGHT}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{CHART_WIDTH}" height="{CHART_HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="16" font-family="sans-serif" font-size="13" fill="#333">slice attention scores</text>"##,
        MARGIN_LEFT
    );

    for (i, &s) in scores.iter().enumerate() {
        let x = MARGIN_LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
        let y = y_of(s.max(0.0));
        let h = (MARGIN_TOP + plot_h - y).max(0.0);
        let _ = writeln!(
            svg,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{bar_w:.2}" height="{h:.2}" fill="#4878b0"/>"##
        );
    }

    let uy = y_of(uniform);
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN_LEFT:.2}" y1="{uy:.2}" x2="{:.2}" y2="{uy:.2}" stroke="#c03030" stroke-width="1.5" stroke-dasharray="6 4"/>"##,
        MARGIN_LEFT + plot_w
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" fill="#c03030" text-anchor="end">1/{n}</text>"##,
        MARGIN_LEFT + plot_w,
        uy - 4.0
    );

    let axis_y = MARGIN_TOP + plot_h;
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN_LEFT:.2}" y1="{axis_y:.2}" x2="{:.2}" y2="{axis_y:.2}" stroke="#333" stroke-width="1"/>"##,
        MARGIN_LEFT + plot_w
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN_LEFT:.2}" y1="{MARGIN_TOP:.2}" x2="{MARGIN_LEFT:.2}" y2="{axis_y:.2}" stroke="#333" stroke-width="1"/>"##
    );
    let tick_step = if n > 16 { 4 } else { 1 };
    for i in (0..n).step_by(tick_step) {
        let x = MARGIN_LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            svg,
            r##"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="10" fill="#333" text-anchor="middle">{i}</text>"##,
            axis_y + 14.0
        );
    }
    for frac in [0.0, 0.5, 1.0] {
        let v = top * frac;
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" fill="#333" text-anchor="end">{v:.3}</text>"##,
            MARGIN_LEFT - 6.0,
            y_of(v) + 3.0
        );
    }
    let _ = writeln!(svg, "</svg>");
    atomic_write(path, svg.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal well-formedness check: the declaration parses, every opened
    /// tag closes in order, and attribute quoting is balanced per tag.
    fn assert_well_formed_xml(text: &str) {
        let text = text.trim();
        assert!(text.starts_with("<?xml"), "missing declaration");
        let body = &text[text.find("?>").expect("declaration end") + 2..];
        let mut stack: Vec<String> = Vec::new();
        let mut rest = body;
        while let Some(start) = rest.find('<') {
            let after = &rest[start + 1..];
            let end = after.find('>').expect("unterminated tag");
            let tag = &after[..end];
            assert_eq!(tag.matches('"').count() % 2, 0, "unbalanced quotes in <{tag}>");
            if let Some(name) = tag.strip_prefix('/') {
                let open = stack.pop().unwrap_or_else(|| panic!("stray </{name}>"));
                assert_eq!(open, name.trim(), "mismatched close tag");
            } else if !tag.ends_with('/') {
                let name: String = tag
                    .chars()
                    .take_while(|c| !c.is_whitespace())
                    .collect();
                stack.push(name);
            }
            rest = &after[end + 1..];
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn csv_lists_every_slice_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        write_scores_csv(&path, &[0.5, 0.25, 0.25]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "slice_index,score\n0,0.5\n1,0.25\n2,0.25\n");
    }

    #[test]
    fn svg_is_well_formed_and_marks_the_uniform_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.svg");
        let scores: Vec<f64> = (0..32).map(|i| if i == 9 { 0.69 } else { 0.01 }).collect();
        write_scores_svg(&path, &scores).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_well_formed_xml(&text);
        assert_eq!(text.matches("<rect").count(), 33, "32 bars plus background");
        assert!(text.contains("stroke-dasharray"), "no dashed reference line");
        assert!(text.contains("1/32"), "no uniform-weight label");
    }

    #[test]
    fn svg_handles_flat_and_tiny_inputs() {
        let dir = tempfile::tempdir().unwrap();
        for scores in [vec![0.25; 4], vec![1.0]] {
            let path = dir.path().join("flat.svg");
            write_scores_svg(&path, &scores).unwrap();
            let text = std::fs::read_to_string(&path).unwrap();
            assert_well_formed_xml(&text);
        }
    }
}
