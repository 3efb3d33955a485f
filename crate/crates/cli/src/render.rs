// SPDX-License-Identifier: MIT OR Apache-2.0

//! SVG heatmaps of pattern CSVs.
//!
//! Colour map: with `m = max |v|` over the grid and `t = v / m` (`t = 0` when
//! `m = 0`), `t ≥ 0` maps to `rgb(255, 255(1−t), 255(1−t))` and `t < 0` to
//! `rgb(255(1+t), 255(1+t), 255)`, each channel rounded to the nearest
//! integer. Cells absent from the CSV are drawn `#cccccc`. Rows are `op1`,
//! columns are `op2`, both increasing from the top-left corner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use heuristic_forge::{ForgeError, Result};
use serde::{Deserialize, Serialize};

pub const MASKED_FILL: &str = "#cccccc";
const MARGIN: usize = 40;

/// One row of a pattern CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub layer: usize,
    pub neuron: usize,
    pub operator: String,
    pub op1: usize,
    pub op2: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub layer: usize,
    pub neuron: usize,
    pub operator: String,
    /// Rows and columns span `0..side`.
    pub side: usize,
    pub cells: BTreeMap<(usize, usize), f64>,
}

fn parse_error(source: &str, detail: String) -> ForgeError {
    ForgeError::Parse {
        source_name: source.to_string(),
        detail,
    }
}

/// Parse a pattern CSV; `#` lines are skipped.
pub fn parse_pattern(text: &str, source: &str) -> Result<Heatmap> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<PatternRow>().enumerate() {
        let row = rec.map_err(|e| parse_error(source, format!("row {}: {e}", i + 1)))?;
        if !row.value.is_finite() {
            return Err(parse_error(source, format!("row {}: value is not finite", i + 1)));
        }
        rows.push(row);
    }
    let Some(first) = rows.first() else {
        return Err(parse_error(source, "grid is empty".into()));
    };
    let (layer, neuron, operator) = (first.layer, first.neuron, first.operator.clone());
    let mut cells = BTreeMap::new();
    let mut side = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.layer != layer || r.neuron != neuron || r.operator != operator {
            return Err(parse_error(source, format!("row {}: rows describe more than one neuron", i + 1)));
        }
        if cells.insert((r.op1, r.op2), r.value).is_some() {
            return Err(parse_error(source, format!("row {}: duplicate cell ({}, {})", i + 1, r.op1, r.op2)));
        }
        side = side.max(r.op1 + 1).max(r.op2 + 1);
    }
    Ok(Heatmap {
        layer,
        neuron,
        operator,
        side,
        cells,
    })
}

/// Colour of `v` under the scale `max_abs`.
pub fn color(v: f64, max_abs: f64) -> (u8, u8, u8) {
    let t = if max_abs > 0.0 { (v / max_abs).clamp(-1.0, 1.0) } else { 0.0 };
    let c = |x: f64| (255.0 * x).round() as u8;
    if t >= 0.0 {
        (255, c(1.0 - t), c(1.0 - t))
    } else {
        (c(1.0 + t), c(1.0 + t), 255)
    }
}

fn cell_size(side: usize) -> usize {
    (404 / side.max(1)).clamp(4, 60)
}

pub fn render_svg(map: &Heatmap) -> String {
    let cell = cell_size(map.side);
    let extent = cell * map.side;
    let (w, h) = (extent + 2 * MARGIN, extent + 2 * MARGIN);
    let max_abs = map.cells.values().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">L{} N{} {}</text>"#,
        w / 2,
        map.layer,
        map.neuron,
        xml_escape(&map.operator)
    );
    for op1 in 0..map.side {
        for op2 in 0..map.side {
            let fill = match map.cells.get(&(op1, op2)) {
                Some(&v) => {
                    let (r, g, b) = color(v, max_abs);
                    format!("rgb({r},{g},{b})")
                }
                None => MASKED_FILL.to_string(),
            };
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="{fill}"/>"#,
                MARGIN + op2 * cell,
                MARGIN + op1 * cell
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">op2</text>"#,
        w / 2,
        h - 12
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">op1</text>"#,
        h / 2,
        h / 2
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render one pattern file to `out`.
pub fn render_file(input: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)?;
    let map = parse_pattern(&text, &input.display().to_string())?;
    crate::report::ensure_parent(out)?;
    std::fs::write(out, render_svg(&map))?;
    Ok(())
}
