//! Minimal deterministic SVG renderings.

use std::fmt::Write as _;

use super::{ConfusionMatrix, EnsembleReport};

const CELL: usize = 56;
const MARGIN: usize = 90;

/// Heatmap of a confusion matrix with counts in each cell.
pub fn confusion_svg(cm: &ConfusionMatrix) -> String {
    let c = cm.classes();
    let names = cm.label_set.classes();
    let size = MARGIN + c * CELL + 20;
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{size}" height="{size}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="16" text-anchor="middle">predicted</text>"#, MARGIN + c * CELL / 2).unwrap();
    writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">true</text>"#, MARGIN + c * CELL / 2, MARGIN + c * CELL / 2).unwrap();
    for (i, name) in names.iter().enumerate() {
        let mid = MARGIN + i * CELL + CELL / 2;
        writeln!(s, r#"<text x="{mid}" y="{}" text-anchor="middle">{name}</text>"#, MARGIN - 10).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{name}</text>"#, MARGIN - 8, mid + 4).unwrap();
    }
    for (t, row) in cm.counts.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            let shade = 255 - (200.0 * v as f64 / max).round() as u8;
            let (x, y) = (MARGIN + p * CELL, MARGIN + t * CELL);
            writeln!(s, r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="gray"/>"#).unwrap();
            let color = if shade < 128 { "white" } else { "black" };
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="{color}">{v}</text>"#, x + CELL / 2, y + CELL / 2 + 4).unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Per-fold bars for accuracy and weighted F1.
pub fn fold_bars_svg(e: &EnsembleReport) -> String {
    let bar = 18;
    let group = 2 * bar + 16;
    let height = 220;
    let plot = 160.0;
    let width = 60 + e.folds.len() * group + 20;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    for tick in 0..=4 {
        let y = 20.0 + plot * (1.0 - tick as f64 / 4.0);
        writeln!(s, r#"<line x1="50" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="lightgray"/>"#, width - 10).unwrap();
        writeln!(s, r#"<text x="44" y="{:.1}" text-anchor="end">{:.2}</text>"#, y + 4.0, tick as f64 / 4.0).unwrap();
    }
    for (i, f) in e.folds.iter().enumerate() {
        let x0 = 60 + i * group;
        for (j, (v, color)) in [(f.accuracy, "steelblue"), (f.weighted.f1, "darkorange")].into_iter().enumerate() {
            let h = plot * v.clamp(0.0, 1.0);
            writeln!(s, r#"<rect x="{}" y="{:.1}" width="{bar}" height="{h:.1}" fill="{color}"/>"#, x0 + j * bar, 20.0 + plot - h).unwrap();
        }
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">fold {i}</text>"#, x0 + bar, height - 22).unwrap();
    }
    writeln!(s, r#"<text x="60" y="{}" fill="steelblue">accuracy</text>"#, height - 6).unwrap();
    writeln!(s, r#"<text x="130" y="{}" fill="darkorange">weighted F1</text>"#, height - 6).unwrap();
    s.push_str("</svg>\n");
    s
}
