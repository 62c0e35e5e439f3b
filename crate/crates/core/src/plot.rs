//! PNG charts for training logs and evaluation reports.
//!
//! Text is stamped from the built-in bitmap font, so no font files or system libraries are needed.

use std::path::Path;

use plotters::coord::Shift;
use plotters::prelude::*;

use crate::datamodel::font::{cell, ADVANCE, GLYPH_H, GLYPH_W};
use crate::error::{Error, Result};
use crate::trainer::StepRecord;

fn draw_err(e: impl std::fmt::Display) -> Error {
    Error::Internal(format!("plot: {e}"))
}

// Punctuation missing from the word font; same row encoding.
fn extra_glyph(ch: u8) -> Option<[u8; 7]> {
    Some(match ch {
        b'.' => [0, 0, 0, 0, 0, 0b01100, 0b01100],
        b'-' => [0, 0, 0, 0b11111, 0, 0, 0],
        b'+' => [0, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0],
        b':' => [0, 0b01100, 0b01100, 0, 0b01100, 0b01100, 0],
        b'=' => [0, 0, 0b11111, 0, 0b11111, 0, 0],
        b'/' => [0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000],
        b'_' => [0, 0, 0, 0, 0, 0, 0b11111],
        _ => return None,
    })
}

fn inked(ch: u8, col: usize, row: usize) -> bool {
    match extra_glyph(ch) {
        Some(g) => g[row] >> (GLYPH_W - 1 - col) & 1 == 1,
        None => cell(ch, col, row),
    }
}

/// Pixel width of `text` at the given cell size.
pub fn text_width(text: &str, scale: u32) -> i32 {
    (text.len() * ADVANCE) as i32 * scale as i32
}

/// Draws upper-cased `text` with its top-left corner at `(x, y)`.
pub fn stamp_text<DB: DrawingBackend>(
    area: &DrawingArea<DB, Shift>,
    text: &str,
    x: i32,
    y: i32,
    scale: u32,
    color: RGBColor,
) -> Result<()> {
    let s = scale as i32;
    for (i, ch) in text.bytes().map(|c| c.to_ascii_uppercase()).enumerate() {
        let ox = x + (i * ADVANCE) as i32 * s;
        for row in 0..GLYPH_H {
            for col in 0..GLYPH_W {
                if inked(ch, col, row) {
                    let (px, py) = (ox + col as i32 * s, y + row as i32 * s);
                    area.draw(&Rectangle::new([(px, py), (px + s - 1, py + s - 1)], color.filled()))
                        .map_err(draw_err)?;
                }
            }
        }
    }
    Ok(())
}

/// Short tick label, e.g. `0.25`, `1200`, `1E-3`.
fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e5 || v.abs() < 1e-2 {
        format!("{v:.0E}")
    } else if v.fract() == 0.0 {
        format!("{v}")
    } else {
        format!("{v:.2}")
    }
}

const SIZE: (u32, u32) = (900, 540);
const LEFT: i32 = 70;
const TOP: i32 = 40;
const BOTTOM: i32 = 40;
const RIGHT: i32 = 20;

/// Line chart with an optional log10 y axis. Non-finite points, and non-positive ones on a log
/// axis, are skipped.
pub fn lines(title: &str, x_label: &str, series: &[(&str, Vec<(f64, f64)>)], log_y: bool, path: &Path) -> Result<()> {
    let keep = |p: &(f64, f64)| p.0.is_finite() && p.1.is_finite() && (!log_y || p.1 > 0.0);
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, s)| s.iter().copied()).filter(keep).collect();
    if pts.is_empty() {
        return Err(Error::validation("nothing to plot"));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(ty(y));
        y1 = y1.max(ty(y));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-6 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (w, h) = (SIZE.0 as i32, SIZE.1 as i32);
    let plot_area = root.margin(TOP as u32, BOTTOM as u32, LEFT as u32, RIGHT as u32);
    let mut chart = ChartBuilder::on(&plot_area).build_cartesian_2d(x0..x1, y0..y1).map_err(draw_err)?;
    chart.configure_mesh().x_labels(6).y_labels(6).light_line_style(WHITE).draw().map_err(draw_err)?;
    for (i, (_, s)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let line = s.iter().copied().filter(keep).map(|(x, y)| (x, ty(y)));
        chart.draw_series(LineSeries::new(line, color.stroke_width(2))).map_err(draw_err)?;
    }
    root.draw(&Rectangle::new([(LEFT, TOP), (w - RIGHT, h - BOTTOM)], BLACK)).map_err(draw_err)?;

    stamp_text(&root, title, (w - text_width(title, 2)) / 2, 12, 2, BLACK)?;
    let (pw, ph) = ((w - LEFT - RIGHT) as f64, (h - TOP - BOTTOM) as f64);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = tick(x0 + f * (x1 - x0));
        let px = LEFT + (f * pw) as i32;
        stamp_text(&root, &xv, px - text_width(&xv, 1) / 2, h - BOTTOM + 6, 1, BLACK)?;
        let yv = y0 + f * (y1 - y0);
        let yl = if log_y { tick(10f64.powf(yv)) } else { tick(yv) };
        let py = h - BOTTOM - (f * ph) as i32;
        stamp_text(&root, &yl, LEFT - 6 - text_width(&yl, 1), py - 3, 1, BLACK)?;
    }
    stamp_text(&root, x_label, (w - text_width(x_label, 1)) / 2, h - 16, 1, BLACK)?;
    let mut ly = TOP + 10;
    for (i, (name, _)) in series.iter().enumerate() {
        let c = Palette99::pick(i).to_rgba();
        let lx = w - RIGHT - 10 - text_width(name, 1) - 24;
        root.draw(&Rectangle::new([(lx, ly + 2), (lx + 16, ly + 4)], RGBColor(c.0, c.1, c.2).filled()))
            .map_err(draw_err)?;
        stamp_text(&root, name, lx + 22, ly, 1, BLACK)?;
        ly += 14;
    }
    root.present().map_err(draw_err)
}

/// Component and total losses against the step, on a log axis.
pub fn loss_curves(records: &[StepRecord], path: &Path) -> Result<()> {
    let col = |f: fn(&StepRecord) -> f64| records.iter().map(|r| (r.step as f64, f(r))).collect::<Vec<_>>();
    lines(
        "training losses",
        "step",
        &[("recon", col(|r| r.recon)), ("entr", col(|r| r.entr)), ("rep", col(|r| r.rep)), ("total", col(|r| r.total))],
        true,
        path,
    )
}
