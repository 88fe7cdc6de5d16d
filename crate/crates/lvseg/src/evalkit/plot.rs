//! Chart rendering for experiment reports: grouped bar charts and line
//! charts drawn into PNG files with a built-in 5x7 bitmap font, so reports
//! need no plotting toolchain. One PNG can stack several panels vertically.

use std::path::Path;

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Chart description
// ---------------------------------------------------------------------------

/// One plotted quantity: a value per x slot, aligned with the chart's
/// `x_labels`. `NaN` marks a missing point (bars are skipped, lines break).
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChartKind {
    /// Grouped vertical bars, one group per x slot, one bar per series.
    Bars,
    /// Polylines through the slot centers with point markers.
    Lines,
}

/// One panel: a titled axis with categorical x slots and a fixed y range.
#[derive(Clone, Debug)]
pub struct Chart {
    pub title: String,
    pub kind: ChartKind,
    pub x_labels: Vec<String>,
    pub series: Vec<Series>,
    pub y_min: f64,
    pub y_max: f64,
}

impl Chart {
    /// A chart over the unit interval, the natural range for Dice values.
    pub fn unit(title: impl Into<String>, kind: ChartKind, x_labels: Vec<String>) -> Self {
        Chart {
            title: title.into(),
            kind,
            x_labels,
            series: Vec::new(),
            y_min: 0.0,
            y_max: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.x_labels.is_empty() {
            return Err(Error::validation(format!("chart '{}' has no x slots", self.title)));
        }
        if self.series.is_empty() {
            return Err(Error::validation(format!("chart '{}' has no series", self.title)));
        }
        for s in &self.series {
            if s.values.len() != self.x_labels.len() {
                return Err(Error::validation(format!(
                    "chart '{}', series '{}': {} values for {} x slots",
                    self.title,
                    s.label,
                    s.values.len(),
                    self.x_labels.len()
                )));
            }
        }
        if !(self.y_min < self.y_max) {
            return Err(Error::validation(format!(
                "chart '{}': y range [{}, {}] is empty",
                self.title, self.y_min, self.y_max
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Canvas
// ---------------------------------------------------------------------------

const BG: [u8; 3] = [255, 255, 255];
const INK: [u8; 3] = [32, 32, 32];
const GRID: [u8; 3] = [222, 222, 222];
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],  // blue
    [255, 127, 14],  // orange
    [44, 160, 44],   // green
    [214, 39, 40],   // red
    [148, 103, 189], // purple
    [140, 86, 75],   // brown
];

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>, // RGB8, row-major
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        let mut px = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            px.extend_from_slice(&BG);
        }
        Canvas { w, h, px }
    }

    fn set(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let i = 3 * (y as usize * self.w + x as usize);
        self.px[i..i + 3].copy_from_slice(&rgb);
    }

    fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, rgb: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, rgb);
            }
        }
    }

    fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [u8; 3]) {
        // Bresenham, all octants.
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x, y, rgb);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, rgb: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            let rows = glyph(ch);
            for (gy, row) in rows.iter().enumerate() {
                for gx in 0..5 {
                    if row & (1 << (4 - gx)) != 0 {
                        self.set(cx + gx as i64, y + gy as i64, rgb);
                    }
                }
            }
            cx += 6; // 5 px glyph + 1 px spacing
        }
    }
}

/// Pixel width of a rendered string.
fn text_width(s: &str) -> i64 {
    6 * s.chars().count() as i64
}

/// Truncate a label so it renders within `max_px` pixels.
fn fit_label(s: &str, max_px: i64) -> String {
    let max_chars = (max_px / 6).max(1) as usize;
    if s.chars().count() <= max_chars {
        return s.to_string();
    }
    let keep: String = s.chars().take(max_chars.saturating_sub(1)).collect();
    format!("{keep}.")
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

const PANEL_H: usize = 260;
const MARGIN_LEFT: i64 = 48;
const MARGIN_RIGHT: i64 = 12;
const MARGIN_TOP: i64 = 34; // title + legend row
const MARGIN_BOTTOM: i64 = 26;

/// Render panels stacked vertically into one PNG at `path`.
pub fn render_charts(charts: &[Chart], path: &Path) -> Result<()> {
    if charts.is_empty() {
        return Err(Error::validation("no charts to render"));
    }
    for chart in charts {
        chart.validate()?;
    }
    let slots = charts.iter().map(|c| c.x_labels.len()).max().unwrap_or(1);
    let w = (MARGIN_LEFT + MARGIN_RIGHT + (slots as i64 * 72).max(360)) as usize;
    let h = PANEL_H * charts.len();
    let mut canvas = Canvas::new(w, h);

    for (i, chart) in charts.iter().enumerate() {
        draw_panel(&mut canvas, chart, (i * PANEL_H) as i64, w as i64);
    }

    let image = image::RgbImage::from_raw(canvas.w as u32, canvas.h as u32, canvas.px)
        .expect("canvas buffer matches dimensions");
    image
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn draw_panel(canvas: &mut Canvas, chart: &Chart, top: i64, width: i64) {
    let plot_x0 = MARGIN_LEFT;
    let plot_x1 = width - MARGIN_RIGHT;
    let plot_y0 = top + MARGIN_TOP;
    let plot_y1 = top + PANEL_H as i64 - MARGIN_BOTTOM;
    let to_y = |v: f64| -> i64 {
        let t = ((v - chart.y_min) / (chart.y_max - chart.y_min)).clamp(0.0, 1.0);
        plot_y1 - (t * (plot_y1 - plot_y0) as f64).round() as i64
    };

    canvas.text(plot_x0, top + 6, &chart.title, INK);

    // Legend, right-aligned on the title row.
    let mut lx = plot_x1
        - chart
            .series
            .iter()
            .map(|s| 14 + text_width(&s.label) + 8)
            .sum::<i64>();
    for (si, s) in chart.series.iter().enumerate() {
        canvas.fill_rect(lx, top + 6, 10, 7, PALETTE[si % PALETTE.len()]);
        canvas.text(lx + 14, top + 6, &s.label, INK);
        lx += 14 + text_width(&s.label) + 8;
    }

    // Horizontal gridlines with y tick labels.
    for tick in 0..=4 {
        let v = chart.y_min + (chart.y_max - chart.y_min) * tick as f64 / 4.0;
        let y = to_y(v);
        canvas.line(plot_x0, y, plot_x1, y, GRID);
        canvas.text(2, y - 3, &format!("{v:.2}"), INK);
    }
    // Axis frame.
    canvas.line(plot_x0, plot_y0, plot_x0, plot_y1, INK);
    canvas.line(plot_x0, plot_y1, plot_x1, plot_y1, INK);

    let slots = chart.x_labels.len() as i64;
    let slot_w = (plot_x1 - plot_x0) / slots;
    let slot_center = |i: i64| plot_x0 + i * slot_w + slot_w / 2;

    // X labels centered under their slots.
    for (i, label) in chart.x_labels.iter().enumerate() {
        let label = fit_label(label, slot_w - 6);
        let x = slot_center(i as i64) - text_width(&label) / 2;
        canvas.text(x, plot_y1 + 6, &label, INK);
    }

    match chart.kind {
        ChartKind::Bars => {
            let n = chart.series.len() as i64;
            let group_w = (slot_w * 4) / 5;
            let bar_w = (group_w / n).max(1);
            for (si, s) in chart.series.iter().enumerate() {
                let color = PALETTE[si % PALETTE.len()];
                for (xi, &v) in s.values.iter().enumerate() {
                    if !v.is_finite() {
                        continue;
                    }
                    let group_x0 = slot_center(xi as i64) - group_w / 2;
                    let x = group_x0 + si as i64 * bar_w;
                    let y = to_y(v);
                    canvas.fill_rect(x, y, bar_w - 1, plot_y1 - y, color);
                }
            }
        }
        ChartKind::Lines => {
            for (si, s) in chart.series.iter().enumerate() {
                let color = PALETTE[si % PALETTE.len()];
                let mut prev: Option<(i64, i64)> = None;
                for (xi, &v) in s.values.iter().enumerate() {
                    if !v.is_finite() {
                        prev = None;
                        continue;
                    }
                    let p = (slot_center(xi as i64), to_y(v));
                    if let Some(q) = prev {
                        canvas.line(q.0, q.1, p.0, p.1, color);
                    }
                    canvas.fill_rect(p.0 - 1, p.1 - 1, 3, 3, color);
                    prev = Some(p);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 5x7 font
// ---------------------------------------------------------------------------

/// Bitmap of one character: 7 rows, low 5 bits used, bit 4 = leftmost pixel.
/// Lowercase letters reuse the uppercase shapes; unknown characters render
/// as a hollow box.
fn glyph(ch: char) -> [u8; 7] {
    match ch.to_ascii_uppercase() {
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        ',' => [0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b00100, 0b01000],
        ':' => [0b00000, 0b01100, 0b01100, 0b00000, 0b01100, 0b01100, 0b00000],
        '+' => [0b00000, 0b00100, 0b00100, 0b11111, 0b00100, 0b00100, 0b00000],
        '-' => [0b00000, 0b00000, 0b00000, 0b11111, 0b00000, 0b00000, 0b00000],
        '_' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111],
        '/' => [0b00000, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b00000],
        '|' => [0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        '(' => [0b00010, 0b00100, 0b01000, 0b01000, 0b01000, 0b00100, 0b00010],
        ')' => [0b01000, 0b00100, 0b00010, 0b00010, 0b00010, 0b00100, 0b01000],
        '%' => [0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011],
        '=' => [0b00000, 0b00000, 0b11111, 0b00000, 0b11111, 0b00000, 0b00000],
        '<' => [0b00010, 0b00100, 0b01000, 0b10000, 0b01000, 0b00100, 0b00010],
        '>' => [0b01000, 0b00100, 0b00010, 0b00001, 0b00010, 0b00100, 0b01000],
        ' ' => [0; 7],
        _ => [0b11111, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11111],
    }
}
