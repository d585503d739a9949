//! Deterministic PNG chart rendering: multi-series line charts for loss
//! curves and labelled scatter plots for PCA projections.
//!
//! Text uses a built-in 5x7 bitmap font (lowercase maps to uppercase), so
//! output bytes depend only on the input data.

use image::{Rgb, RgbImage};

const MARGIN_LEFT: i64 = 70;
const MARGIN_RIGHT: i64 = 20;
const MARGIN_TOP: i64 = 36;
const MARGIN_BOTTOM: i64 = 46;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const FG: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([220, 220, 220]);

/// Fixed series palette.
pub const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([127, 127, 127]),
];

/// 5x7 glyphs, one byte per column, bit 0 = top row.
fn glyph(c: char) -> [u8; 5] {
    let c = c.to_ascii_uppercase();
    match c {
        'A' => [0x7e, 0x09, 0x09, 0x09, 0x7e],
        'B' => [0x7f, 0x49, 0x49, 0x49, 0x36],
        'C' => [0x3e, 0x41, 0x41, 0x41, 0x22],
        'D' => [0x7f, 0x41, 0x41, 0x22, 0x1c],
        'E' => [0x7f, 0x49, 0x49, 0x49, 0x41],
        'F' => [0x7f, 0x09, 0x09, 0x09, 0x01],
        'G' => [0x3e, 0x41, 0x49, 0x49, 0x7a],
        'H' => [0x7f, 0x08, 0x08, 0x08, 0x7f],
        'I' => [0x00, 0x41, 0x7f, 0x41, 0x00],
        'J' => [0x20, 0x40, 0x41, 0x3f, 0x01],
        'K' => [0x7f, 0x08, 0x14, 0x22, 0x41],
        'L' => [0x7f, 0x40, 0x40, 0x40, 0x40],
        'M' => [0x7f, 0x02, 0x0c, 0x02, 0x7f],
        'N' => [0x7f, 0x04, 0x08, 0x10, 0x7f],
        'O' => [0x3e, 0x41, 0x41, 0x41, 0x3e],
        'P' => [0x7f, 0x09, 0x09, 0x09, 0x06],
        'Q' => [0x3e, 0x41, 0x51, 0x21, 0x5e],
        'R' => [0x7f, 0x09, 0x19, 0x29, 0x46],
        'S' => [0x46, 0x49, 0x49, 0x49, 0x31],
        'T' => [0x01, 0x01, 0x7f, 0x01, 0x01],
        'U' => [0x3f, 0x40, 0x40, 0x40, 0x3f],
        'V' => [0x1f, 0x20, 0x40, 0x20, 0x1f],
        'W' => [0x3f, 0x40, 0x38, 0x40, 0x3f],
        'X' => [0x63, 0x14, 0x08, 0x14, 0x63],
        'Y' => [0x07, 0x08, 0x70, 0x08, 0x07],
        'Z' => [0x61, 0x51, 0x49, 0x45, 0x43],
        '0' => [0x3e, 0x51, 0x49, 0x45, 0x3e],
        '1' => [0x00, 0x42, 0x7f, 0x40, 0x00],
        '2' => [0x42, 0x61, 0x51, 0x49, 0x46],
        '3' => [0x21, 0x41, 0x45, 0x4b, 0x31],
        '4' => [0x18, 0x14, 0x12, 0x7f, 0x10],
        '5' => [0x27, 0x45, 0x45, 0x45, 0x39],
        '6' => [0x3c, 0x4a, 0x49, 0x49, 0x30],
        '7' => [0x01, 0x71, 0x09, 0x05, 0x03],
        '8' => [0x36, 0x49, 0x49, 0x49, 0x36],
        '9' => [0x06, 0x49, 0x49, 0x29, 0x1e],
        '.' => [0x00, 0x60, 0x60, 0x00, 0x00],
        ',' => [0x00, 0xa0, 0x60, 0x00, 0x00],
        '-' => [0x08, 0x08, 0x08, 0x08, 0x08],
        '+' => [0x08, 0x08, 0x3e, 0x08, 0x08],
        '_' => [0x40, 0x40, 0x40, 0x40, 0x40],
        '=' => [0x14, 0x14, 0x14, 0x14, 0x14],
        ':' => [0x00, 0x36, 0x36, 0x00, 0x00],
        '(' => [0x00, 0x1c, 0x22, 0x41, 0x00],
        ')' => [0x00, 0x41, 0x22, 0x1c, 0x00],
        '/' => [0x20, 0x10, 0x08, 0x04, 0x02],
        '%' => [0x23, 0x13, 0x08, 0x64, 0x62],
        ' ' => [0x00; 5],
        _ => [0x7f, 0x41, 0x41, 0x41, 0x7f], // unknown: hollow box
    }
}

pub struct Canvas {
    pub img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        let mut img = RgbImage::new(width, height);
        for p in img.pixels_mut() {
            *p = BG;
        }
        Canvas { img }
    }

    fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        // Bresenham.
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x, y, color);
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

    pub fn text(&mut self, x: i64, y: i64, s: &str, color: Rgb<u8>) {
        let mut cx = x;
        for c in s.chars() {
            let g = glyph(c);
            for (col, bits) in g.iter().enumerate() {
                for row in 0..7 {
                    if bits & (1 << row) != 0 {
                        self.put(cx + col as i64, y + row, color);
                    }
                }
            }
            cx += 6;
        }
    }

    pub fn text_width(s: &str) -> i64 {
        s.chars().count() as i64 * 6
    }

    pub fn disc(&mut self, x: i64, y: i64, r: i64, color: Rgb<u8>) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(x + dx, y + dy, color);
                }
            }
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), String> {
        self.img.save(path).map_err(|e| e.to_string())
    }
}

/// Tick positions covering [lo, hi] at a round step.
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        mag
    } else if norm < 3.5 {
        2.0 * mag
    } else if norm < 7.5 {
        5.0 * mag
    } else {
        10.0 * mag
    };
    let first = (lo / step).ceil() * step;
    let mut out = Vec::new();
    let mut t = first;
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1e4 || a < 1e-3 {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    }
}

struct Frame {
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    xlo: f64,
    xhi: f64,
    ylo: f64,
    yhi: f64,
}

impl Frame {
    fn map(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = if self.xhi > self.xlo { (x - self.xlo) / (self.xhi - self.xlo) } else { 0.5 };
        let fy = if self.yhi > self.ylo { (y - self.ylo) / (self.yhi - self.ylo) } else { 0.5 };
        (
            self.x0 + (fx * self.w as f64).round() as i64,
            self.y0 + self.h - (fy * self.h as f64).round() as i64,
        )
    }
}

fn draw_frame(canvas: &mut Canvas, frame: &Frame, title: &str, x_label: &str, y_label: &str) {
    canvas.text(
        (canvas.img.width() as i64 - Canvas::text_width(title)) / 2,
        10,
        title,
        FG,
    );
    for t in ticks(frame.xlo, frame.xhi, 8) {
        let (px, _) = frame.map(t, frame.ylo);
        canvas.line(px, frame.y0, px, frame.y0 + frame.h, GRID);
        let label = fmt_tick(t);
        canvas.text(px - Canvas::text_width(&label) / 2, frame.y0 + frame.h + 8, &label, FG);
    }
    for t in ticks(frame.ylo, frame.yhi, 6) {
        let (_, py) = frame.map(frame.xlo, t);
        canvas.line(frame.x0, py, frame.x0 + frame.w, py, GRID);
        let label = fmt_tick(t);
        canvas.text(frame.x0 - Canvas::text_width(&label) - 6, py - 3, &label, FG);
    }
    // Axes on top of the grid.
    canvas.line(frame.x0, frame.y0, frame.x0, frame.y0 + frame.h, FG);
    canvas.line(frame.x0, frame.y0 + frame.h, frame.x0 + frame.w, frame.y0 + frame.h, FG);
    canvas.text(
        frame.x0 + (frame.w - Canvas::text_width(x_label)) / 2,
        frame.y0 + frame.h + 24,
        x_label,
        FG,
    );
    canvas.text(6, frame.y0 - 14, y_label, FG);
}

fn data_bounds(series: &[(String, Vec<(f64, f64)>)]) -> (f64, f64, f64, f64) {
    let mut xlo = f64::INFINITY;
    let mut xhi = f64::NEG_INFINITY;
    let mut ylo = f64::INFINITY;
    let mut yhi = f64::NEG_INFINITY;
    for (_, pts) in series {
        for &(x, y) in pts {
            xlo = xlo.min(x);
            xhi = xhi.max(x);
            ylo = ylo.min(y);
            yhi = yhi.max(y);
        }
    }
    if !xlo.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if ylo == yhi {
        ylo -= 0.5;
        yhi += 0.5;
    }
    if xlo == xhi {
        xlo -= 0.5;
        xhi += 0.5;
    }
    let pad = (yhi - ylo) * 0.05;
    (xlo, xhi, ylo - pad, yhi + pad)
}

fn legend(canvas: &mut Canvas, frame: &Frame, names: &[String]) {
    let mut y = frame.y0 + 6;
    let x = frame.x0 + frame.w - 150;
    for (i, name) in names.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        canvas.line(x, y + 3, x + 14, y + 3, color);
        canvas.line(x, y + 4, x + 14, y + 4, color);
        canvas.text(x + 18, y, name, FG);
        y += 12;
    }
}

/// Multi-series line chart; series share the x axis.
pub fn render_line_chart(
    series: &[(String, Vec<(f64, f64)>)],
    title: &str,
    x_label: &str,
    y_label: &str,
    width: u32,
    height: u32,
    path: &std::path::Path,
) -> Result<(), String> {
    let mut canvas = Canvas::new(width, height);
    let (xlo, xhi, ylo, yhi) = data_bounds(series);
    let frame = Frame {
        x0: MARGIN_LEFT,
        y0: MARGIN_TOP,
        w: width as i64 - MARGIN_LEFT - MARGIN_RIGHT,
        h: height as i64 - MARGIN_TOP - MARGIN_BOTTOM,
        xlo,
        xhi,
        ylo,
        yhi,
    };
    draw_frame(&mut canvas, &frame, title, x_label, y_label);
    for (i, (_, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for pair in pts.windows(2) {
            let (x0, y0) = frame.map(pair[0].0, pair[0].1);
            let (x1, y1) = frame.map(pair[1].0, pair[1].1);
            canvas.line(x0, y0, x1, y1, color);
        }
        if pts.len() == 1 {
            let (x, y) = frame.map(pts[0].0, pts[0].1);
            canvas.disc(x, y, 2, color);
        }
    }
    if series.len() > 1 {
        let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
        legend(&mut canvas, &frame, &names);
    }
    canvas.save(path)
}

/// Labelled scatter plot (one colour per set).
pub fn render_scatter(
    sets: &[(String, Vec<(f64, f64)>)],
    title: &str,
    x_label: &str,
    y_label: &str,
    width: u32,
    height: u32,
    path: &std::path::Path,
) -> Result<(), String> {
    let mut canvas = Canvas::new(width, height);
    let (xlo, xhi, ylo, yhi) = data_bounds(sets);
    let frame = Frame {
        x0: MARGIN_LEFT,
        y0: MARGIN_TOP,
        w: width as i64 - MARGIN_LEFT - MARGIN_RIGHT,
        h: height as i64 - MARGIN_TOP - MARGIN_BOTTOM,
        xlo,
        xhi,
        ylo,
        yhi,
    };
    draw_frame(&mut canvas, &frame, title, x_label, y_label);
    for (i, (_, pts)) in sets.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for &(x, y) in pts {
            let (px, py) = frame.map(x, y);
            canvas.disc(px, py, 2, color);
        }
    }
    let names: Vec<String> = sets.iter().map(|(n, _)| n.clone()).collect();
    legend(&mut canvas, &frame, &names);
    canvas.save(path)
}
