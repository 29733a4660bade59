//! Minimal raster plot emitter: PNG charts with labeled axes rendered
//! through an embedded 8x8 bitmap font, no system font dependencies.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ReportError, ReportResult};
use crate::data::DatasetStats;
use crate::engine::{EvalResult, TrainHistory};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 600;
const MARGIN_LEFT: i32 = 80;
const MARGIN_RIGHT: i32 = 30;
const MARGIN_TOP: i32 = 46;
const MARGIN_BOTTOM: i32 = 58;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([25, 25, 25]);
const BLUE: Rgb<u8> = Rgb([31, 119, 180]);
const RED: Rgb<u8> = Rgb([214, 39, 40]);
const GRAY: Rgb<u8> = Rgb([150, 150, 150]);
const BAR_FILL: Rgb<u8> = Rgb([114, 158, 206]);
const BAR_FILL_ALT: Rgb<u8> = Rgb([237, 151, 151]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    HistoryCurve,
    Scatter,
    AgeDistribution,
    GenderDistribution,
}

/// Data behind a plot; must match the requested kind.
#[derive(Debug, Clone, Copy)]
pub enum PlotPayload<'a> {
    History(&'a TrainHistory),
    Eval(&'a EvalResult),
    Stats(&'a DatasetStats),
}

/// Render one chart to a PNG file. The scatter kind draws the identity line
/// plus a 12-month tolerance band; axes are labeled in months.
pub fn emit_plot(kind: PlotKind, payload: &PlotPayload, out_path: &Path) -> ReportResult<()> {
    let canvas = match (kind, payload) {
        (PlotKind::HistoryCurve, PlotPayload::History(h)) => draw_history(h),
        (PlotKind::Scatter, PlotPayload::Eval(e)) => draw_scatter(e),
        (PlotKind::AgeDistribution, PlotPayload::Stats(s)) => draw_age_distribution(s),
        (PlotKind::GenderDistribution, PlotPayload::Stats(s)) => draw_gender_distribution(s),
        _ => return Err(ReportError::PayloadMismatch { kind }),
    };
    canvas.img.save(out_path).map_err(|e| ReportError::ImageEncode {
        path: out_path.to_path_buf(),
        source: e,
    })
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        Self {
            img: RgbImage::from_pixel(WIDTH, HEIGHT, WHITE),
        }
    }

    fn set(&mut self, x: i32, y: i32, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    fn line(&mut self, mut x0: i32, mut y0: i32, x1: i32, y1: i32, color: Rgb<u8>) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, color);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn fill_rect(&mut self, x0: i32, y0: i32, x1: i32, y1: i32, color: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, color);
            }
        }
    }

    fn disc(&mut self, cx: i32, cy: i32, r: i32, color: Rgb<u8>) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.set(cx + dx, cy + dy, color);
                }
            }
        }
    }

    fn text(&mut self, x: i32, y: i32, s: &str, color: Rgb<u8>) {
        let mut cx = x;
        for ch in s.chars() {
            let glyph = font8x8::legacy::BASIC_LEGACY
                .get(ch as usize)
                .copied()
                .unwrap_or(font8x8::legacy::BASIC_LEGACY['?' as usize]);
            for (gy, row) in glyph.iter().enumerate() {
                for gx in 0..8 {
                    if row & (1 << gx) != 0 {
                        self.set(cx + gx, y + gy as i32, color);
                    }
                }
            }
            cx += 8;
        }
    }

    fn text_centered(&mut self, cx: i32, y: i32, s: &str, color: Rgb<u8>) {
        self.text(cx - (s.len() as i32 * 8) / 2, y, s, color);
    }
}

/// Maps data coordinates to the pixel plot area.
pub(crate) struct Frame {
    px0: i32,
    py0: i32,
    px1: i32,
    py1: i32,
    xmin: f64,
    xmax: f64,
    ymin: f64,
    ymax: f64,
}

impl Frame {
    fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        let (xmin, xmax) = widen_if_degenerate(xmin, xmax);
        let (ymin, ymax) = widen_if_degenerate(ymin, ymax);
        Self {
            px0: MARGIN_LEFT,
            py0: MARGIN_TOP,
            px1: WIDTH as i32 - MARGIN_RIGHT,
            py1: HEIGHT as i32 - MARGIN_BOTTOM,
            xmin,
            xmax,
            ymin,
            ymax,
        }
    }

    pub(crate) fn map_x(&self, v: f64) -> i32 {
        let t = (v - self.xmin) / (self.xmax - self.xmin);
        self.px0 + (t * (self.px1 - self.px0) as f64).round() as i32
    }

    pub(crate) fn map_y(&self, v: f64) -> i32 {
        let t = (v - self.ymin) / (self.ymax - self.ymin);
        self.py1 - (t * (self.py1 - self.py0) as f64).round() as i32
    }
}

fn widen_if_degenerate(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

/// Tick step of the form {1,2,5}x10^k giving roughly `target` intervals.
fn nice_step(range: f64, target: usize) -> f64 {
    let raw = range / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    for m in [1.0, 2.0, 5.0, 10.0] {
        if m * mag >= raw {
            return m * mag;
        }
    }
    10.0 * mag
}

fn fmt_tick(v: f64) -> String {
    if v.fract().abs() < 1e-9 || v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

fn draw_axes(canvas: &mut Canvas, frame: &Frame, title: &str, x_label: &str, y_label: &str) {
    canvas.line(frame.px0, frame.py0, frame.px0, frame.py1, BLACK);
    canvas.line(frame.px0, frame.py1, frame.px1, frame.py1, BLACK);
    canvas.text_centered((frame.px0 + frame.px1) / 2, 14, title, BLACK);
    canvas.text_centered(
        (frame.px0 + frame.px1) / 2,
        HEIGHT as i32 - 18,
        x_label,
        BLACK,
    );
    canvas.text(6, MARGIN_TOP - 20, y_label, BLACK);

    let xstep = nice_step(frame.xmax - frame.xmin, 8);
    let mut t = (frame.xmin / xstep).ceil() * xstep;
    while t <= frame.xmax + 1e-9 {
        let px = frame.map_x(t);
        canvas.line(px, frame.py1, px, frame.py1 + 4, BLACK);
        canvas.text_centered(px, frame.py1 + 8, &fmt_tick(t), BLACK);
        t += xstep;
    }
    let ystep = nice_step(frame.ymax - frame.ymin, 7);
    let mut t = (frame.ymin / ystep).ceil() * ystep;
    while t <= frame.ymax + 1e-9 {
        let py = frame.map_y(t);
        canvas.line(frame.px0 - 4, py, frame.px0, py, BLACK);
        let label = fmt_tick(t);
        canvas.text(
            frame.px0 - 8 - label.len() as i32 * 8,
            py - 4,
            &label,
            BLACK,
        );
        t += ystep;
    }
}

fn polyline(canvas: &mut Canvas, frame: &Frame, points: &[(f64, f64)], color: Rgb<u8>) {
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        canvas.line(
            frame.map_x(x0),
            frame.map_y(y0),
            frame.map_x(x1),
            frame.map_y(y1),
            color,
        );
    }
    for &(x, y) in points {
        canvas.disc(frame.map_x(x), frame.map_y(y), 2, color);
    }
}

fn draw_history(history: &TrainHistory) -> Canvas {
    let mut canvas = Canvas::new();
    let train: Vec<(f64, f64)> = history
        .records
        .iter()
        .map(|r| (r.epoch as f64, r.train_mae))
        .collect();
    let val: Vec<(f64, f64)> = history
        .records
        .iter()
        .map(|r| (r.epoch as f64, r.val_mae))
        .collect();
    let ymax = train
        .iter()
        .chain(&val)
        .map(|&(_, y)| y)
        .fold(1.0f64, f64::max);
    let xmax = history.records.len().saturating_sub(1).max(1) as f64;
    let frame = Frame::new(0.0, xmax, 0.0, ymax * 1.05);
    draw_axes(&mut canvas, &frame, "MAE vs epoch", "epoch", "MAE (months)");
    polyline(&mut canvas, &frame, &train, BLUE);
    polyline(&mut canvas, &frame, &val, RED);

    let lx = frame.px1 - 150;
    canvas.fill_rect(lx, frame.py0 + 6, lx + 14, frame.py0 + 12, BLUE);
    canvas.text(lx + 20, frame.py0 + 3, "train MAE", BLACK);
    canvas.fill_rect(lx, frame.py0 + 22, lx + 14, frame.py0 + 28, RED);
    canvas.text(lx + 20, frame.py0 + 19, "val MAE", BLACK);
    canvas
}

pub(crate) fn scatter_frame(eval: &EvalResult) -> Frame {
    let hi = eval
        .predictions
        .iter()
        .flat_map(|p| [p.true_months, p.pred_months])
        .fold(288.0f64, f64::max);
    Frame::new(0.0, hi * 1.02, 0.0, hi * 1.02)
}

fn draw_scatter(eval: &EvalResult) -> Canvas {
    let mut canvas = Canvas::new();
    let frame = scatter_frame(eval);
    draw_axes(
        &mut canvas,
        &frame,
        "actual vs predicted age",
        "actual age (months)",
        "predicted age (months)",
    );
    // 12-month tolerance band around the identity line.
    for offset in [-12.0, 12.0] {
        canvas.line(
            frame.map_x(frame.xmin),
            frame.map_y(frame.xmin + offset),
            frame.map_x(frame.xmax),
            frame.map_y(frame.xmax + offset),
            GRAY,
        );
    }
    canvas.line(
        frame.map_x(frame.xmin),
        frame.map_y(frame.xmin),
        frame.map_x(frame.xmax),
        frame.map_y(frame.xmax),
        BLACK,
    );
    for p in &eval.predictions {
        canvas.disc(frame.map_x(p.true_months), frame.map_y(p.pred_months), 2, BLUE);
    }
    canvas
}

fn draw_age_distribution(stats: &DatasetStats) -> Canvas {
    let mut canvas = Canvas::new();
    let (xmin, xmax, ymax) = if stats.age_histogram.is_empty() {
        (0.0, 288.0, 1.0)
    } else {
        let first = *stats.age_histogram.keys().next().unwrap() as f64;
        let last = *stats.age_histogram.keys().next_back().unwrap() as f64
            + stats.bin_width as f64;
        let peak = *stats.age_histogram.values().max().unwrap() as f64;
        (first, last, peak)
    };
    let frame = Frame::new(xmin, xmax, 0.0, ymax * 1.1);
    draw_axes(
        &mut canvas,
        &frame,
        "bone age distribution",
        "bone age (months)",
        "count",
    );
    for (&bin, &count) in &stats.age_histogram {
        let x0 = frame.map_x(bin as f64) + 1;
        let x1 = frame.map_x((bin + stats.bin_width) as f64) - 1;
        let y1 = frame.map_y(count as f64);
        if x1 >= x0 && count > 0 {
            canvas.fill_rect(x0, y1, x1, frame.py1 - 1, BAR_FILL);
        }
    }
    canvas
}

fn draw_gender_distribution(stats: &DatasetStats) -> Canvas {
    let mut canvas = Canvas::new();
    let peak = stats.male_count.max(stats.female_count).max(1) as f64;
    let frame = Frame::new(0.0, 2.0, 0.0, peak * 1.15);
    draw_axes(&mut canvas, &frame, "gender distribution", "", "count");
    let bars = [
        (0.25, 0.85, stats.male_count, "male", BAR_FILL),
        (1.15, 1.75, stats.female_count, "female", BAR_FILL_ALT),
    ];
    for (lo, hi, count, label, color) in bars {
        let x0 = frame.map_x(lo);
        let x1 = frame.map_x(hi);
        let y1 = frame.map_y(count as f64);
        if count > 0 {
            canvas.fill_rect(x0, y1, x1, frame.py1 - 1, color);
        }
        let cx = (x0 + x1) / 2;
        canvas.text_centered(cx, frame.py1 + 20, label, BLACK);
        canvas.text_centered(cx, y1 - 12, &count.to_string(), BLACK);
    }
    canvas
}
