//! Minimal line-plot renderer for trade-off curves and demo tables.
//! Axes, ticks, numeric labels in a tiny bitmap font, one polyline per
//! series. Deliberately small; not a charting library.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const W: u32 = 640;
const H: u32 = 440;
const ML: i32 = 70;
const MR: i32 = 20;
const MT: i32 = 40;
const MB: i32 = 50;

impl Plot {
    pub fn render(&self, path: &Path) -> Result<()> {
        if self.series.iter().all(|s| s.points.is_empty()) {
            return Err(Error::invalid("plot needs at least one point"));
        }
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));

        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &(x, y) in &s.points {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        if x0 == x1 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y0 == y1 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad_y = 0.05 * (y1 - y0);
        let (y0, y1) = (y0 - pad_y, y1 + pad_y);

        let px = |x: f64| -> i32 {
            ML + (((x - x0) / (x1 - x0)) * ((W as i32 - ML - MR) as f64)) as i32
        };
        let py = |y: f64| -> i32 {
            (H as i32 - MB) - (((y - y0) / (y1 - y0)) * ((H as i32 - MT - MB) as f64)) as i32
        };

        let black = Rgb([0, 0, 0]);
        let grey = Rgb([200, 200, 200]);
        // Axes and ticks.
        for i in 0..=4 {
            let xv = x0 + (x1 - x0) * i as f64 / 4.0;
            let yv = y0 + (y1 - y0) * i as f64 / 4.0;
            let xc = px(xv);
            let yc = py(yv);
            draw_line(&mut img, xc, MT, xc, H as i32 - MB, grey);
            draw_line(&mut img, ML, yc, W as i32 - MR, yc, grey);
            draw_text(&mut img, xc - 12, H as i32 - MB + 8, &short(xv), black);
            draw_text(&mut img, 8, yc - 3, &short(yv), black);
        }
        draw_line(&mut img, ML, MT, ML, H as i32 - MB, black);
        draw_line(&mut img, ML, H as i32 - MB, W as i32 - MR, H as i32 - MB, black);
        draw_text(&mut img, ML, 8, &self.title, black);
        draw_text(
            &mut img,
            (W as i32) / 2 - 4 * self.x_label.len() as i32 / 2,
            H as i32 - 18,
            &self.x_label,
            black,
        );
        draw_text(&mut img, 8, MT - 14, &self.y_label, black);

        let mut legend_y = MT + 6;
        for s in &self.series {
            let color = Rgb(s.color);
            let mut last: Option<(i32, i32)> = None;
            for &(x, y) in &s.points {
                let p = (px(x), py(y));
                if let Some(l) = last {
                    draw_line(&mut img, l.0, l.1, p.0, p.1, color);
                }
                draw_marker(&mut img, p.0, p.1, color);
                last = Some(p);
            }
            draw_line(&mut img, W as i32 - MR - 110, legend_y + 3, W as i32 - MR - 90, legend_y + 3, color);
            draw_text(&mut img, W as i32 - MR - 84, legend_y, &s.label, black);
            legend_y += 12;
        }

        img.save(path).map_err(|e| Error::io(path, e))
    }
}

fn short(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn draw_marker(img: &mut RgbImage, x: i32, y: i32, color: Rgb<u8>) {
    for dx in -1..=1 {
        for dy in -1..=1 {
            put(img, x + dx, y + dy, color);
        }
    }
}

fn put(img: &mut RgbImage, x: i32, y: i32, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, x0: i32, y0: i32, x1: i32, y1: i32, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        put(img, x, y, color);
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

/// 3x5 glyphs for digits, minus, dot, and a small latin subset.
fn glyph(c: char) -> Option<[u8; 5]> {
    let g = match c.to_ascii_lowercase() {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '%' => [0b101, 0b001, 0b010, 0b100, 0b101],
        '(' => [0b001, 0b010, 0b010, 0b010, 0b001],
        ')' => [0b100, 0b010, 0b010, 0b010, 0b100],
        '=' => [0b000, 0b111, 0b000, 0b111, 0b000],
        ' ' => [0, 0, 0, 0, 0],
        'a' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'b' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'c' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'd' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'e' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'f' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'g' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'h' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'i' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'k' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'm' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'n' => [0b101, 0b111, 0b111, 0b111, 0b101],
        'o' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'r' => [0b110, 0b101, 0b110, 0b110, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        't' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'u' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'v' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'w' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'x' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        _ => return None,
    };
    Some(g)
}

fn draw_text(img: &mut RgbImage, x: i32, y: i32, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(g) = glyph(c) {
            for (gy, row) in g.iter().enumerate() {
                for gx in 0..3 {
                    if row & (0b100 >> gx) != 0 {
                        put(img, cx + gx, y + gy as i32, color);
                    }
                }
            }
        }
        cx += 4;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.png");
        let plot = Plot {
            title: "demo".into(),
            x_label: "alpha".into(),
            y_label: "psr".into(),
            series: vec![Series {
                label: "psr".into(),
                points: vec![(0.01, 60.0), (0.05, 85.0), (0.15, 99.0)],
                color: [200, 40, 40],
            }],
        };
        plot.render(&path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.width(), 640);
        // Some red pixels landed.
        assert!(img.pixels().any(|p| p.0 == [200, 40, 40]));
    }
}
