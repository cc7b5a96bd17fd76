use std::fmt::Write as _;

use crate::error::{GfefError, Result};

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;

/// 64×64×3 raster of a series, stored row-major with channels last.
///
/// Channel 0 holds the curve as drawn, channel 1 the curve folded about the
/// vertical centre line, channel 2 is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveImage {
    pixels: Vec<f64>,
}

impl CurveImage {
    fn blank() -> Self {
        CurveImage {
            pixels: vec![0.0; IMAGE_SIZE * IMAGE_SIZE * IMAGE_CHANNELS],
        }
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.pixels[(row * IMAGE_SIZE + col) * IMAGE_CHANNELS + channel]
    }

    fn set(&mut self, channel: usize, row: usize, col: usize, v: f64) {
        self.pixels[(row * IMAGE_SIZE + col) * IMAGE_CHANNELS + channel] = v;
    }

    /// Flat `[row][col][channel]` buffer.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Lit `(row, col)` pixels of one channel, in scan order.
    pub fn lit(&self, channel: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                if self.get(channel, r, c) > 0.0 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn lit_count(&self, channel: usize) -> usize {
        self.lit(channel).len()
    }

    /// Plain-text PPM (P3) of all three channels.
    pub fn to_ppm(&self) -> String {
        let mut s = format!("P3\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n");
        for r in 0..IMAGE_SIZE {
            let row: Vec<String> = (0..IMAGE_SIZE)
                .map(|c| {
                    (0..IMAGE_CHANNELS)
                        .map(|ch| ((self.get(ch, r, c) * 255.0).round() as u8).to_string())
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
        s
    }

    /// Plain-text PGM (P2) of a single channel.
    pub fn channel_to_pgm(&self, channel: usize) -> String {
        let mut s = format!("P2\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n");
        for r in 0..IMAGE_SIZE {
            let row: Vec<String> = (0..IMAGE_SIZE)
                .map(|c| ((self.get(channel, r, c) * 255.0).round() as u8).to_string())
                .collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
        s
    }
}

/// Rasterizes the series as a 1-pixel polyline without axes.
///
/// Values are min-max scaled onto rows (maximum at row 0, a constant series
/// on row 32) and the index onto columns.  The folded channel maps index `i`
/// and its mirror `T + 1 - i` to the same column, so the second half is drawn
/// back over the first.
pub fn render_curve_image(series: &[f64]) -> Result<CurveImage> {
    let t = series.len();
    if t < 2 {
        return Err(GfefError::InvalidArgument(format!(
            "curve image needs at least 2 points, got {t}"
        )));
    }
    let last = (IMAGE_SIZE - 1) as f64;
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let rows: Vec<i64> = series
        .iter()
        .map(|&v| {
            if max - min > 0.0 {
                (last * (max - v) / (max - min)).round() as i64
            } else {
                (IMAGE_SIZE / 2) as i64
            }
        })
        .collect();

    let mut img = CurveImage::blank();

    let unfolded: Vec<i64> = (0..t)
        .map(|i| (last * i as f64 / (t - 1) as f64).round() as i64)
        .collect();
    draw_polyline(&mut img, 0, &unfolded, &rows);

    let half = t.div_ceil(2);
    let folded: Vec<i64> = (1..=t)
        .map(|i| {
            let m = i.min(t + 1 - i);
            if half <= 1 {
                0
            } else {
                (last * (m - 1) as f64 / (half - 1) as f64).round() as i64
            }
        })
        .collect();
    draw_polyline(&mut img, 1, &folded, &rows);
    Ok(img)
}

fn draw_polyline(img: &mut CurveImage, channel: usize, cols: &[i64], rows: &[i64]) {
    img.set(channel, rows[0] as usize, cols[0] as usize, 1.0);
    for i in 1..cols.len() {
        draw_line(img, channel, (cols[i - 1], rows[i - 1]), (cols[i], rows[i]));
    }
}

/// Integer Bresenham line, endpoints inclusive.  Endpoints are ordered first
/// so a segment lights the same pixels in either direction.
fn draw_line(img: &mut CurveImage, channel: usize, from: (i64, i64), to: (i64, i64)) {
    let (from, to) = if from <= to { (from, to) } else { (to, from) };
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        img.set(channel, y as usize, x as usize, 1.0);
        if x == to.0 && y == to.1 {
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
