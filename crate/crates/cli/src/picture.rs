//! Netpbm writers for heatmaps and layer curves.

use wordalign::Tensor;

/// Binary greyscale image of `values`, `cell` pixels per entry. `lo` maps to
/// black and `hi` to white; values outside are clamped.
pub fn heatmap_pgm(values: &Tensor, lo: f32, hi: f32, cell: usize) -> Vec<u8> {
    let (rows, cols) = (values.rows(), values.cols());
    let (w, h) = (cols * cell, rows * cell);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let span = (hi - lo).max(f32::EPSILON);
    for y in 0..h {
        for x in 0..w {
            let v = (values.get(y / cell, x / cell) - lo) / span;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            pixels: vec![[255; 3]; width * height],
        }
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
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

    pub fn dot(&mut self, (x, y): (i64, i64), color: [u8; 3]) {
        for dx in -2..=2 {
            for dy in -2..=2 {
                self.put(x + dx, y + dy, color);
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().flatten());
        out
    }
}

/// Polylines of each series against its index on shared axes. The y range
/// covers all values; a tick marks every x position.
pub fn curves_ppm(series: &[(&[f64], [u8; 3])], width: usize, height: usize) -> Vec<u8> {
    let mut canvas = Canvas::new(width, height);
    let margin = 30i64;
    let (w, h) = (width as i64, height as i64);
    let axis = [0, 0, 0];
    canvas.line((margin, h - margin), (w - margin, h - margin), axis);
    canvas.line((margin, margin), (margin, h - margin), axis);

    let values = series.iter().flat_map(|(v, _)| v.iter().copied());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let count = series.iter().map(|(v, _)| v.len()).max().unwrap_or(0);
    if count == 0 || !lo.is_finite() {
        return canvas.to_ppm();
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |k: usize| {
        let inner = (w - 3 * margin) as f64;
        margin + margin / 2 + if count > 1 { (inner * k as f64 / (count - 1) as f64).round() as i64 } else { 0 }
    };
    let py = |v: f64| {
        let inner = (h - 3 * margin) as f64;
        h - margin - margin / 2 - (inner * (v - lo) / span).round() as i64
    };
    for k in 0..count {
        canvas.line((px(k), h - margin), (px(k), h - margin + 5), axis);
    }
    for (values, color) in series {
        for (k, &v) in values.iter().enumerate() {
            canvas.dot((px(k), py(v)), *color);
            if k > 0 {
                canvas.line((px(k - 1), py(values[k - 1])), (px(k), py(v)), *color);
            }
        }
    }
    canvas.to_ppm()
}
