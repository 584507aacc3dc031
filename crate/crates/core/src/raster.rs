//! Binary stroke rendering.
//!
//! Segments are traced with an integer Bresenham walk along the major axis:
//! for every major-axis pixel between the two endpoints the minor coordinate
//! is the ideal line's value rounded half-up, computed exactly in integer
//! arithmetic so output is identical on every platform.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stroke::{PenState, StrokeSequence};

const COORD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stroke_width: usize,
    pub background: f64,
    pub ink: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 1,
            stroke_width: 1,
            background: 1.0,
            ink: 0.0,
        }
    }
}

impl RasterConfig {
    pub fn square(size: usize) -> Self {
        Self {
            height: size,
            width: size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidRasterConfig(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("canvas {}x{} smaller than 8x8", self.height, self.width));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.stroke_width < 1 {
            return bad("stroke width must be at least 1".into());
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.background) || !unit.contains(&self.ink) {
            return bad("intensities must lie in [0, 1]".into());
        }
        if self.background == self.ink {
            return bad("background and ink intensities must differ".into());
        }
        Ok(())
    }
}

/// `height x width x channels` intensities in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl RasterImage {
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    /// Channel-major copy (`C x H x W`) for the convolutional models.
    pub fn to_chw(&self) -> Vec<f64> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    out[(ch * h + r) * w + col] = self.pixels[(r * w + col) * c + ch];
                }
            }
        }
        out
    }

    pub fn from_chw(height: usize, width: usize, channels: usize, data: &[f64]) -> Self {
        let mut pixels = vec![0.0; height * width * channels];
        for ch in 0..channels {
            for r in 0..height {
                for col in 0..width {
                    pixels[(r * width + col) * channels + ch] = data[(ch * height + r) * width + col];
                }
            }
        }
        Self {
            height,
            width,
            channels,
            pixels,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.height {
            for col in 0..self.width {
                for ch in 0..self.channels {
                    out.pixels[(r * self.width + col) * self.channels + ch] =
                        self.get(r, self.width - 1 - col, ch);
                }
            }
        }
        out
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Binary PGM (`P5`) for one channel, PPM (`P6`) for three.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pnm()).map_err(|e| Error::io(path, e))
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(if self.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e));
        let mut writer = enc.write_header().map_err(to_io)?;
        writer.write_image_data(&self.to_bytes()).map_err(to_io)?;
        writer.finish().map_err(to_io)?;
        Ok(())
    }
}

/// Pixel position of a normalized coordinate.
pub fn to_pixel(v: f64, extent: usize) -> i64 {
    (v * (extent - 1) as f64).round() as i64
}

/// Pixels `(col, row)` visited by the integer Bresenham walk from `a` to `b`.
pub fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let steep = dy.abs() > dx.abs();
    let (major, minor, m0, n0) = if steep {
        (dy, dx, a.1, a.0)
    } else {
        (dx, dy, a.0, a.1)
    };
    if major == 0 {
        return vec![a];
    }
    let step = major.signum();
    let span = major.abs();
    (0..=span)
        .map(|t| {
            // minor offset = round_half_up(t * minor / span)
            let n = n0 + (2 * t * minor + span).div_euclid(2 * span);
            let m = m0 + step * t;
            if steep {
                (n, m)
            } else {
                (m, n)
            }
        })
        .collect()
}

pub fn render(seq: &StrokeSequence, cfg: &RasterConfig) -> Result<RasterImage> {
    cfg.validate()?;
    for (i, p) in seq.points().iter().enumerate() {
        let inside = |v: f64| (-COORD_TOLERANCE..=1.0 + COORD_TOLERANCE).contains(&v);
        if !inside(p.x) || !inside(p.y) {
            return Err(Error::UnnormalizedInput { index: i, x: p.x, y: p.y });
        }
    }
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let mut mask = vec![false; cfg.height * cfg.width];
    let lo = -((cfg.stroke_width as i64 - 1) / 2);
    let hi = cfg.stroke_width as i64 / 2;
    let pixel = |x: f64, y: f64| {
        (
            to_pixel(x.clamp(0.0, 1.0), cfg.width),
            to_pixel(y.clamp(0.0, 1.0), cfg.height),
        )
    };
    for pair in seq.points().windows(2) {
        if pair[0].state != PenState::Down {
            continue;
        }
        let a = pixel(pair[0].x, pair[0].y);
        let b = pixel(pair[1].x, pair[1].y);
        for (cx, cy) in bresenham(a, b) {
            for oy in lo..=hi {
                for ox in lo..=hi {
                    let (px, py) = (cx + ox, cy + oy);
                    if (0..w).contains(&px) && (0..h).contains(&py) {
                        mask[(py * w + px) as usize] = true;
                    }
                }
            }
        }
    }
    let mut pixels = Vec::with_capacity(mask.len() * cfg.channels);
    for &m in &mask {
        let v = if m { cfg.ink } else { cfg.background };
        pixels.extend(std::iter::repeat(v).take(cfg.channels));
    }
    Ok(RasterImage {
        height: cfg.height,
        width: cfg.width,
        channels: cfg.channels,
        pixels,
    })
}

pub fn render_batch(seqs: &[StrokeSequence], cfg: &RasterConfig) -> Result<Vec<RasterImage>> {
    seqs.iter()
        .enumerate()
        .map(|(index, s)| {
            render(s, cfg).map_err(|e| Error::BatchItem {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Writes an ASCII preview, `#` for ink; handy in test failure messages.
pub fn ascii(img: &RasterImage, ink: f64, out: &mut impl Write) -> std::io::Result<()> {
    for r in 0..img.height {
        let line: String = (0..img.width)
            .map(|c| if img.get(r, c, 0) == ink { '#' } else { '.' })
            .collect();
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg8() -> RasterConfig {
        RasterConfig::square(8)
    }

    fn ink_count(img: &RasterImage, cfg: &RasterConfig) -> usize {
        img.pixels.iter().filter(|&&v| v == cfg.ink).count()
    }

    #[test]
    fn single_point_is_blank() {
        let s = StrokeSequence::from_polylines(&[vec![(0.5, 0.5)]]).unwrap();
        let img = render(&s, &cfg8()).unwrap();
        assert!(img.pixels.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn horizontal_line_fills_row_four() {
        let s = StrokeSequence::from_polylines(&[vec![(0.0, 0.5), (1.0, 0.5)]]).unwrap();
        let img = render(&s, &cfg8()).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(img.get(r, c, 0) == 0.0, r == 4, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn lifted_gap_stays_empty() {
        let s = StrokeSequence::from_polylines(&[
            vec![(0.0, 0.0), (2.0 / 7.0, 0.0)],
            vec![(5.0 / 7.0, 0.0), (1.0, 0.0)],
        ])
        .unwrap();
        let img = render(&s, &cfg8()).unwrap();
        for c in 3..5 {
            assert_eq!(img.get(0, c, 0), 1.0);
        }
        assert_eq!(ink_count(&img, &cfg8()), 6);
    }

    #[test]
    fn rejects_out_of_canvas_points() {
        let s = StrokeSequence::from_polylines(&[vec![(0.0, 0.0), (1.1, 0.5)]]).unwrap();
        assert!(matches!(
            render(&s, &cfg8()),
            Err(Error::UnnormalizedInput { index: 1, .. })
        ));
        let tiny = StrokeSequence::from_polylines(&[vec![(-1e-12, 0.0), (1.0 + 1e-12, 0.5)]]).unwrap();
        assert!(render(&tiny, &cfg8()).is_ok());
    }

    #[test]
    fn batch_semantics() {
        let cfg = cfg8();
        assert!(render_batch(&[], &cfg).unwrap().is_empty());
        let a = StrokeSequence::from_polylines(&[vec![(0.0, 0.0), (1.0, 1.0)]]).unwrap();
        let b = StrokeSequence::from_polylines(&[vec![(0.0, 1.0), (1.0, 0.0)]]).unwrap();
        let out = render_batch(&[a.clone(), b.clone()], &cfg).unwrap();
        assert_eq!(out, vec![render(&a, &cfg).unwrap(), render(&b, &cfg).unwrap()]);
        let bad = StrokeSequence::from_polylines(&[vec![(0.0, 0.0), (2.0, 0.0)]]).unwrap();
        match render_batch(&[a, bad], &cfg) {
            Err(Error::BatchItem { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg8();
        c.ink = c.background;
        assert!(c.validate().is_err());
        assert!(RasterConfig::square(4).validate().is_err());
        let mut c = cfg8();
        c.channels = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn three_channels_replicate() {
        let s = StrokeSequence::from_polylines(&[vec![(0.0, 0.0), (1.0, 1.0)]]).unwrap();
        let mut c = cfg8();
        c.channels = 3;
        let img = render(&s, &c).unwrap();
        let gray = render(&s, &cfg8()).unwrap();
        for r in 0..8 {
            for col in 0..8 {
                for ch in 0..3 {
                    assert_eq!(img.get(r, col, ch), gray.get(r, col, 0));
                }
            }
        }
    }

    #[test]
    fn pgm_header() {
        let img = RasterImage::filled(8, 9, 1, 1.0);
        let bytes = img.to_pnm();
        assert!(bytes.starts_with(b"P5\n9 8\n255\n"));
        assert_eq!(bytes.len(), 11 + 72);
        assert!(bytes[11..].iter().all(|&b| b == 255));
    }

    #[test]
    fn chw_round_trip() {
        let mut img = RasterImage::filled(8, 8, 3, 0.0);
        for (i, v) in img.pixels.iter_mut().enumerate() {
            *v = i as f64;
        }
        let back = RasterImage::from_chw(8, 8, 3, &img.to_chw());
        assert_eq!(back, img);
    }
}
