use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};

use super::strokes::StrokeSequence;
use crate::error::{Error, Result};

pub const DEFAULT_SIZE: usize = 64;

/// Single-channel bitmap, row-major, 0 = background and 1 = full ink.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}×{height} raster needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Input(format!("pixel value {p} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    /// Out-of-bounds reads are background.
    #[inline]
    pub fn get_padded(&self, col: isize, row: isize) -> f32 {
        if col < 0 || row < 0 || col as usize >= self.width || row as usize >= self.height {
            0.0
        } else {
            self.pixels[row as usize * self.width + col as usize]
        }
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: f32) {
        self.pixels[row * self.width + col] = v.clamp(0.0, 1.0);
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0.0).count()
    }

    /// Round every pixel to the nearest 8-bit level, matching what the
    /// on-disk formats can represent.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self
                .pixels
                .iter()
                .map(|&p| quantize(p) as f32 / 255.0)
                .collect(),
        }
    }

    fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([quantize(self.get(x as usize, y as usize))])
        })
    }

    fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        Ok(Self::from_gray(&img))
    }

    /// Binary (P5) PGM with maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| quantize(p)));
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Input("malformed PGM".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| bad())?
                    .to_string(),
            );
        }
        pos += 1;
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(Error::Input("only binary 8-bit PGM is supported".into()));
        }
        let w: usize = fields[1].parse().map_err(|_| bad())?;
        let h: usize = fields[2].parse().map_err(|_| bad())?;
        let body = bytes.get(pos..pos + w * h).ok_or_else(bad)?;
        Ok(Self {
            width: w,
            height: h,
            pixels: body.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    pub fn save(&self, path: &Path, format: ImageFileFormat) -> Result<()> {
        let bytes = match format {
            ImageFileFormat::Png => self.to_png()?,
            ImageFileFormat::Pgm => self.to_pgm(),
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(b"P5") {
            Self::from_pgm(&bytes)
        } else {
            Self::from_png(&bytes)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFileFormat {
    #[default]
    Png,
    Pgm,
}

impl ImageFileFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ImageFileFormat::Png => "png",
            ImageFileFormat::Pgm => "pgm",
        }
    }
}

fn quantize(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Normalized coordinate → pixel index, `round(x·(W−1))`.
#[inline]
pub fn to_pixel(x: f64, extent: usize) -> isize {
    (x * (extent as f64 - 1.0)).round() as isize
}

/// One-pixel Bresenham line with ink 1.0. Endpoints are put in a canonical
/// order first, so a segment and its reverse set the same pixels.
pub fn draw_line(r: &mut Raster, a: (isize, isize), b: (isize, isize)) {
    let (mut p, q) = if a <= b { (a, b) } else { (b, a) };
    let dx = (q.0 - p.0).abs();
    let dy = -(q.1 - p.1).abs();
    let sx = if p.0 < q.0 { 1 } else { -1 };
    let sy = if p.1 < q.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if p.0 >= 0 && p.1 >= 0 && (p.0 as usize) < r.width && (p.1 as usize) < r.height {
            r.set(p.0 as usize, p.1 as usize, 1.0);
        }
        if p == q {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            p.0 += sx;
        }
        if e2 <= dx {
            err += dx;
            p.1 += sy;
        }
    }
}

/// Render every polyline segment as a 1-pixel line. A single-point fragment
/// (the truncated tail of a partial stage) renders as one pixel.
pub fn rasterize(strokes: &StrokeSequence, width: usize, height: usize) -> Raster {
    let mut r = Raster::new(width, height);
    for line in strokes.strokes() {
        let px: Vec<(isize, isize)> = line
            .iter()
            .map(|p| (to_pixel(p[0], width), to_pixel(p[1], height)))
            .collect();
        match px.len() {
            0 => {}
            1 => draw_line(&mut r, px[0], px[0]),
            _ => {
                for seg in px.windows(2) {
                    draw_line(&mut r, seg[0], seg[1]);
                }
            }
        }
    }
    r
}

/// Morphological max filter with a `(2·radius+1)²` square structuring element.
pub fn dilate(raster: &Raster, radius: usize) -> Raster {
    if radius == 0 {
        return raster.clone();
    }
    let (w, h) = (raster.width, raster.height);
    let mut tmp = Raster::new(w, h);
    for row in 0..h {
        for col in 0..w {
            let lo = col.saturating_sub(radius);
            let hi = (col + radius).min(w - 1);
            let m = (lo..=hi).map(|c| raster.get(c, row)).fold(0.0f32, f32::max);
            tmp.pixels[row * w + col] = m;
        }
    }
    let mut out = Raster::new(w, h);
    for row in 0..h {
        let lo = row.saturating_sub(radius);
        let hi = (row + radius).min(h - 1);
        for col in 0..w {
            let m = (lo..=hi).map(|r| tmp.get(col, r)).fold(0.0f32, f32::max);
            out.pixels[row * w + col] = m;
        }
    }
    out
}

/// Rasterize then thicken: the sketch input every model consumes.
pub fn render_sketch(
    strokes: &StrokeSequence,
    width: usize,
    height: usize,
    dilation: usize,
) -> Raster {
    dilate(&rasterize(strokes, width, height), dilation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(lines: Vec<Vec<[f64; 2]>>) -> StrokeSequence {
        StrokeSequence::new(lines).unwrap()
    }

    #[test]
    fn empty_strokes_give_blank_raster() {
        let r = rasterize(&StrokeSequence::default(), 64, 64);
        assert_eq!(r.ink_count(), 0);
    }

    /// Reference: every pixel (k, k) and nothing else.
    #[test]
    fn diagonal_sets_exactly_the_diagonal() {
        let r = rasterize(&seq(vec![vec![[0.0, 0.0], [1.0, 1.0]]]), 64, 64);
        assert_eq!(r.ink_count(), 64);
        for k in 0..64 {
            assert_eq!(r.get(k, k), 1.0);
        }
    }

    #[test]
    fn dilation_cases() {
        let mut r = Raster::new(9, 9);
        r.set(4, 4, 1.0);
        assert_eq!(dilate(&r, 0), r);
        let d = dilate(&r, 1);
        assert_eq!(d.ink_count(), 9);
        for row in 3..=5 {
            for col in 3..=5 {
                assert_eq!(d.get(col, row), 1.0);
            }
        }
    }

    #[test]
    fn pgm_and_png_round_trip() {
        let mut r = Raster::new(8, 8);
        r.set(1, 2, 1.0);
        r.set(3, 5, 0.4);
        let q = r.quantized();
        assert_eq!(Raster::from_pgm(&q.to_pgm()).unwrap(), q);
        assert_eq!(Raster::from_png(&q.to_png().unwrap()).unwrap(), q);
    }

    fn arb_line() -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(x, y)| [x, y]), 2..8)
    }

    proptest! {
        #[test]
        fn reversal_invariant(line in arb_line()) {
            let mut rev = line.clone();
            rev.reverse();
            prop_assert_eq!(rasterize(&seq(vec![line]), 64, 64), rasterize(&seq(vec![rev]), 64, 64));
        }

        #[test]
        fn dilation_composes_and_never_reduces(lines in prop::collection::vec(arb_line(), 0..4)) {
            let r = rasterize(&seq(lines), 32, 32);
            let d1 = dilate(&r, 1);
            prop_assert_eq!(dilate(&d1, 1), dilate(&r, 2));
            for (a, b) in r.pixels().iter().zip(d1.pixels()) {
                prop_assert!(b >= a);
                prop_assert!((0.0..=1.0).contains(b));
            }
        }
    }
}
