//! Minimal RGB raster: storage, PPM/PNG I/O, convex polygon fill and a tiny
//! digit font for annotating crop grids.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scene::PixelRect;

pub type Rgb = [u8; 3];

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed image: {0}")]
    Format(String),
    #[error("empty crop region")]
    EmptyCrop,
}

#[derive(Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RgbImage({}x{}, sha256={})", self.width, self.height, &self.digest_hex()[..12])
    }
}

impl RgbImage {
    pub fn new(width: u32, height: u32, fill: Rgb) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            data.extend_from_slice(&fill);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(RasterError::Format(format!("{} bytes for {width}x{height} RGB", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, c: Rgb) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32, Rgb)> + '_ {
        let w = self.width;
        self.data
            .chunks_exact(3)
            .enumerate()
            .map(move |(i, c)| (i as u32 % w, i as u32 / w, [c[0], c[1], c[2]]))
    }

    /// SHA-256 over dimensions and pixel bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.data);
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    /// Pixels whose centers fall inside `rect`.
    pub fn crop(&self, rect: &PixelRect) -> Result<RgbImage, RasterError> {
        let r = rect.clamp_to(self.width, self.height);
        let x0 = (r.x0 - 0.5).ceil().max(0.0) as u32;
        let y0 = (r.y0 - 0.5).ceil().max(0.0) as u32;
        let x1 = ((r.x1 - 0.5).floor() as i64 + 1).clamp(0, self.width as i64) as u32;
        let y1 = ((r.y1 - 0.5).floor() as i64 + 1).clamp(0, self.height as i64) as u32;
        if x1 <= x0 || y1 <= y0 {
            return Err(RasterError::EmptyCrop);
        }
        let mut out = RgbImage::new(x1 - x0, y1 - y0, [0, 0, 0]);
        for y in y0..y1 {
            for x in x0..x1 {
                out.put(x - x0, y - y0, self.get(x, y));
            }
        }
        Ok(out)
    }

    pub fn resize_nearest(&self, width: u32, height: u32) -> RgbImage {
        let mut out = RgbImage::new(width, height, [0, 0, 0]);
        for y in 0..height {
            let sy = ((y as u64 * self.height as u64) / height as u64) as u32;
            for x in 0..width {
                let sx = ((x as u64 * self.width as u64) / width as u64) as u32;
                out.put(x, y, self.get(sx, sy));
            }
        }
        out
    }

    pub fn blit(&mut self, src: &RgbImage, x0: u32, y0: u32) {
        for y in 0..src.height.min(self.height.saturating_sub(y0)) {
            for x in 0..src.width.min(self.width.saturating_sub(x0)) {
                self.put(x0 + x, y0 + y, src.get(x, y));
            }
        }
    }

    /// Fill a convex polygon given in continuous pixel coordinates. A pixel
    /// is covered when its center lies inside or on the boundary.
    pub fn fill_convex(&mut self, poly: &[(f64, f64)], color: Rgb) {
        if poly.len() < 3 || self.is_empty() {
            return;
        }
        let area: f64 = (0..poly.len())
            .map(|i| {
                let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum();
        if area.abs() < 1e-12 {
            return;
        }
        let sign = area.signum();
        let (mut minx, mut miny, mut maxx, mut maxy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in poly {
            minx = minx.min(x);
            miny = miny.min(y);
            maxx = maxx.max(x);
            maxy = maxy.max(y);
        }
        let x0 = (minx - 0.5).ceil().max(0.0) as i64;
        let y0 = (miny - 0.5).ceil().max(0.0) as i64;
        let x1 = ((maxx - 0.5).floor() as i64).min(self.width as i64 - 1);
        let y1 = ((maxy - 0.5).floor() as i64).min(self.height as i64 - 1);
        for y in y0..=y1 {
            let py = y as f64 + 0.5;
            for x in x0..=x1 {
                let px = x as f64 + 0.5;
                let inside = (0..poly.len()).all(|i| {
                    let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
                    sign * ((b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)) >= 0.0
                });
                if inside {
                    self.put(x as u32, y as u32, color);
                }
            }
        }
    }

    pub fn fill_rect(&mut self, x0: u32, y0: u32, w: u32, h: u32, color: Rgb) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                self.put(x, y, color);
            }
        }
    }

    /// Draw a decimal number with a 3x5 bitmap font scaled by `scale`.
    pub fn draw_number(&mut self, n: u32, x0: u32, y0: u32, scale: u32, color: Rgb) {
        let mut x = x0;
        for ch in n.to_string().bytes() {
            let glyph = DIGITS[(ch - b'0') as usize];
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..3 {
                    if bits & (0b100 >> col) != 0 {
                        self.fill_rect(x + col * scale, y0 + row as u32 * scale, scale, scale, color);
                    }
                }
            }
            x += 4 * scale;
        }
    }

    /// Binary PPM (P6).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.data.len() + 20);
        self.write_ppm(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_ppm<R: Read>(r: R) -> Result<Self, RasterError> {
        let mut r = BufReader::new(r);
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(RasterError::Format("truncated PPM header".into()));
            }
            let line = line.split('#').next().unwrap_or("");
            tokens.extend(line.split_whitespace().map(str::to_string));
        }
        if tokens[0] != "P6" || tokens[3] != "255" {
            return Err(RasterError::Format("only 8-bit P6 is supported".into()));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| RasterError::Format(format!("bad dimension {s:?}")));
        let (width, height) = (parse(&tokens[1])?, parse(&tokens[2])?);
        let mut data = vec![0u8; width as usize * height as usize * 3];
        r.read_exact(&mut data)?;
        Self::from_raw(width, height, data)
    }

    #[cfg(feature = "png")]
    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width, self.height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("png header");
            w.write_image_data(&self.data).expect("png data");
        }
        out
    }

    #[cfg(feature = "png")]
    pub fn from_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let fmt = |e: png::DecodingError| RasterError::Format(e.to_string());
        let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(fmt)?;
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(fmt)?;
        let buf = &buf[..info.buffer_size()];
        let data = match info.color_type {
            png::ColorType::Rgb => buf.to_vec(),
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
            other => return Err(RasterError::Format(format!("unsupported png color type {other:?}"))),
        };
        Self::from_raw(info.width, info.height, data)
    }

    /// Encoded bytes and MIME type used when shipping the image to a service.
    pub fn encode_for_wire(&self) -> (Vec<u8>, &'static str) {
        #[cfg(feature = "png")]
        {
            (self.to_png(), "image/png")
        }
        #[cfg(not(feature = "png"))]
        {
            (self.to_ppm(), "image/x-portable-pixmap")
        }
    }

    /// Load a PPM, or a PNG when the encoder is enabled.
    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(b"P6") {
            return Self::read_ppm(bytes.as_slice());
        }
        #[cfg(feature = "png")]
        if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
            return Self::from_png(&bytes);
        }
        Err(RasterError::Format(format!("{}: unsupported image format", path.display())))
    }
}

const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];
