//! Deterministic image encoding of a profile pair.
//!
//! Millimetre coordinates map to pixels with the origin at the canvas centre,
//! `+x` to the right and `+y` up: `col = floor(x / mm_per_px + w/2)`,
//! `row = floor(h/2 - y / mm_per_px)`. Strokes are integer Bresenham lines
//! stamped with a square brush, without anti-aliasing, so the pixel set of a
//! render is a pure function of its inputs.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Displacement, Point2, Profile};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const RED: Rgb = [255, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSpec {
    pub width_px: u32,
    pub height_px: u32,
    pub mm_per_px: f64,
    pub background: Rgb,
    pub designed_color: Rgb,
    pub measured_color: Rgb,
    pub line_width_px: u32,
    /// Bilinear downscale applied after rendering, if any.
    pub resize_to: Option<u32>,
}

impl Default for ImageSpec {
    fn default() -> Self {
        ImageSpec {
            width_px: 512,
            height_px: 512,
            mm_per_px: 0.3,
            background: WHITE,
            designed_color: BLACK,
            measured_color: RED,
            line_width_px: 2,
            resize_to: Some(224),
        }
    }
}

impl ImageSpec {
    /// 256 px at 0.6 mm/px: the same 153.6 mm field at half the resolution,
    /// rendered at network size.
    pub fn desk() -> Self {
        ImageSpec {
            width_px: 256,
            height_px: 256,
            mm_per_px: 0.6,
            resize_to: None,
            ..ImageSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px != self.height_px || self.width_px == 0 {
            return Err(Error::param("width_px", "canvas must be square and non-empty"));
        }
        if !(self.mm_per_px > 0.0) || !self.mm_per_px.is_finite() {
            return Err(Error::param("mm_per_px", "must be positive"));
        }
        if self.designed_color == self.background || self.measured_color == self.background {
            return Err(Error::param(
                "designed_color",
                "stroke colours must differ from the background",
            ));
        }
        if self.line_width_px == 0 {
            return Err(Error::param("line_width_px", "must be at least 1"));
        }
        if let Some(t) = self.resize_to {
            if t == 0 || t > self.width_px {
                return Err(Error::param("resize_to", "must lie in 1..=width_px"));
            }
        }
        Ok(())
    }

    /// Side of the canvas in millimetres.
    pub fn extent_mm(&self) -> f64 {
        self.width_px as f64 * self.mm_per_px
    }

    /// Side of the image fed to a model.
    pub fn output_px(&self) -> u32 {
        self.resize_to.unwrap_or(self.width_px)
    }

    /// SHA-256 over the canonical JSON of this spec, hex encoded.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("ImageSpec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Row-major 8-bit RGB image, row 0 at the top.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            data.extend_from_slice(&color);
        }
        RasterImage { width, height, data }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::Shape(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                width,
                height,
                width as usize * height as usize * 3,
                data.len()
            )));
        }
        Ok(RasterImage { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, col: u32, row: u32) -> Rgb {
        let i = (row as usize * self.width as usize + col as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, col: u32, row: u32, color: Rgb) {
        let i = (row as usize * self.width as usize + col as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    /// `(col, row)` of every pixel equal to `color`.
    pub fn pixels_of(&self, color: Rgb) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                if self.pixel(col, row) == color {
                    out.push((col, row));
                }
            }
        }
        out
    }

    /// Hex SHA-256 of the dimensions and pixel buffer.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width, self.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&self.data)
            .map_err(|e| Error::Png(e.to_string()))
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!("{}: expected 8-bit RGB", path.display())));
        }
        buf.truncate(info.buffer_size());
        RasterImage::from_raw(info.width, info.height, buf)
    }
}

/// Pixel `(col, row)` containing `p`. May lie outside the canvas.
pub fn mm_to_px(p: Point2, spec: &ImageSpec) -> (i64, i64) {
    let col = (p.x / spec.mm_per_px + spec.width_px as f64 / 2.0).floor() as i64;
    let row = (spec.height_px as f64 / 2.0 - p.y / spec.mm_per_px).floor() as i64;
    (col, row)
}

/// Millimetre position of the centre of pixel `(col, row)`.
pub fn px_center_to_mm(col: f64, row: f64, spec: &ImageSpec) -> Point2 {
    Point2::new(
        (col + 0.5 - spec.width_px as f64 / 2.0) * spec.mm_per_px,
        (spec.height_px as f64 / 2.0 - row - 0.5) * spec.mm_per_px,
    )
}

/// Visits every pixel of the integer Bresenham line from `a` to `b`, ends included.
pub fn bresenham(a: (i64, i64), b: (i64, i64), mut plot: impl FnMut(i64, i64)) {
    let (mut x, mut y) = a;
    let dx = (b.0 - x).abs();
    let dy = -(b.1 - y).abs();
    let sx = if x < b.0 { 1 } else { -1 };
    let sy = if y < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        plot(x, y);
        if x == b.0 && y == b.1 {
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

/// Strokes consecutive points with `color`. Each Bresenham pixel stamps a
/// `line_width_px` square whose top-left corner is that pixel; stamp pixels
/// beyond the canvas are dropped. An empty point list is a no-op.
pub fn draw_polyline(canvas: &mut RasterImage, points_px: &[(i64, i64)], color: Rgb, line_width_px: u32) {
    let w = line_width_px.max(1) as i64;
    let (cw, ch) = (canvas.width as i64, canvas.height as i64);
    let mut stamp = |x: i64, y: i64| {
        for r in y..y + w {
            for c in x..x + w {
                if c >= 0 && c < cw && r >= 0 && r < ch {
                    canvas.set_pixel(c as u32, r as u32, color);
                }
            }
        }
    };
    match points_px {
        [] => {}
        [only] => stamp(only.0, only.1),
        _ => {
            for pair in points_px.windows(2) {
                bresenham(pair[0], pair[1], &mut stamp);
            }
        }
    }
}

/// Pixel path of a profile, closing the loop for closed outlines. Fails if any
/// vertex lands off the canvas.
fn profile_pixels(profile: &Profile, spec: &ImageSpec, sample: &str) -> Result<Vec<(i64, i64)>> {
    let mut out = Vec::with_capacity(profile.len() + 1);
    for &p in profile.points() {
        let (c, r) = mm_to_px(p, spec);
        if c < 0 || r < 0 || c >= spec.width_px as i64 || r >= spec.height_px as i64 {
            return Err(Error::OffCanvas {
                sample: sample.to_string(),
                x: p.x,
                y: p.y,
                width: spec.width_px,
                height: spec.height_px,
            });
        }
        out.push((c, r));
    }
    if profile.is_closed() {
        out.push(out[0]);
    }
    Ok(out)
}

fn blank(spec: &ImageSpec) -> RasterImage {
    RasterImage::filled(spec.width_px, spec.height_px, spec.background)
}

/// Both profiles on one canvas: designed first, measured drawn over it.
pub fn render_single(designed: &Profile, measured: &Profile, spec: &ImageSpec, sample: &str) -> Result<RasterImage> {
    spec.validate()?;
    let d = profile_pixels(designed, spec, sample)?;
    let m = profile_pixels(measured, spec, sample)?;
    let mut img = blank(spec);
    draw_polyline(&mut img, &d, spec.designed_color, spec.line_width_px);
    draw_polyline(&mut img, &m, spec.measured_color, spec.line_width_px);
    Ok(img)
}

/// One canvas per profile, each in its own colour.
pub fn render_separate(
    designed: &Profile,
    measured: &Profile,
    spec: &ImageSpec,
    sample: &str,
) -> Result<(RasterImage, RasterImage)> {
    spec.validate()?;
    let d = profile_pixels(designed, spec, sample)?;
    let m = profile_pixels(measured, spec, sample)?;
    let mut a = blank(spec);
    draw_polyline(&mut a, &d, spec.designed_color, spec.line_width_px);
    let mut b = blank(spec);
    draw_polyline(&mut b, &m, spec.measured_color, spec.line_width_px);
    Ok((a, b))
}

/// Bilinear downscale with pixel-centre alignment, per channel, rounded to
/// nearest. Same-size requests return an identical copy.
pub fn resize(image: &RasterImage, target_px: u32) -> Result<RasterImage> {
    if target_px == 0 || target_px > image.width || target_px > image.height {
        return Err(Error::param(
            "target_px",
            format!("{target_px} is not a downscale of {}x{}", image.width, image.height),
        ));
    }
    if target_px == image.width && target_px == image.height {
        return Ok(image.clone());
    }
    let (sw, sh) = (image.width as usize, image.height as usize);
    let t = target_px as usize;
    let sx = sw as f64 / t as f64;
    let sy = sh as f64 / t as f64;
    let taps = |scale: f64, n: usize, i: usize| {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..t).map(|i| taps(sx, sw, i)).collect();
    let rows: Vec<_> = (0..t).map(|i| taps(sy, sh, i)).collect();
    let mut data = Vec::with_capacity(t * t * 3);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            for ch in 0..3 {
                let at = |r: usize, c: usize| image.data[(r * sw + c) * 3 + ch] as f64;
                let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
                let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RasterImage::from_raw(target_px, target_px, data)
}

/// `d / l_norm`, rejecting labels outside the `[-l_norm, l_norm]^2` envelope.
pub fn normalize_label(d: Displacement, l_norm: f64) -> Result<[f64; 2]> {
    if !(l_norm > 0.0) {
        return Err(Error::param("l_norm", "must be positive"));
    }
    if !(d.dx.abs() <= l_norm && d.dy.abs() <= l_norm) {
        return Err(Error::LabelOutOfRange {
            dx: d.dx,
            dy: d.dy,
            limit: l_norm,
        });
    }
    Ok([d.dx / l_norm, d.dy / l_norm])
}

pub fn denormalize_label(n: [f64; 2], l_norm: f64) -> Displacement {
    Displacement::new(n[0] * l_norm, n[1] * l_norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// Both profiles on one image.
    Single,
    /// Designed and measured profiles on two images.
    Separate,
}

impl RenderMode {
    pub fn image_count(self) -> usize {
        match self {
            RenderMode::Single => 1,
            RenderMode::Separate => 2,
        }
    }
}

impl std::str::FromStr for RenderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(RenderMode::Single),
            "separate" => Ok(RenderMode::Separate),
            other => Err(Error::Config(format!("unknown render mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedSample {
    pub sample_id: String,
    pub images: Vec<RasterImage>,
    pub label_norm: [f64; 2],
}

/// Renders a pair in `mode` and applies the spec's resize. The label may be
/// absent (inference), in which case `label_norm` is zero.
pub fn render_pair(
    designed: &Profile,
    measured: &Profile,
    label: Option<Displacement>,
    spec: &ImageSpec,
    mode: RenderMode,
    l_norm: f64,
    sample_id: &str,
) -> Result<RenderedSample> {
    let images = match mode {
        RenderMode::Single => vec![render_single(designed, measured, spec, sample_id)?],
        RenderMode::Separate => {
            let (a, b) = render_separate(designed, measured, spec, sample_id)?;
            vec![a, b]
        }
    };
    let images = match spec.resize_to {
        Some(t) if t != spec.width_px => images.iter().map(|im| resize(im, t)).collect::<Result<_>>()?,
        _ => images,
    };
    let label_norm = match label {
        Some(d) => normalize_label(d, l_norm)?,
        None => [0.0, 0.0],
    };
    Ok(RenderedSample {
        sample_id: sample_id.to_string(),
        images,
        label_norm,
    })
}
