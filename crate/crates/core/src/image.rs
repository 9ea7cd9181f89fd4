//! Grayscale B-scan images, Netpbm I/O and the preprocessing chain
//! (histogram equalization, area downsampling, central-slice selection).

use std::ops::Range;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width and height the classifier consumes at full resolution.
pub const FULL_WIDTH: usize = 192;
pub const FULL_HEIGHT: usize = 124;
/// Slices kept from the middle of every macular scan.
pub const CENTRAL_SLICES: usize = 11;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!("image dims must be positive, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height]).expect("positive dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// `[1, H, W]` tensor with intensities scaled to [0, 1].
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("positive dims")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    /// Interleaved RGB.
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!("{width}x{height} RGB image cannot hold {} bytes", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let pixels = img.pixels().iter().flat_map(|&g| [g, g, g]).collect();
        Self { width: img.width, height: img.height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// `<scan_id>_<index>.pgm`
pub fn slice_file_name(scan_id: &str, index: usize) -> String {
    format!("{scan_id}_{index}.pgm")
}

// ---------------------------------------------------------------------------
// Netpbm

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    let kind = if magic == b"P5" { "PGM" } else { "PPM" };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(kind, format!("missing {} magic", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and comments before each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(kind, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(kind, format!("expected a number at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::format(kind, "header number out of range"))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(kind, "missing whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(kind, format!("maxval {maxval} unsupported (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(kind, "zero image dimension"));
    }
    Ok(Header { width, height, data_start: pos })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes, b"P5")?;
    let n = h.width.checked_mul(h.height).ok_or_else(|| Error::format("PGM", "dims overflow"))?;
    let raster = &bytes[h.data_start..];
    if raster.len() < n {
        return Err(Error::format("PGM", format!("truncated payload: {} of {n} bytes", raster.len())));
    }
    GrayImage::new(h.width, h.height, raster[..n].to_vec())
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn load_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| match e {
        Error::Format { kind, message } => Error::format(kind, format!("{}: {message}", path.display())),
        other => other,
    })
}

pub fn save_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes, b"P6")?;
    let n = h.width * h.height * 3;
    let raster = &bytes[h.data_start..];
    if raster.len() < n {
        return Err(Error::format("PPM", "truncated payload"));
    }
    RgbImage::new(h.width, h.height, raster[..n].to_vec())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn save_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Global histogram equalization.
///
/// Each level maps to `round(255 * (cdf(v) - cdf_min) / (N - cdf_min))`,
/// rounding halves up. An image with a single gray level is returned as is.
pub fn histogram_equalize(img: &GrayImage) -> GrayImage {
    let mut hist = [0u64; 256];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let total = img.pixels.len() as u64;
    let cdf_min = hist.iter().copied().find(|&c| c > 0).unwrap_or(0);
    let denom = total - cdf_min;
    if denom == 0 {
        return img.clone();
    }
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    for (level, &count) in hist.iter().enumerate() {
        cdf += count;
        let num = 255 * cdf.saturating_sub(cdf_min);
        lut[level] = ((2 * num + denom) / (2 * denom)) as u8;
    }
    GrayImage { width: img.width, height: img.height, pixels: img.pixels.iter().map(|&p| lut[p as usize]).collect() }
}

/// Overlap of source cell `i` (spanning `[i*t, (i+1)*t)`) with output
/// cell `o` (spanning `[o*s, (o+1)*s)`), in units of 1/t source pixels.
fn overlap(i: usize, o: usize, s: usize, t: usize) -> u64 {
    let lo = (i * t).max(o * s);
    let hi = ((i + 1) * t).min((o + 1) * s);
    hi.saturating_sub(lo) as u64
}

/// Area-average resampling to `target_w x target_h`; fractional source boxes
/// are weighted exactly and the mean is rounded half up.
pub fn downsample(img: &GrayImage, target_w: usize, target_h: usize) -> Result<GrayImage> {
    let (sw, sh) = (img.width, img.height);
    if target_w == 0 || target_h == 0 {
        return Err(Error::Config("target dims must be positive".into()));
    }
    if target_w > sw || target_h > sh {
        return Err(Error::Config(format!("downsample cannot enlarge {sw}x{sh} to {target_w}x{target_h}")));
    }
    if (target_w, target_h) == (sw, sh) {
        return Ok(img.clone());
    }
    // Per output column, the contributing source columns and their weights.
    let spans = |src: usize, dst: usize| -> Vec<Vec<(usize, u64)>> {
        (0..dst)
            .map(|o| {
                let first = o * src / dst;
                let last = ((o + 1) * src).div_ceil(dst).min(src);
                (first..last).map(|i| (i, overlap(i, o, src, dst))).filter(|&(_, w)| w > 0).collect()
            })
            .collect()
    };
    let xs = spans(sw, target_w);
    let ys = spans(sh, target_h);
    // Box area in the same scaled units: (sw/tw * tw) * (sh/th * th).
    let denom = (sw * sh) as u64;
    let mut pixels = Vec::with_capacity(target_w * target_h);
    for yspan in &ys {
        for xspan in &xs {
            let mut sum = 0u64;
            for &(y, wy) in yspan {
                let row = &img.pixels[y * sw..(y + 1) * sw];
                for &(x, wx) in xspan {
                    sum += row[x] as u64 * wx * wy;
                }
            }
            pixels.push(((2 * sum + denom) / (2 * denom)) as u8);
        }
    }
    GrayImage::new(target_w, target_h, pixels)
}

/// Equalize, then downsample.
pub fn preprocess(img: &GrayImage, target_w: usize, target_h: usize) -> Result<GrayImage> {
    downsample(&histogram_equalize(img), target_w, target_h)
}

/// Slices of one macular scan, `first_index` being the index of `slices[0]`
/// within the original acquisition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanSlices {
    pub scan_id: String,
    pub first_index: usize,
    pub slices: Vec<GrayImage>,
}

impl ScanSlices {
    pub fn new(scan_id: impl Into<String>, slices: Vec<GrayImage>) -> Self {
        Self { scan_id: scan_id.into(), first_index: 0, slices }
    }

    pub fn indices(&self) -> Range<usize> {
        self.first_index..self.first_index + self.slices.len()
    }
}

/// Index window of the `count` central slices of an `n`-slice scan:
/// `n/2 - count/2 ..` (for 11 of 61: 25..=35).
pub fn central_indices(scan_id: &str, n: usize, count: usize) -> Result<Range<usize>> {
    if count == 0 || n < count {
        return Err(Error::ScanRejected {
            scan_id: scan_id.to_string(),
            reason: format!("{n} slices, need at least {count}"),
        });
    }
    let start = n / 2 - count / 2;
    Ok(start..start + count)
}

pub fn select_central(scan: &ScanSlices, count: usize) -> Result<ScanSlices> {
    let range = central_indices(&scan.scan_id, scan.slices.len(), count)?;
    Ok(ScanSlices {
        scan_id: scan.scan_id.clone(),
        first_index: scan.first_index + range.start,
        slices: scan.slices[range].to_vec(),
    })
}
