//! Image ingestion and export.
//!
//! Binary PPM (P6, 8 or 16 bit) and PNG are read and written as 8-bit RGB.
//! Attack outputs move pixels by far less than one 8-bit level, so they are
//! stored losslessly in a small raw float container (`LICT`).

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use licw_core::diffcore::Tensor;
use licw_core::models::DOWNSAMPLE;

use crate::error::{io_err, HarnessError, Result};

pub const MIN_SIDE: usize = 64;
pub const RAW_MAGIC: &[u8; 4] = b"LICT";
const PNG_SIGNATURE: [u8; 8] = [137, 80, 78, 71, 13, 10, 26, 10];

#[derive(Debug, Clone)]
pub struct ImageRecord {
    /// `1 x 3 x H x W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub source: PathBuf,
    /// Bits per sample of the source file (32 for raw float files).
    pub bit_depth: u8,
}

impl ImageRecord {
    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    pub fn id(&self) -> String {
        self.source.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| self.source.display().to_string())
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> HarnessError {
    HarnessError::CorruptImage { path: path.to_path_buf(), reason: reason.into() }
}

fn planar(width: usize, height: usize, samples: impl Fn(usize, usize) -> f32) -> Tensor {
    let plane = width * height;
    Tensor::from_fn(vec![1, 3, height, width], |i| samples(i % plane, i / plane))
}

/// Parses a binary PPM into a `1 x 3 x H x W` tensor and its bit depth.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(Tensor, u8)> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(HarnessError::UnsupportedFormat { path: path.to_path_buf() });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(corrupt(path, "header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text.parse().map_err(|_| corrupt(path, format!("bad header field at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(corrupt(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(corrupt(path, format!("header {width}x{height} maxval {maxval}")));
    }
    let wide = maxval > 255;
    let bps = if wide { 2 } else { 1 };
    let need = width * height * 3 * bps;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(corrupt(path, format!("{} pixel bytes, expected {need}", data.len())));
    }
    let scale = maxval as f32;
    let t = planar(width, height, |p, c| {
        let k = p * 3 + c;
        let v = if wide { u16::from_be_bytes([data[2 * k], data[2 * k + 1]]) as f32 } else { data[k] as f32 };
        (v / scale).min(1.0)
    });
    Ok((t, if wide { 16 } else { 8 }))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn interleaved(t: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(HarnessError::Config(format!("cannot export a {n}x{c} image batch")));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for ch in 0..3 {
            out.push(to_u8(t.data()[ch * plane + p]));
        }
    }
    Ok((w, h, out))
}

pub fn encode_ppm(t: &Tensor) -> Result<Vec<u8>> {
    let (w, h, data) = interleaved(t)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_png(bytes: &[u8], path: &Path) -> Result<(Tensor, u8)> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| corrupt(path, e.to_string()))?;
    let depth = reader.info().bit_depth as u8;
    let size = reader.output_buffer_size().ok_or_else(|| corrupt(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| corrupt(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(corrupt(path, format!("unsupported color type {other:?}"))),
    };
    let line = info.line_size;
    let t = planar(w, h, |p, c| {
        let (y, x) = (p / w, p % w);
        let k = if channels >= 3 { c } else { 0 };
        buf[y * line + x * channels + k] as f32 / 255.0
    });
    Ok((t, depth))
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let (w, h, data) = interleaved(t)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| HarnessError::Config(e.to_string()))?;
        writer.write_image_data(&data).map_err(|e| HarnessError::Config(e.to_string()))?;
        writer.finish().map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    Ok(out)
}

/// `LICT`, rank (u32), dims (u32 each), then f32 values, all little endian.
pub fn encode_raw(t: &Tensor) -> Vec<u8> {
    let mut out = RAW_MAGIC.to_vec();
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let word = |k: usize| -> Result<u32> {
        bytes
            .get(4 + 4 * k..8 + 4 * k)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| corrupt(path, "raw header ends early"))
    };
    if bytes.len() < 8 || &bytes[..4] != RAW_MAGIC {
        return Err(HarnessError::UnsupportedFormat { path: path.to_path_buf() });
    }
    let rank = word(0)? as usize;
    if rank == 0 || rank > 8 {
        return Err(corrupt(path, format!("rank {rank}")));
    }
    let shape = (1..=rank).map(|k| word(k).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * (rank + 1);
    let count: usize = shape.iter().product();
    let body = &bytes[start.min(bytes.len())..];
    if body.len() != count * 4 {
        return Err(corrupt(path, format!("{} value bytes, expected {}", body.len(), count * 4)));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Center crop so both sides are multiples of `multiple`.
pub fn center_crop(t: &Tensor, multiple: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let (nh, nw) = (h - h % multiple, w - w % multiple);
    if (nh, nw) == (h, w) {
        return Ok(t.clone());
    }
    let (oy, ox) = ((h - nh) / 2, (w - nw) / 2);
    Ok(Tensor::from_fn(vec![n, c, nh, nw], |i| {
        let (plane, y, x) = (i / (nh * nw), (i / nw) % nh, i % nw);
        t.data()[(plane * h + oy + y) * w + ox + x]
    }))
}

/// Decodes PPM, PNG or raw float bytes by their signature.
pub fn decode_any(bytes: &[u8], path: &Path) -> Result<(Tensor, u8)> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes, path)
    } else if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes, path)
    } else if bytes.starts_with(RAW_MAGIC) {
        Ok((decode_raw(bytes, path)?, 32))
    } else {
        Err(HarnessError::UnsupportedFormat { path: path.to_path_buf() })
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (t, bit_depth) = decode_any(&bytes, path)?;
    record(center_crop(&t, DOWNSAMPLE)?, path.to_path_buf(), bit_depth)
}

/// Validates a tensor as an [`ImageRecord`].
pub fn record(pixels: Tensor, source: PathBuf, bit_depth: u8) -> Result<ImageRecord> {
    let invalid = |reason: String| HarnessError::InvalidImage { path: source.clone(), reason };
    let (n, c, h, w) = pixels.dims4()?;
    if n != 1 || c != 3 {
        return Err(invalid(format!("shape {n}x{c}x{h}x{w}")));
    }
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(invalid(format!("{h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")));
    }
    if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(invalid("values outside [0, 1]".into()));
    }
    Ok(ImageRecord { pixels, source, bit_depth })
}

/// Writes by extension: `.ppm`, `.png` (8-bit) or anything else as raw float.
pub fn save_image(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ppm") => encode_ppm(t)?,
        Some("png") => encode_png(t)?,
        _ => encode_raw(t),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}
