//! Range coder over [`CdfTable`]s and the `LICB` bitstream container.
//!
//! The coder keeps a 32-bit range with carry propagation through a cached
//! byte, in the style of the LZMA range coder, and codes every symbol at
//! 16-bit precision. Each stream ends with a 32-bit sentinel so a decoder
//! driven by the wrong tables, or fed a damaged stream, fails loudly.

use std::io::{Read, Write};

use crate::diffcore::{Graph, Tensor};
use crate::entropy::{build_cdf, CdfTable, ContinuousModel, SymbolRange, CDF_TOTAL, PRECISION_BITS, SIGMA_MIN};
use crate::models::{CompressionModel, Family, DOWNSAMPLE, HYPER_LATENT, LATENT};
use crate::{Error, Result};

pub const BITSTREAM_MAGIC: &[u8; 4] = b"LICB";
pub const BITSTREAM_VERSION: u8 = 1;
/// Value appended to every stream and checked on decode.
pub const SENTINEL: u32 = 0x4C49_4342;
pub const SENTINEL_BITS: usize = 32;

const TOP: u32 = 1 << 24;
/// Zero bytes the decoder may read past the end of a stream.
const FLUSH_PAD: usize = 3;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Narrows the interval to `[start, start + freq)` out of `2^16`.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= CDF_TOTAL);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_uniform16(&mut self, value: u16) {
        self.encode(value as u32, 1);
    }

    pub fn encode_u32(&mut self, value: u32) {
        self.encode_uniform16((value >> 16) as u16);
        self.encode_uniform16(value as u16);
    }

    /// Codes `symbol` under `table`, escaping to a raw 32-bit value when it
    /// lies outside the table range.
    pub fn encode_symbol(&mut self, symbol: i32, table: &CdfTable) -> Result<()> {
        let slot = table.slot_of(symbol)?;
        let (start, freq) = table.interval(slot);
        self.encode(start, freq);
        if Some(slot) == table.escape_slot() {
            self.encode_u32(symbol as u32);
        }
        Ok(())
    }

    /// Appends the sentinel and the shortest tail that pins the final
    /// interval, then returns the stream.
    pub fn finish(mut self) -> Vec<u8> {
        self.encode_u32(SENTINEL);
        // any value in [low, low + range) decodes; pick one ending in 24 zero bits
        self.low = (self.low + (TOP as u64 - 1)) & !(TOP as u64 - 1);
        self.shift_low();
        self.shift_low();
        debug_assert_eq!(self.out.first(), Some(&0));
        self.out.remove(0);
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self { data, pos: 0, code: 0, range: u32::MAX };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        Ok(d)
    }

    /// Bytes past the end read as zero; [`Self::finish`] decides whether
    /// that was the encoder's implicit tail or a damaged stream.
    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative value of the next symbol; follow with [`Self::consume`].
    fn peek(&self) -> u32 {
        let r = self.range >> PRECISION_BITS;
        (self.code / r).min(CDF_TOTAL - 1)
    }

    fn consume(&mut self, start: u32, freq: u32) -> Result<()> {
        let r = self.range >> PRECISION_BITS;
        self.code = self.code.wrapping_sub(r * start);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
        Ok(())
    }

    pub fn decode_uniform16(&mut self) -> Result<u16> {
        let v = self.peek();
        self.consume(v, 1)?;
        Ok(v as u16)
    }

    pub fn decode_u32(&mut self) -> Result<u32> {
        let hi = self.decode_uniform16()? as u32;
        let lo = self.decode_uniform16()? as u32;
        Ok((hi << 16) | lo)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32> {
        let slot = table.find(self.peek());
        let (start, freq) = table.interval(slot);
        self.consume(start, freq)?;
        if Some(slot) == table.escape_slot() {
            Ok(self.decode_u32()? as i32)
        } else {
            Ok(table.range().min + slot as i32)
        }
    }

    /// Checks the sentinel and that the stream was consumed exactly.
    ///
    /// Wrong tables and truncation both usually surface as a sentinel
    /// mismatch; a matching sentinel with missing bytes is reported as
    /// truncation.
    pub fn finish(mut self) -> Result<()> {
        if self.decode_u32()? != SENTINEL {
            return Err(Error::SentinelMismatch);
        }
        // the encoder's tail leaves exactly FLUSH_PAD bytes of the final window implicit
        let expected = self.data.len() + FLUSH_PAD;
        if self.pos > expected {
            return Err(Error::TruncatedStream);
        }
        if self.pos < expected {
            return Err(Error::format("range-coded stream", "trailing bytes after the final symbol"));
        }
        Ok(())
    }
}

/// Table lookup for [`encode_stream`] / [`decode_stream`]: either one table
/// per symbol or one shared table.
fn table_at<'t>(tables: &'t [CdfTable], i: usize) -> Result<&'t CdfTable> {
    match tables.len() {
        0 => Err(Error::invalid("no coding tables supplied")),
        1 => Ok(&tables[0]),
        _ => tables.get(i).ok_or_else(|| Error::invalid(format!("no table for symbol {i}"))),
    }
}

/// Range-codes `symbols`, each under its own table (or a single shared one).
pub fn encode_stream(symbols: &[i32], tables: &[CdfTable]) -> Result<Vec<u8>> {
    if tables.len() > 1 && tables.len() != symbols.len() {
        return Err(Error::shape(format!("{} symbols but {} tables", symbols.len(), tables.len())));
    }
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.iter().enumerate() {
        enc.encode_symbol(s, table_at(tables, i)?)?;
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_stream`].
pub fn decode_stream(bytes: &[u8], tables: &[CdfTable], count: usize) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(dec.decode_symbol(table_at(tables, i)?)?);
    }
    dec.finish()?;
    Ok(out)
}

/// Ideal code length in bits of `symbols` under the tables' quantized
/// probabilities, escapes included.
pub fn table_bits(symbols: &[i32], tables: &[CdfTable]) -> Result<f64> {
    let mut bits = 0.0;
    for (i, &s) in symbols.iter().enumerate() {
        let t = table_at(tables, i)?;
        let slot = t.slot_of(s)?;
        bits -= t.slot_prob(slot).log2();
        if Some(slot) == t.escape_slot() {
            bits += 32.0;
        }
    }
    Ok(bits)
}

/// Compressed representation of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub family: Family,
    /// Position of the submodel in the lambda grid.
    pub lambda_index: u8,
    pub height: u32,
    pub width: u32,
    pub z_segment: Vec<u8>,
    pub y_segment: Vec<u8>,
}

/// Container bytes before the segments: magic, version, family, lambda
/// index, H, W.
pub const HEADER_BYTES: usize = 4 + 1 + 1 + 1 + 4 + 4;

impl Bitstream {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(BITSTREAM_MAGIC)?;
        w.write_all(&[BITSTREAM_VERSION, self.family.tag(), self.lambda_index])?;
        w.write_all(&self.height.to_le_bytes())?;
        w.write_all(&self.width.to_le_bytes())?;
        for seg in [&self.z_segment, &self.y_segment] {
            w.write_all(&(seg.len() as u32).to_le_bytes())?;
            w.write_all(seg)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.total_bytes());
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; HEADER_BYTES];
        r.read_exact(&mut head).map_err(|_| Error::format("bitstream", "truncated header"))?;
        if &head[..4] != BITSTREAM_MAGIC {
            return Err(Error::format("bitstream", "bad magic"));
        }
        if head[4] != BITSTREAM_VERSION {
            return Err(Error::format("bitstream", format!("unsupported version {}", head[4])));
        }
        let family = Family::from_tag(head[5])?;
        let lambda_index = head[6];
        let height = u32::from_le_bytes(head[7..11].try_into().unwrap());
        let width = u32::from_le_bytes(head[11..15].try_into().unwrap());
        let mut segment = || -> Result<Vec<u8>> {
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(|_| Error::format("bitstream", "truncated segment length"))?;
            let mut seg = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut seg).map_err(|_| Error::format("bitstream", "segment shorter than its length"))?;
            Ok(seg)
        };
        let z_segment = segment()?;
        let y_segment = segment()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format("bitstream", "trailing bytes after the y segment"));
        }
        Ok(Self { family, lambda_index, height, width, z_segment, y_segment })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_BYTES + 8 + self.z_segment.len() + self.y_segment.len()
    }

    /// Bits spent on coded symbols: everything except the header, the
    /// segment lengths and the per-segment sentinels.
    pub fn payload_bits(&self) -> usize {
        let sentinels = if self.family.has_hyper() { 2 } else { 1 } * SENTINEL_BITS;
        (self.z_segment.len() + self.y_segment.len()) * 8 - sentinels
    }

    pub fn bpp(&self) -> f64 {
        (self.total_bytes() * 8) as f64 / (self.height as f64 * self.width as f64)
    }
}

fn softplus_lb(raw: f32) -> f64 {
    let s = if raw > 20.0 { raw as f64 } else { (raw as f64).exp().ln_1p() };
    s.max(SIGMA_MIN)
}

/// One logistic table per channel of a factorized prior.
fn prior_tables(model: &CompressionModel, prior: &str, channels: usize) -> Result<Vec<CdfTable>> {
    let missing = || Error::invalid(format!("model has no {prior} parameters"));
    let loc = model.param(&format!("{prior}.loc")).ok_or_else(missing)?;
    let raw = model.param(&format!("{prior}.scale")).ok_or_else(missing)?;
    if loc.numel() != channels || raw.numel() != channels {
        return Err(Error::shape(format!("{prior} expects {channels} channels")));
    }
    (0..channels)
        .map(|c| {
            let m = ContinuousModel::Logistic { loc: loc.data()[c] as f64, scale: softplus_lb(raw.data()[c]) };
            build_cdf(&m, SymbolRange::LATENT, true)
        })
        .collect()
}

fn to_symbols(t: &Tensor) -> Vec<i32> {
    t.data().iter().map(|&v| v as i32).collect()
}

/// Predicted `(mu, sigma)` for the coded latent, computed the same way on
/// both sides of the channel.
fn conditional_params(model: &CompressionModel, y_hat: &Tensor, z_hat: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::<f32>::new();
    let p = model.bind(&mut g, false);
    let yv = g.constant(y_hat.clone());
    let zv = g.constant(z_hat.clone());
    let out = model.entropy_stage(&mut g, &p, yv, yv, Some(zv))?;
    let sigma = g.value(out.sigma.expect("hyper families predict sigma")).clone();
    let mu = out.mu.map(|m| g.value(m).clone()).unwrap_or_else(|| Tensor::zeros(sigma.shape().to_vec()));
    Ok((mu, sigma))
}

fn gaussian_table(mu: f32, sigma: f32) -> Result<CdfTable> {
    build_cdf(&ContinuousModel::Gaussian { mean: mu as f64, scale: sigma as f64 }, SymbolRange::LATENT, true)
}

/// Compresses a single image (batch 1) with `model`, tagging the stream
/// with the model's position in the lambda grid.
pub fn compress_file(model: &CompressionModel, lambda_index: u8, x: &Tensor) -> Result<Bitstream> {
    let (n, _, h, w) = x.dims4()?;
    if n != 1 {
        return Err(Error::shape(format!("compress_file takes one image, got a batch of {n}")));
    }
    let bundle = model.encode(x)?;
    let family = model.family();
    let y_hat = &bundle.y_hat;
    let (_, c, lh, lw) = y_hat.dims4()?;
    let ys = to_symbols(y_hat);

    let (z_segment, y_segment) = match family {
        Family::Factorized => {
            let tables = prior_tables(model, "prior_y", c)?;
            let mut enc = RangeEncoder::new();
            for (i, &s) in ys.iter().enumerate() {
                enc.encode_symbol(s, &tables[i / (lh * lw)])?;
            }
            (Vec::new(), enc.finish())
        }
        Family::HyperS | Family::HyperMc => {
            let z_hat = bundle.z_hat.as_ref().expect("hyper families produce z_hat");
            let (_, zc, zh, zw) = z_hat.dims4()?;
            let ztables = prior_tables(model, "prior_z", zc)?;
            let mut enc = RangeEncoder::new();
            for (i, &s) in to_symbols(z_hat).iter().enumerate() {
                enc.encode_symbol(s, &ztables[i / (zh * zw)])?;
            }
            let z_segment = enc.finish();

            let (mu, sigma) = conditional_params(model, y_hat, z_hat)?;
            let mut enc = RangeEncoder::new();
            // location-major order so a context decoder can proceed in raster order
            for loc in 0..lh * lw {
                for ch in 0..c {
                    let i = ch * lh * lw + loc;
                    enc.encode_symbol(ys[i], &gaussian_table(mu.data()[i], sigma.data()[i])?)?;
                }
            }
            (z_segment, enc.finish())
        }
    };
    Ok(Bitstream { family, lambda_index, height: h as u32, width: w as u32, z_segment, y_segment })
}

/// Decodes a bitstream with the submodel its header names. `models` is the
/// lambda grid of one family, indexed by lambda index.
pub fn decompress_file(models: &[CompressionModel], bs: &Bitstream) -> Result<Tensor> {
    let model = models
        .get(bs.lambda_index as usize)
        .filter(|m| m.family() == bs.family)
        .ok_or_else(|| Error::MissingModel(format!("{} lambda index {}", bs.family, bs.lambda_index)))?;
    let y_hat = decode_latents(model, bs)?;
    model.decode(&y_hat)
}

/// Recovers the quantized latent `y_hat` from a bitstream.
pub fn decode_latents(model: &CompressionModel, bs: &Bitstream) -> Result<Tensor> {
    let (h, w) = (bs.height as usize, bs.width as usize);
    if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(Error::format("bitstream", format!("image size {h}x{w} is not a multiple of {DOWNSAMPLE}")));
    }
    let (lh, lw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
    let plane = lh * lw;
    let shape = vec![1, LATENT, lh, lw];
    match bs.family {
        Family::Factorized => {
            let tables = prior_tables(model, "prior_y", LATENT)?;
            let mut dec = RangeDecoder::new(&bs.y_segment)?;
            let mut ys = Vec::with_capacity(LATENT * plane);
            for i in 0..LATENT * plane {
                ys.push(dec.decode_symbol(&tables[i / plane])? as f32);
            }
            dec.finish()?;
            Tensor::new(shape, ys)
        }
        Family::HyperS | Family::HyperMc => {
            let ztables = prior_tables(model, "prior_z", HYPER_LATENT)?;
            let mut dec = RangeDecoder::new(&bs.z_segment)?;
            let mut zs = Vec::with_capacity(HYPER_LATENT * plane);
            for i in 0..HYPER_LATENT * plane {
                zs.push(dec.decode_symbol(&ztables[i / plane])? as f32);
            }
            dec.finish()?;
            let z_hat = Tensor::new(vec![1, HYPER_LATENT, lh, lw], zs)?;

            let mut ys = vec![0f32; LATENT * plane];
            let mut dec = RangeDecoder::new(&bs.y_segment)?;
            if bs.family == Family::HyperS {
                let (mu, sigma) = conditional_params(model, &Tensor::new(shape.clone(), ys.clone())?, &z_hat)?;
                for loc in 0..plane {
                    for ch in 0..LATENT {
                        let i = ch * plane + loc;
                        ys[i] = dec.decode_symbol(&gaussian_table(mu.data()[i], sigma.data()[i])?)? as f32;
                    }
                }
            } else {
                // the context only sees raster-earlier locations, so parameters
                // recomputed on the partial latent match the encoder's
                for loc in 0..plane {
                    let partial = Tensor::new(shape.clone(), ys.clone())?;
                    let (mu, sigma) = conditional_params(model, &partial, &z_hat)?;
                    for ch in 0..LATENT {
                        let i = ch * plane + loc;
                        ys[i] = dec.decode_symbol(&gaussian_table(mu.data()[i], sigma.data()[i])?)? as f32;
                    }
                }
            }
            dec.finish()?;
            Tensor::new(shape, ys)
        }
    }
}
