use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::Error;

pub const GAMMA: f64 = 2.2;

/// Linear `[0, 1]` to an 8-bit code, optionally gamma encoded.
pub fn encode_channel(linear: f64, gamma: bool) -> u8 {
    let c = linear.clamp(0.0, 1.0);
    let c = if gamma { c.powf(1.0 / GAMMA) } else { c };
    (c * 255.0).round() as u8
}

pub fn decode_channel(code: u8, gamma: bool) -> f64 {
    let c = code as f64 / 255.0;
    if gamma {
        c.powf(GAMMA)
    } else {
        c
    }
}

/// Writes an 8-bit RGB PNG from row-major linear pixels.
pub fn write_png(path: &Path, width: usize, height: usize, pixels: &[[f64; 3]], gamma: bool) -> Result<(), Error> {
    let bytes: Vec<u8> = pixels.iter().flat_map(|p| p.map(|c| encode_channel(c, gamma))).collect();
    write_raw(path, width, height, png::ColorType::Rgb, &bytes)
}

/// Writes an 8-bit grayscale mask, 255 for `true`.
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<(), Error> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_raw(path, width, height, png::ColorType::Grayscale, &bytes)
}

fn write_raw(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<(), Error> {
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    writer.finish().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Decoded 8-bit image, converted to RGB.
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[u8; 3]>,
}

pub fn read_raw(path: &Path) -> Result<RawImage, Error> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Data(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let buf = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let rgb = buf
        .chunks_exact(channels)
        .map(|p| match channels {
            1 | 2 => [p[0]; 3],
            _ => [p[0], p[1], p[2]],
        })
        .collect();
    Ok(RawImage {
        width: info.width as usize,
        height: info.height as usize,
        rgb,
    })
}

/// Reads a PNG as linear RGB.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<[f64; 3]>), Error> {
    let raw = read_raw(path)?;
    let px = raw.rgb.iter().map(|p| p.map(|c| decode_channel(c, true))).collect();
    Ok((raw.width, raw.height, px))
}

/// Reads a mask; any channel above 127 counts as foreground.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>), Error> {
    let raw = read_raw(path)?;
    Ok((raw.width, raw.height, raw.rgb.iter().map(|p| p[0] > 127).collect()))
}
