//! PNG and binary PPM (P6) / PGM (P5) reading and writing.

use std::path::Path;

use afd_core::image::ImageRgb;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{read_file, write_file, AfdError, Result};

/// 8-bit single-channel image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Png,
    Ppm,
    Pgm,
}

impl FileKind {
    pub fn from_path(path: &Path) -> Option<FileKind> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "png" => Some(FileKind::Png),
            "ppm" => Some(FileKind::Ppm),
            "pgm" => Some(FileKind::Pgm),
            _ => None,
        }
    }
}

pub fn is_image_path(path: &Path) -> bool {
    FileKind::from_path(path).is_some()
}

struct PnmHeader {
    magic: [u8; 2],
    width: usize,
    height: usize,
    body: usize,
}

fn parse_pnm_header(bytes: &[u8], context: &str) -> Result<PnmHeader> {
    let bad = |m: &str| AfdError::format(context, m);
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("not a PNM file"));
    }
    let magic = [bytes[0], bytes[1]];
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
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    Ok(PnmHeader {
        magic,
        width,
        height,
        body: pos + 1,
    })
}

/// Decodes P6 as RGB and P5 by replicating gray into all three channels.
pub fn decode_pnm(bytes: &[u8], context: &str) -> Result<ImageRgb> {
    let h = parse_pnm_header(bytes, context)?;
    let channels = match &h.magic {
        b"P6" => 3,
        b"P5" => 1,
        m => return Err(AfdError::format(context, format!("unsupported PNM type {}", String::from_utf8_lossy(m)))),
    };
    let n = h.width * h.height * channels;
    let body = bytes
        .get(h.body..h.body + n)
        .ok_or_else(|| AfdError::format(context, "truncated pixel data"))?;
    let data = if channels == 3 {
        body.to_vec()
    } else {
        body.iter().flat_map(|&g| [g, g, g]).collect()
    };
    Ok(ImageRgb::new(h.width, h.height, data)?)
}

pub fn encode_ppm(img: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pgm(bytes: &[u8], context: &str) -> Result<GrayImage> {
    let h = parse_pnm_header(bytes, context)?;
    if &h.magic != b"P5" {
        return Err(AfdError::format(context, "not a binary PGM (P5)"));
    }
    let data = bytes
        .get(h.body..h.body + h.width * h.height)
        .ok_or_else(|| AfdError::format(context, "truncated pixel data"))?
        .to_vec();
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        data,
    })
}

pub fn encode_png(img: &ImageRgb) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(img.data(), img.width() as u32, img.height() as u32, ExtendedColorType::Rgb8)
        .map_err(|e| AfdError::format("png encode", e.to_string()))?;
    Ok(out)
}

pub fn decode_png(bytes: &[u8], context: &str) -> Result<ImageRgb> {
    let rgb = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| AfdError::format(context, e.to_string()))?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(ImageRgb::new(w as usize, h as usize, rgb.into_raw())?)
}

/// Reads PNG, PPM or PGM, chosen by content.
pub fn read_image(path: &Path) -> Result<ImageRgb> {
    let bytes = read_file(path)?;
    let context = path.display().to_string();
    if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(&bytes, &context)
    } else {
        decode_png(&bytes, &context)
    }
}

/// Writes by extension: `.png`, `.ppm`, or `.pgm` (BT.601 luma).
pub fn write_image(path: &Path, img: &ImageRgb) -> Result<()> {
    let bytes = match FileKind::from_path(path) {
        Some(FileKind::Png) => encode_png(img)?,
        Some(FileKind::Ppm) => encode_ppm(img),
        Some(FileKind::Pgm) => encode_pgm(&luma(img)),
        None => {
            return Err(AfdError::Usage(format!(
                "{}: output extension must be .png, .ppm or .pgm",
                path.display()
            )))
        }
    };
    write_file(path, &bytes)
}

pub fn luma(img: &ImageRgb) -> GrayImage {
    let data = img
        .data()
        .chunks(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage {
        width: img.width(),
        height: img.height(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageRgb {
        let data = (0..5 * 3 * 3).map(|i| (i * 7 % 256) as u8).collect();
        ImageRgb::new(5, 3, data).unwrap()
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let img = sample();
        assert_eq!(decode_pnm(&encode_ppm(&img), "t").unwrap(), img);
        assert_eq!(decode_png(&encode_png(&img).unwrap(), "t").unwrap(), img);
    }

    #[test]
    fn pgm_round_trip_and_gray_expansion() {
        let g = GrayImage {
            width: 2,
            height: 2,
            data: vec![0, 50, 100, 255],
        };
        let bytes = encode_pgm(&g);
        assert_eq!(decode_pgm(&bytes, "t").unwrap(), g);
        assert_eq!(decode_pnm(&bytes, "t").unwrap().pixel(1, 0), [50, 50, 50]);
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6 # comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        assert_eq!(decode_pnm(&bytes, "t").unwrap().pixel(1, 0), [4, 5, 6]);
        assert!(decode_pnm(b"P6\n2 1\n255\n\x01", "t").is_err());
        assert!(decode_pnm(b"P6\n2 1\n65535\n", "t").is_err());
        assert!(decode_pnm(b"P3\n1 1\n255\n", "t").is_err());
    }
}
