use std::path::Path;

use super::{ImgError, RasterImage};

/// Parses a binary P5/P6 file with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<RasterImage, ImgError> {
    let bad = |m: &str| ImgError::MalformedImage(m.to_string());
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments before each header token
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("non-numeric header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field overflow"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after header"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(bad(&format!("payload has {} of {need} bytes", payload.len())));
    }
    RasterImage::new(width, height, channels, payload[..need].to_vec()).map_err(|e| bad(&e.to_string()))
}

pub fn encode_pnm(img: &RasterImage) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn load_image(path: &Path) -> Result<RasterImage, ImgError> {
    decode_pnm(&std::fs::read(path)?)
}

pub fn save_image(img: &RasterImage, path: &Path) -> Result<(), ImgError> {
    crate::fsutil::write_atomic(path, &encode_pnm(img))?;
    Ok(())
}
