//! Binary PPM (P6) reader/writer, 8-bit, maxval 255.
//!
//! The canonical on-disk form written here is `P6\n<w> <h>\n255\n` followed
//! by raw RGB bytes; pixel bytes map linearly to `[0,1]`.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use crate::conditioning::Image;
use crate::error::{Error, Result};

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let v = img.pixels[[i, j, c]].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn decode_ppm(data: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    if data.len() < 2 || &data[0..2] != b"P6" {
        return Err(Error::PpmHeader("missing P6 magic".into()));
    }
    pos += 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comments
        loop {
            match data.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(b) = data.get(pos) {
                        pos += 1;
                        if *b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::PpmHeader("truncated header".into())),
            }
        }
        let start = pos;
        while data.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::PpmHeader("expected integer field".into()));
        }
        let text = std::str::from_utf8(&data[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| Error::PpmHeader(format!("bad integer '{text}'")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::PpmMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(Error::PpmHeader("zero dimension".into()));
    }
    // exactly one whitespace byte before the payload
    match data.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::PpmHeader("missing payload separator".into())),
    }
    let expected = (w as usize) * (h as usize) * 3;
    let payload = &data[pos..];
    if payload.len() != expected {
        return Err(Error::PpmPayload {
            expected,
            actual: payload.len(),
        });
    }
    let (h, w) = (h as usize, w as usize);
    let mut pixels = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                pixels[[i, j, c]] = payload[(i * w + j) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Image::new(pixels))
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}
