//! Binary netpbm I/O: P6 PPM for RGB images, P5 PGM for single-channel maps.
//! Only maxval 255 is supported; headers may contain `#` comments between
//! tokens, as the format allows.

use std::path::Path;

use crate::data::{GrayImage, RgbImage};
use crate::error::{Error, Result};

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    write_netpbm(path, "P6", image.w, image.h, &image.data)
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    write_netpbm(path, "P5", image.w, image.h, &image.data)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let (w, h, data) = read_netpbm(path, "P6", 3)?;
    Ok(RgbImage { h, w, data })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let (w, h, data) = read_netpbm(path, "P5", 1)?;
    Ok(GrayImage { h, w, data })
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, data: &[u8]) -> Result<()> {
    let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let fail = |offset: usize, detail: String| Error::Format {
        what: what.clone(),
        offset,
        detail,
    };

    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(fail(0, format!("expected magic {magic:?}")));
    }
    pos += 2;

    // Three whitespace-separated decimal tokens follow the magic: width,
    // height, maxval. `#` starts a comment running to end of line.
    let token = |pos: &mut usize| -> Result<usize> {
        loop {
            match bytes.get(*pos) {
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(*pos), None | Some(b'\n')) {
                        *pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = *pos;
        while matches!(bytes.get(*pos), Some(b) if b.is_ascii_digit()) {
            *pos += 1;
        }
        if *pos == start {
            return Err(fail(start, "expected a decimal header field".into()));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .expect("digits are valid UTF-8")
            .parse::<usize>()
            .map_err(|e| fail(start, format!("header field out of range: {e}")))
    };

    let w = token(&mut pos)?;
    let h = token(&mut pos)?;
    let maxval = token(&mut pos)?;
    if maxval != 255 {
        return Err(fail(pos, format!("maxval {maxval} unsupported; only 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fail(pos, "expected single whitespace before raster".into())),
    }
    if w == 0 || h == 0 {
        return Err(fail(2, format!("degenerate dimensions {w}x{h}")));
    }
    let need = w * h * channels;
    let got = bytes.len() - pos;
    if got != need {
        return Err(fail(
            pos,
            format!("raster holds {got} bytes, {w}x{h}x{channels} needs {need}"),
        ));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}
