//! On-disk formats: raw float images (`.f32r`), binary PGM label maps, and the shared
//! "ASCII header line + little-endian f32 blob" layout used by dumps and checkpoints.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads one `\n`-terminated ASCII line starting at `offset`; returns it and the offset after it.
pub fn header_line<'a>(bytes: &'a [u8], offset: usize, path: &Path) -> Result<(&'a str, usize)> {
    let rest = &bytes[offset.min(bytes.len())..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, offset as u64, "unterminated header line"))?;
    let line = std::str::from_utf8(&rest[..end])
        .map_err(|_| Error::format(path, offset as u64, "header is not ASCII"))?;
    Ok((line, offset + end + 1))
}

/// `count` little-endian f32 values starting at `offset`.
pub fn f32_blob(bytes: &[u8], offset: usize, count: usize, path: &Path) -> Result<Vec<f32>> {
    let need = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(offset))
        .ok_or_else(|| Error::format(path, offset as u64, "blob size overflows"))?;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated: expected {count} f32 values ({need} bytes), file has {}", bytes.len()),
        ));
    }
    Ok(bytes[offset..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn push_f32s(out: &mut Vec<u8>, values: impl IntoIterator<Item = f32>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn parse_dim(tok: Option<&str>, what: &str, path: &Path, offset: usize) -> Result<usize> {
    tok.and_then(|t| t.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::format(path, offset as u64, format!("bad {what}")))
}

pub fn encode_f32r(image: &Image) -> Vec<u8> {
    let mut out = format!("F32R {} {}\n", image.width(), image.height()).into_bytes();
    push_f32s(&mut out, image.data().iter().copied());
    out
}

/// Parses a `.f32r` image. Values outside `[0, 1]` are min-max rescaled into it.
pub fn decode_f32r(bytes: &[u8], path: &Path) -> Result<Image> {
    let (line, start) = header_line(bytes, 0, path)?;
    let mut tok = line.split_ascii_whitespace();
    if tok.next() != Some("F32R") {
        return Err(Error::format(path, 0, "missing F32R magic"));
    }
    let w = parse_dim(tok.next(), "width", path, 0)?;
    let h = parse_dim(tok.next(), "height", path, 0)?;
    if tok.next().is_some() {
        return Err(Error::format(path, 0, "trailing tokens in header"));
    }
    let mut data = f32_blob(bytes, start, w * h, path)?;
    if bytes.len() != start + 4 * w * h {
        return Err(Error::format(path, (start + 4 * w * h) as u64, "trailing bytes after pixel data"));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, (start + 4 * i) as u64, "non-finite intensity"));
    }
    if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        log::info!("{}: rescaling intensities from [{lo}, {hi}] to [0, 1]", path.display());
        let span = if hi > lo { hi - lo } else { 1.0 };
        for v in &mut data {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    }
    Image::new(w, h, data)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_f32r(&read_bytes(path)?, path)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_bytes(path, &encode_f32r(image))
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.data());
    out
}

/// Next whitespace-delimited header token, skipping `#` comments; returns it with its offset.
fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<(&'a str, usize)> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return None;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok().map(|s| (s, start))
}

/// Binary PGM (`P5`, maxval 255); value 255 is `UNKNOWN`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<LabelMap> {
    let mut pos = 0;
    match pgm_token(bytes, &mut pos) {
        Some(("P5", _)) => {}
        _ => return Err(Error::format(path, 0, "missing P5 magic")),
    }
    let mut num = |what: &str| -> Result<(usize, usize)> {
        let at = pos;
        let (t, off) = pgm_token(bytes, &mut pos)
            .ok_or_else(|| Error::format(path, at as u64, format!("missing {what}")))?;
        let v = t
            .parse::<usize>()
            .map_err(|_| Error::format(path, off as u64, format!("bad {what} {t:?}")))?;
        Ok((v, off))
    };
    let (w, woff) = num("width")?;
    let (h, hoff) = num("height")?;
    let (maxval, moff) = num("maxval")?;
    if w == 0 {
        return Err(Error::format(path, woff as u64, "zero width"));
    }
    if h == 0 {
        return Err(Error::format(path, hoff as u64, "zero height"));
    }
    if maxval != 255 {
        return Err(Error::format(path, moff as u64, format!("maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, pos as u64, "missing raster separator"));
    }
    let start = pos + 1;
    let end = start + w * h;
    if bytes.len() < end {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated raster: expected {} bytes", w * h),
        ));
    }
    if bytes.len() > end {
        return Err(Error::format(path, end as u64, "trailing bytes after raster"));
    }
    LabelMap::new(w, h, bytes[start..end].to_vec())
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_pgm(&read_bytes(path)?, path)
}

pub fn write_labels(path: &Path, map: &LabelMap) -> Result<()> {
    write_bytes(path, &encode_pgm(map))
}
