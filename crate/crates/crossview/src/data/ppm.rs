//! Binary PPM/PGM image files: P6 for RGB, P5 for grayscale, 8-bit,
//! maxval 255. The writer emits exactly `P6\n<w> <h>\n255\n` followed by
//! the raw payload, and a save→load round trip is bit-identical.

use super::{DataError, Image};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub fn write_ppm<W: Write>(img: &Image, w: &mut W) -> Result<(), DataError> {
    let magic = match img.c {
        1 => "P5",
        3 => "P6",
        _ => return Err(DataError::BadPpm("only 1 or 3 channels supported")),
    };
    write!(w, "{magic}\n{} {}\n255\n", img.w, img.h)?;
    let mut payload = Vec::with_capacity(img.h * img.w * img.c);
    for y in 0..img.h {
        for x in 0..img.w {
            for ch in 0..img.c {
                payload.push((img.get(y, x, ch).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_ppm<R: Read>(r: &mut R) -> Result<Image, DataError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;

    let magic = next_token(&bytes, &mut pos).ok_or(DataError::BadPpm("missing magic"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(DataError::BadPpm("not a binary PPM/PGM")),
    };
    let w: usize = parse_int(&bytes, &mut pos)?;
    let h: usize = parse_int(&bytes, &mut pos)?;
    let maxval: usize = parse_int(&bytes, &mut pos)?;
    if maxval != 255 {
        return Err(DataError::BadPpm("maxval must be 255"));
    }
    if w == 0 || h == 0 {
        return Err(DataError::BadPpm("zero dimension"));
    }
    // exactly one whitespace byte separates the header from the payload
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(DataError::BadPpm("missing payload separator")),
    }
    let need = w * h * channels;
    if bytes.len() - pos < need {
        return Err(DataError::BadPpm("payload shorter than declared size"));
    }
    let mut img = Image::new(h, w, channels);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                img.set(y, x, ch, bytes[pos] as f32 / 255.0);
                pos += 1;
            }
        }
    }
    Ok(img)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
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
    if *pos > start {
        String::from_utf8(bytes[start..*pos].to_vec()).ok()
    } else {
        None
    }
}

fn parse_int(bytes: &[u8], pos: &mut usize) -> Result<usize, DataError> {
    next_token(bytes, pos)
        .and_then(|t| t.parse().ok())
        .ok_or(DataError::BadPpm("malformed header integer"))
}

pub fn save_ppm(img: &Image, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm(img, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_ppm(path: &Path) -> Result<Image, DataError> {
    let mut r = BufReader::new(
        File::open(path).map_err(|_| DataError::MissingFile(path.to_path_buf()))?,
    );
    read_ppm(&mut r)
}
