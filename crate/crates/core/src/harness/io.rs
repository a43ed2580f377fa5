//! Grayscale image and kernel file formats.
//!
//! Images are portable graymaps (`P2` text or `P5` binary, 8 or 16 bit) and,
//! with the `png` feature, PNG files. Intensities are mapped to `[0, 1]`.
//! Kernels are plain text: one row per line, entries separated by whitespace,
//! blank lines and lines starting with `#` ignored.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::kernel::Kernel;
use crate::scalar::Real;
use crate::tensor::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgmEncoding {
    /// `P2`.
    Ascii,
    /// `P5`.
    Binary,
}

/// Reads a `P2` or `P5` graymap.
pub fn read_pgm(mut reader: impl Read) -> Result<Image<f64>> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos).ok_or_else(|| parse("empty file"))?;
    let encoding = match magic.as_str() {
        "P2" => PgmEncoding::Ascii,
        "P5" => PgmEncoding::Binary,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "not a graymap (magic '{other}')"
            )))
        }
    };
    let width = header_number(&bytes, &mut pos, "width")?;
    let height = header_number(&bytes, &mut pos, "height")?;
    let maxval = header_number(&bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(parse("graymap has a zero dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(parse(format!("maxval {maxval} outside 1..=65535")));
    }
    let count = width * height;
    let scale = maxval as f64;
    let mut data = Vec::with_capacity(count);
    match encoding {
        PgmEncoding::Ascii => {
            for _ in 0..count {
                let v = header_number(&bytes, &mut pos, "pixel")?;
                if v > maxval {
                    return Err(parse(format!("pixel value {v} exceeds maxval {maxval}")));
                }
                data.push(v as f64 / scale);
            }
        }
        PgmEncoding::Binary => {
            // Exactly one whitespace byte separates the header from the raster.
            pos += 1;
            let wide = maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            let raster = bytes
                .get(pos..pos + need)
                .ok_or_else(|| parse(format!("raster truncated: expected {need} bytes")))?;
            if wide {
                for pair in raster.chunks_exact(2) {
                    let v = u16::from_be_bytes([pair[0], pair[1]]) as usize;
                    if v > maxval {
                        return Err(parse(format!("pixel value {v} exceeds maxval {maxval}")));
                    }
                    data.push(v as f64 / scale);
                }
            } else {
                for &b in raster {
                    if b as usize > maxval {
                        return Err(parse(format!("pixel value {b} exceeds maxval {maxval}")));
                    }
                    data.push(b as f64 / scale);
                }
            }
        }
    }
    Image::new(height, width, data)
}

/// Writes a graymap, clamping intensities to `[0, 1]` and rounding to the
/// nearest level. `maxval` above 255 produces 16-bit samples.
pub fn write_pgm<T: Real>(
    mut writer: impl Write,
    img: &Image<T>,
    encoding: PgmEncoding,
    maxval: u16,
) -> Result<()> {
    if maxval == 0 {
        return invalid("maxval must be positive");
    }
    let levels: Vec<u16> = img
        .as_slice()
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * maxval as f64).round() as u16)
        .collect();
    let magic = match encoding {
        PgmEncoding::Ascii => "P2",
        PgmEncoding::Binary => "P5",
    };
    write!(writer, "{magic}\n{} {}\n{maxval}\n", img.cols(), img.rows())?;
    match encoding {
        PgmEncoding::Ascii => {
            for row in levels.chunks(img.cols()) {
                let line: Vec<String> = row.iter().map(u16::to_string).collect();
                writeln!(writer, "{}", line.join(" "))?;
            }
        }
        PgmEncoding::Binary if maxval > 255 => {
            let raw: Vec<u8> = levels.iter().flat_map(|v| v.to_be_bytes()).collect();
            writer.write_all(&raw)?;
        }
        PgmEncoding::Binary => {
            let raw: Vec<u8> = levels.iter().map(|&v| v as u8).collect();
            writer.write_all(&raw)?;
        }
    }
    writer.flush()?;
    Ok(())
}

fn parse(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

/// Next whitespace-delimited header token, skipping `#` comments.
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
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let token = next_token(bytes, pos).ok_or_else(|| parse(format!("missing {what}")))?;
    token
        .parse()
        .map_err(|_| parse(format!("invalid {what} '{token}'")))
}

/// Loads a grayscale image; the format is chosen from the file contents.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P2") || bytes.starts_with(b"P5") {
        return read_pgm(bytes.as_slice());
    }
    if bytes.starts_with(b"\x89PNG") {
        return load_png(&bytes);
    }
    Err(Error::UnsupportedFormat(format!(
        "{}: unrecognized image format",
        path.display()
    )))
}

/// Saves an image; `.png` needs the `png` feature, anything else is written
/// as an 8-bit binary graymap.
pub fn save_image<T: Real>(path: impl AsRef<Path>, img: &Image<T>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        return save_png(path, img);
    }
    let file = fs::File::create(path)?;
    write_pgm(std::io::BufWriter::new(file), img, PgmEncoding::Binary, 255)
}

#[cfg(feature = "png")]
fn load_png(bytes: &[u8]) -> Result<Image<f64>> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| parse(format!("png: {e}")))?;
    let gray = decoded.to_luma16();
    let (w, h) = gray.dimensions();
    let data = gray.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
    Image::new(h as usize, w as usize, data)
}

#[cfg(not(feature = "png"))]
fn load_png(_bytes: &[u8]) -> Result<Image<f64>> {
    Err(Error::UnsupportedFormat(
        "PNG support is not compiled in (enable the `png` feature)".into(),
    ))
}

#[cfg(feature = "png")]
fn save_png<T: Real>(path: &Path, img: &Image<T>) -> Result<()> {
    let raw: Vec<u8> = img
        .as_slice()
        .iter()
        .map(|v| (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buffer = image::GrayImage::from_raw(img.cols() as u32, img.rows() as u32, raw)
        .expect("buffer length matches dimensions");
    buffer
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

#[cfg(not(feature = "png"))]
fn save_png<T: Real>(_path: &Path, _img: &Image<T>) -> Result<()> {
    Err(Error::UnsupportedFormat(
        "PNG support is not compiled in (enable the `png` feature)".into(),
    ))
}

/// Parses a whitespace-separated matrix of decimals.
pub fn read_matrix(reader: impl Read) -> Result<Image<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse(format!("line {}: invalid number '{t}'", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse(format!(
                    "line {}: expected {} entries, found {}",
                    lineno + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse("matrix file has no rows"));
    }
    Image::from_rows(&rows)
}

/// Writes one row per line with round-trip precision.
pub fn write_matrix<T: Real>(mut writer: impl Write, m: &Image<T>) -> Result<()> {
    for r in 0..m.rows() {
        let line: Vec<String> = m
            .row(r)
            .iter()
            .map(|v| format!("{}", v.to_f64_lossy()))
            .collect();
        writeln!(writer, "{}", line.join(" "))?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a kernel. Negative entries are rejected; a positive total other
/// than one is rescaled.
pub fn read_kernel(reader: impl Read) -> Result<Kernel<f64>> {
    let m = read_matrix(reader)?;
    if m.as_slice().iter().any(|&v| v < 0.0) {
        return invalid("kernel file contains a negative entry");
    }
    let total = m.sum();
    if (total - 1.0).abs() > f64::simplex_tolerance() {
        log::warn!("kernel weights sum to {total}; rescaling to one");
        return Kernel::normalized(m);
    }
    Kernel::new(m)
}

pub fn load_kernel(path: impl AsRef<Path>) -> Result<Kernel<f64>> {
    read_kernel(fs::File::open(path)?)
}

pub fn save_kernel<T: Real>(path: impl AsRef<Path>, k: &Kernel<T>) -> Result<()> {
    write_matrix(
        std::io::BufWriter::new(fs::File::create(path)?),
        k.as_image(),
    )
}

/// Kernel scaled so its largest weight is white, for viewing.
pub fn kernel_preview<T: Real>(k: &Kernel<T>) -> Image<T> {
    let peak = k.as_image().max_value();
    if peak > T::zero() {
        k.as_image().scaled(T::one() / peak)
    } else {
        k.as_image().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image<f64> {
        Image::from_fn(5, 7, |r, c| ((r * 37 + c * 11) % 256) as f64 / 255.0)
    }

    #[test]
    fn binary_round_trip_is_exact_on_8_bit_data() {
        let img = sample();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &img, PgmEncoding::Binary, 255).unwrap();
        assert_eq!(read_pgm(buf.as_slice()).unwrap(), img);
    }

    #[test]
    fn ascii_round_trip_is_exact_on_8_bit_data() {
        let img = sample();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &img, PgmEncoding::Ascii, 255).unwrap();
        assert!(buf.starts_with(b"P2\n7 5\n255\n"));
        assert_eq!(read_pgm(buf.as_slice()).unwrap(), img);
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let img = Image::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 5000.0 / 65535.0);
        for enc in [PgmEncoding::Ascii, PgmEncoding::Binary] {
            let mut buf = Vec::new();
            write_pgm(&mut buf, &img, enc, 65535).unwrap();
            assert_eq!(read_pgm(buf.as_slice()).unwrap(), img);
        }
    }

    #[test]
    fn header_comments_are_skipped() {
        let text = b"P2\n# a comment\n2 2 # trailing\n3\n0 1\n2 3\n";
        let img = read_pgm(&text[..]).unwrap();
        assert_eq!(img.shape(), (2, 2));
        assert_eq!(img.get(1, 1), 1.0);
    }

    #[test]
    fn malformed_graymaps_are_rejected() {
        assert!(matches!(
            read_pgm(&b"P6\n1 1\n255\n\0\0\0"[..]),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            read_pgm(&b"P5\n4 4\n255\n\0\0"[..]),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            read_pgm(&b"P2\n1 1\n3\n9\n"[..]),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            read_pgm(&b"P2\n0 1\n3\n"[..]),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn kernel_text_round_trip() {
        let k = Kernel::normalized(Image::from_fn(3, 5, |r, c| {
            1.0 / (1.0 + (r * 5 + c) as f64)
        }))
        .unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, k.as_image()).unwrap();
        let back = read_kernel(buf.as_slice()).unwrap();
        assert!(back.as_image().sub(k.as_image()).max_abs() <= 1e-12);
    }

    #[test]
    fn kernel_files_are_validated() {
        assert!(matches!(
            read_kernel(&b"0.5 0.6\n-0.1 0\n"[..]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            read_kernel(&b"0.5 0.5\n0.1\n"[..]),
            Err(Error::Parse(_))
        ));
        assert!(matches!(read_kernel(&b"0.5 x\n"[..]), Err(Error::Parse(_))));
        assert!(read_kernel(&b"# nothing\n\n"[..]).is_err());
        let k = read_kernel(&b"# comment\n1 1\n\n1 1\n"[..]).unwrap();
        assert_eq!(k, Kernel::uniform(2, 2));
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample();
        let path = dir.path().join("x.pgm");
        save_image(&path, &img).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
        let kpath = dir.path().join("k.txt");
        let k = Kernel::<f64>::uniform(3, 3);
        save_kernel(&kpath, &k).unwrap();
        assert_eq!(load_kernel(&kpath).unwrap(), k);
        std::fs::write(dir.path().join("junk.bin"), b"hello").unwrap();
        assert!(matches!(
            load_image(dir.path().join("junk.bin")),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[cfg(feature = "png")]
    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample();
        let path = dir.path().join("x.png");
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.sub(&img).max_abs() < 1e-12);
    }

    #[test]
    fn preview_peaks_at_one() {
        let k = Kernel::<f64>::uniform(2, 2);
        assert_eq!(kernel_preview(&k).max_value(), 1.0);
    }
}
