//! Image files: synthetic set generation, PNG/PPM reading and PNG writing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use alf_core::data::synthetic_image;
use alf_core::Tensor;

use crate::config::DataSection;
use crate::error::{HarnessError, Result};

fn image_err(path: &Path, message: impl Into<String>) -> HarnessError {
    HarnessError::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// File name of synthetic image `index`.
pub fn image_name(index: usize) -> String {
    format!("img_{index:05}.png")
}

/// Write `count` synthetic `size x size` images into `dir` as PNG.
pub fn gen_dataset(dir: &Path, seed: u64, count: usize, size: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    (0..count)
        .map(|i| {
            let (_, img) = synthetic_image(seed, i, size)?;
            let path = dir.join(image_name(i));
            save_png(&path, &img)?;
            Ok(path)
        })
        .collect()
}

/// Images described by a data section: the synthetic set, or every image
/// file in `dir` in file-name order.
pub fn load_dataset(data: &DataSection) -> Result<Vec<Tensor>> {
    if data.dir.as_os_str().is_empty() {
        (0..data.count)
            .map(|i| Ok(synthetic_image(data.seed, i, data.size)?.1))
            .collect()
    } else {
        load_dir(&data.dir)
    }
}

pub fn load_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(HarnessError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pgm")
            )
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| load_image(p)).collect()
}

/// Read an 8-bit RGB or grayscale PNG or binary PPM/PGM as `[3, H, W]` in
/// `[0, 1]`; grayscale is replicated across the three channels.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(HarnessError::io(path))?;
    let (width, height, channels, pixels) = if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)?
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(path, &bytes)?
    } else {
        return Err(image_err(path, "not a PNG or binary PPM/PGM file"));
    };
    let plane = width * height;
    Ok(Tensor::from_fn([3, height, width], |i| {
        let (c, p) = (i / plane, i % plane);
        let src = if channels == 1 { pixels[p] } else { pixels[p * 3 + c] };
        f32::from(src) / 255.0
    }))
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let row = w * channels;
    let pixels = buf
        .chunks(info.line_size)
        .take(h)
        .flat_map(|line| line[..row].iter().copied())
        .collect();
    Ok((w, h, channels, pixels))
}

/// Binary PPM (`P6`) or PGM (`P5`) with maxval at most 255.
fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let channels = if bytes[1] == b'6' { 3 } else { 1 };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if bytes.get(pos) == Some(&b'#') {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| image_err(path, "malformed PPM header"))?;
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 || w == 0 || h == 0 {
        return Err(image_err(path, format!("unsupported PPM {w}x{h} with maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| image_err(path, "truncated PPM raster"))?;
    let pixels = raster
        .iter()
        .map(|&v| ((usize::from(v) * 255 + maxval / 2) / maxval) as u8)
        .collect();
    Ok((w, h, channels, pixels))
}

/// Write a `[3, H, W]` tensor as an 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = match img.shape() {
        [3, h, w] => (*h, *w),
        other => return Err(image_err(path, format!("expected a [3, H, W] image, got {other:?}"))),
    };
    let plane = h * w;
    let data = img.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            rgb.push((data[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let file = File::create(path).map_err(HarnessError::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| image_err(path, e.to_string()))?;
    writer.write_image_data(&rgb).map_err(|e| image_err(path, e.to_string()))?;
    writer.finish().map_err(|e| image_err(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let (_, img) = synthetic_image(3, 5, 16).unwrap();
        let path = dir.path().join("a.png");
        save_png(&path, &img).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn ppm_and_pgm_are_read() {
        let dir = tempfile::tempdir().unwrap();
        let ppm = dir.path().join("a.ppm");
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        std::fs::write(&ppm, bytes).unwrap();
        let t = load_image(&ppm).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);

        let pgm = dir.path().join("b.pgm");
        let mut bytes = b"P5 2 1 15\n".to_vec();
        bytes.extend_from_slice(&[15, 0]);
        std::fs::write(&pgm, bytes).unwrap();
        let t = load_image(&pgm).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn junk_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("x.png");
        std::fs::write(&junk, b"hello").unwrap();
        assert_eq!(load_image(&junk).unwrap_err().exit_code(), 4);
        let short = dir.path().join("y.ppm");
        std::fs::write(&short, b"P6 4 4 255\n\x00\x01").unwrap();
        assert!(load_image(&short).is_err());
        assert!(load_image(&dir.path().join("missing.png")).is_err());
    }

    #[test]
    fn generated_sets_are_reproducible_and_loadable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = gen_dataset(a.path(), 9, 4, 16).unwrap();
        let pb = gen_dataset(b.path(), 9, 4, 16).unwrap();
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let section = DataSection {
            seed: 9,
            count: 4,
            size: 16,
            dir: PathBuf::new(),
        };
        assert_eq!(load_dir(a.path()).unwrap(), load_dataset(&section).unwrap());
        let empty = a.path().join("none");
        assert!(gen_dataset(&empty, 9, 0, 16).unwrap().is_empty());
        assert!(empty.is_dir());
    }
}
