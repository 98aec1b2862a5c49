//! Grayscale image datasets: PGM (P5), 8-bit PNG and GSL1 ingestion, PGM
//! export, and seeded procedural blob images.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, Tensor};

/// Images as `[1, h, w]` maps in `[-1, 1]`, sorted by filename.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<(String, Tensor)>,
    pub source: PathBuf,
}

impl Dataset {
    pub fn new(images: Vec<(String, Tensor)>, source: PathBuf) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Dataset(format!("no images found in {}", source.display())))?;
        let shape = first.1.shape().to_vec();
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::Dataset(format!(
                "{}: expected 1 x h x w, got {shape:?}",
                first.0
            )));
        }
        for (id, t) in &images {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dataset(format!(
                    "mixed dimensions: {} is {:?} but {} is {:?}",
                    first.0,
                    shape,
                    id,
                    t.shape()
                )));
            }
            if t.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Dataset(format!("{id}: values outside [-1, 1]")));
            }
        }
        Ok(Self { images, source })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(h, w)` shared by every image.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.images[0].1.shape();
        (s[1], s[2])
    }

    /// Stacks the chosen images into `[n, 1, h, w]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Invalid(format!("image index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&items)
    }

    pub fn all(&self) -> Result<Tensor> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

fn pixel_to_unit(v: f64, maxval: f64) -> f64 {
    (v * 255.0 / maxval) / 127.5 - 1.0
}

/// Loads every `.pgm`, `.png` and `.gsl1` file in `dir`. Other files are ignored.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("pgm" | "png" | "gsl1")) {
            paths.push(path);
        }
    }
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let mut images = Vec::with_capacity(paths.len());
    for path in paths {
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let img = match ext.as_deref() {
            Some("pgm") => read_pgm(&path)?,
            Some("png") => read_png(&path)?,
            _ => read_gsl1_image(&path)?,
        };
        images.push((id, img));
    }
    Dataset::new(images, dir.to_path_buf())
}

fn read_gsl1_image(path: &Path) -> Result<Tensor> {
    let t = read_tensor(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    match t.shape().len() {
        2 => {
            let (h, w) = (t.shape()[0], t.shape()[1]);
            t.reshape(vec![1, h, w])
        }
        3 => Ok(t),
        _ => Err(Error::Dataset(format!(
            "{}: expected h x w or 1 x h x w tensor, got {:?}",
            path.display(),
            t.shape()
        ))),
    }
}

/// Reads a binary PGM into a `[1, h, w]` map in `[-1, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Dataset(format!("{}: {msg}", path.display()));
    let mut pos = 0;
    let mut next_token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token().as_deref() != Some("P5") {
        return Err(bad("not a binary PGM (P5)"));
    }
    let mut number = || -> Result<usize> {
        next_token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("malformed PGM header"))
    };
    let (w, h, maxval) = (number()?, number()?, number()?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(bad("unsupported PGM dimensions or depth"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let raster = bytes
        .get(start..start + w * h)
        .ok_or_else(|| bad("truncated PGM raster"))?;
    let data = raster
        .iter()
        .map(|&v| pixel_to_unit(v as f64, maxval as f64))
        .collect();
    Tensor::new(vec![1, h, w], data)
}

/// Reads an 8-bit grayscale PNG (alpha, if present, is dropped).
pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Dataset(format!("{}: {msg}", path.display()));
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!("expected 8-bit PNG, got {:?}", info.bit_depth)));
    }
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(bad(format!("expected grayscale PNG, got {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        data.extend(
            row.iter()
                .step_by(stride)
                .take(w)
                .map(|&v| pixel_to_unit(v as f64, 255.0)),
        );
    }
    Tensor::new(vec![1, h, w], data)
}

/// Maps `[-1, 1]` to bytes with rounding and clamping.
pub fn to_pixels(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes a `[1, h, w]` or `[h, w]` map as a binary PGM, atomically.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => {
            return Err(Error::Invalid(format!(
                "cannot write {s:?} as a grayscale image"
            )))
        }
    };
    let tmp = path.with_extension("pgm.tmp");
    {
        let f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut out = BufWriter::new(f);
        write!(out, "P5\n{w} {h}\n255\n").map_err(|e| Error::io(&tmp, e))?;
        out.write_all(&to_pixels(image.data()))
            .map_err(|e| Error::io(&tmp, e))?;
        out.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// `n` procedural images of `size x size`: one to three soft Gaussian blobs
/// on a dark background, drawn from `seed`.
pub fn synthetic_blobs(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || size == 0 {
        return Err(Error::Invalid(
            "synthetic dataset needs n >= 1 and size >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let images = (0..n)
        .map(|i| {
            let blobs = rng.random_range(1..=3);
            let params: Vec<(f64, f64, f64, f64)> = (0..blobs)
                .map(|_| {
                    (
                        rng.random_range(0.2..0.8) * s,
                        rng.random_range(0.2..0.8) * s,
                        rng.random_range(0.08..0.22) * s,
                        rng.random_range(0.6..1.0),
                    )
                })
                .collect();
            let mut data = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let v: f64 = params
                        .iter()
                        .map(|&(cx, cy, r, a)| {
                            let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                            a * (-d2 / (2.0 * r * r)).exp()
                        })
                        .sum();
                    data.push(2.0 * v.min(1.0) - 1.0);
                }
            }
            Ok((
                format!("blob_{i:03}.pgm"),
                Tensor::new(vec![1, size, size], data)?,
            ))
        })
        .collect::<Result<_>>()?;
    Dataset::new(images, PathBuf::from(format!("synthetic:{seed}")))
}

/// Writes every image as `<id>` (a `.pgm` name) under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, img) in &dataset.images {
        write_pgm(&dir.join(id), img)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::write_tensor;

    fn write_raw_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) {
        let mut bytes = format!("P5\n# comment\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(pixels);
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn pixel_endpoints_map_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        write_raw_pgm(&dir.path().join("a.pgm"), 2, 1, &[0, 255]);
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.images[0].1.data(), &[-1.0, 1.0]);
        assert_eq!(ds.dims(), (1, 2));
    }

    #[test]
    fn empty_directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no images found"), "{err}");
    }

    #[test]
    fn mixed_dimensions_error() {
        let dir = tempfile::tempdir().unwrap();
        write_raw_pgm(&dir.path().join("a.pgm"), 2, 2, &[0; 4]);
        write_raw_pgm(&dir.path().join("b.pgm"), 3, 1, &[0; 3]);
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("mixed dimensions"), "{err}");
    }

    #[test]
    fn truncated_pgm_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_raw_pgm(&dir.path().join("a.pgm"), 4, 4, &[0; 5]);
        assert!(load_dataset(dir.path())
            .unwrap_err()
            .to_string()
            .contains("truncated"));
    }

    #[test]
    fn png_and_gsl1_load_sorted() {
        let dir = tempfile::tempdir().unwrap();
        {
            let f = fs::File::create(dir.path().join("b.png")).unwrap();
            let mut enc = png::Encoder::new(f, 2, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[255, 0]).unwrap();
        }
        write_tensor(
            &dir.path().join("a.gsl1"),
            &Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap(),
        )
        .unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.images[0].0, "a.gsl1");
        assert_eq!(ds.images[1].1.data(), &[1.0, -1.0]);
        assert_eq!(ds.images[0].1.shape(), &[1, 1, 2]);
    }

    #[test]
    fn pgm_round_trip_and_synthetic_determinism() {
        let a = synthetic_blobs(10, 16, 7).unwrap();
        assert_eq!(a, synthetic_blobs(10, 16, 7).unwrap());
        assert_ne!(
            a.images[0].1,
            synthetic_blobs(10, 16, 8).unwrap().images[0].1
        );
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&a, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        for ((ia, ta), (ib, tb)) in a.images.iter().zip(&back.images) {
            assert_eq!(ia, ib);
            assert_eq!(to_pixels(ta.data()), to_pixels(tb.data()));
        }
        assert_eq!(back.batch(&[3, 3]).unwrap().shape(), &[2, 1, 16, 16]);
    }
}
