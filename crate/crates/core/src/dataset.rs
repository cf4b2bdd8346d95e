//! Training data sources: a directory of 8-bit RGB PNGs, or the procedural
//! `synth:N` source for self-contained runs. Pixels are held as u8 and
//! mapped to `[-1, 1]` per batch.

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::{image_from_u8, image_to_u8, Image, ImageBatch};
use rand::Rng as _;
use std::io::Write as _;
use std::path::Path;

/// In-memory image collection with a fixed square resolution.
pub struct Dataset {
    size: usize,
    /// Row-major u8 pixels, size*size*3 bytes per image.
    pixels: Vec<u8>,
    n: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn get(&self, index: usize) -> Image {
        assert!(index < self.n, "image index {index} out of {}", self.n);
        let stride = self.size * self.size * 3;
        image_from_u8(&self.pixels[index * stride..(index + 1) * stride], self.size, self.size)
            .expect("stored stride is consistent")
    }

    /// Gather images into a (batch, h, w, 3) tensor in `[-1, 1]`.
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let mut out = ImageBatch::zeros((indices.len(), self.size, self.size, 3));
        for (b, &i) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), b).assign(&self.get(i));
        }
        out
    }
}

/// Write one image as an 8-bit RGB PNG, atomically (temp file + rename).
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("PNG output needs 3 channels, got {c}")));
    }
    let bytes = image_to_u8(image);
    let mut encoded = Vec::new();
    image::write_buffer_with_format(
        &mut std::io::Cursor::new(&mut encoded),
        &bytes,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Format(format!("encoding {}: {e}", path.display())))?;
    write_atomic(path, &encoded)
}

/// Read one 8-bit RGB PNG back to `[-1, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    image_from_u8(img.as_raw(), h as usize, w as usize)
}

/// Write bytes so that `path` is either absent, its old content, or the new
/// content — never a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))
        .map_err(|e| Error::io(format!("temp file near {}", path.display()), e))?;
    tmp.write_all(bytes)
        .and_then(|()| tmp.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(format!("renaming into {}", path.display()), e.error))?;
    Ok(())
}

/// Load a data source. `spec` is either `synth:N` or a directory of PNGs
/// whose resolution must equal `image_size`.
pub fn load_dataset(spec: &str, image_size: usize) -> Result<Dataset> {
    if let Some(n) = spec.strip_prefix("synth:") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad synthetic size {n:?}")))?;
        return synthetic_dataset(n, image_size);
    }
    load_directory(Path::new(spec), image_size)
}

fn load_directory(dir: &Path, image_size: usize) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no PNG images in {}",
            dir.display()
        )));
    }
    let stride = image_size * image_size * 3;
    let mut pixels = Vec::with_capacity(paths.len() * stride);
    for path in &paths {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if (h as usize, w as usize) != (image_size, image_size) {
            return Err(Error::Shape(format!(
                "{}: {h}x{w} does not match configured resolution {image_size}",
                path.display()
            )));
        }
        pixels.extend_from_slice(img.as_raw());
    }
    Ok(Dataset { size: image_size, n: paths.len(), pixels })
}

/// Procedural images: a two-color diagonal gradient, one filled ellipse, one
/// axis-aligned bar. Deterministic per index.
fn synthetic_dataset(n: usize, image_size: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synth:0 has no images".into()));
    }
    let s = image_size;
    let mut pixels = Vec::with_capacity(n * s * s * 3);
    for index in 0..n {
        let mut rng = derive_rng(index as u64, "dataset.synth");
        let c0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let c1: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let ce: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let cb: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let (cy, cx) = (rng.gen_range(0.25..0.75) * s as f64, rng.gen_range(0.25..0.75) * s as f64);
        let (ry, rx) = (rng.gen_range(0.1..0.3) * s as f64, rng.gen_range(0.1..0.3) * s as f64);
        let bar_row = rng.gen_range(0..s);
        let bar_half = (s / 16).max(1);
        for i in 0..s {
            for j in 0..s {
                let t = (i + j) as f64 / (2 * s - 2) as f64;
                let mut px: [f64; 3] = std::array::from_fn(|k| c0[k] + t * (c1[k] - c0[k]));
                let d = ((i as f64 - cy) / ry).powi(2) + ((j as f64 - cx) / rx).powi(2);
                if d <= 1.0 {
                    for (p, &e) in px.iter_mut().zip(&ce) {
                        *p = 0.2 * *p + 0.8 * e;
                    }
                }
                if i.abs_diff(bar_row) <= bar_half {
                    for (p, &b) in px.iter_mut().zip(&cb) {
                        *p = 0.5 * *p + 0.5 * b;
                    }
                }
                for p in px {
                    pixels.push(p.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    Ok(Dataset { size: image_size, n, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_source_is_deterministic_and_sized() {
        let a = load_dataset("synth:5", 16).unwrap();
        let b = load_dataset("synth:5", 16).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a.image_size(), 16);
        assert_eq!(a.pixels, b.pixels);
        // Image 3 of a larger set matches image 3 of the smaller one.
        let c = load_dataset("synth:4", 16).unwrap();
        assert_eq!(a.get(3), c.get(3));
        // Values live in [-1, 1].
        for &v in a.get(0).iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
        assert!(load_dataset("synth:0", 16).is_err());
        assert!(load_dataset("synth:x", 16).is_err());
    }

    #[test]
    fn synthetic_images_differ_and_batch_stacks() {
        let d = load_dataset("synth:8", 16).unwrap();
        assert_ne!(d.get(0), d.get(1));
        let batch = d.batch(&[0, 3, 3]);
        assert_eq!(batch.dim(), (3, 16, 16, 3));
        assert_eq!(batch.index_axis(ndarray::Axis(0), 1), batch.index_axis(ndarray::Axis(0), 2));
    }

    #[test]
    fn png_round_trip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let d = load_dataset("synth:3", 16).unwrap();
        for i in 0..3 {
            save_png(&d.get(i), &dir.path().join(format!("img_{i:03}.png"))).unwrap();
        }
        let back = load_directory(dir.path(), 16).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.pixels, d.pixels);
        // Single-file loader agrees.
        assert_eq!(load_png(&dir.path().join("img_001.png")).unwrap(), d.get(1));
    }

    #[test]
    fn directory_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path().to_str().unwrap(), 16),
            Err(Error::InvalidArgument(_))
        ));
        let d = load_dataset("synth:1", 16).unwrap();
        save_png(&d.get(0), &dir.path().join("a.png")).unwrap();
        // Wrong configured resolution.
        assert!(matches!(
            load_dataset(dir.path().to_str().unwrap(), 32),
            Err(Error::Shape(_))
        ));
        // Corrupt PNG.
        std::fs::write(dir.path().join("b.png"), b"not a png").unwrap();
        assert!(matches!(
            load_dataset(dir.path().to_str().unwrap(), 16),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"second");
        // No stray temp files left behind.
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
