//! Image IO (binary PPM natively, PNG through the `png` crate), seeded
//! synthetic images, and dataset assembly.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, ImageTensor, Real, Tensor};

/// Interleaved 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{width}x{height} RGB raster needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_image<T: Real>(img: &ImageTensor<T>) -> Self {
        let (h, w) = (img.height(), img.width());
        let src = img.tensor().data();
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            for c in 0..3 {
                let v = src[c * h * w + i].as_f64().clamp(0.0, 1.0);
                data.push((v * 255.0).round() as u8);
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    pub fn to_image<T: Real>(&self) -> ImageTensor<T> {
        let n = self.width * self.height;
        let t = Tensor::from_fn([3, self.height, self.width], |i| {
            T::lit(self.data[(i % n) * 3 + i / n] as f64 / 255.0)
        });
        ImageTensor::new(t).expect("three channels")
    }
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Parses a binary (P6) PPM with maxval up to 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos) != Some(b"P6") {
        return Err(Error::Image("not a binary PPM (P6)".into()));
    }
    let mut field = |name: &str| -> Result<usize> {
        ppm_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Image(format!("PPM header lacks a valid {name}")))
    };
    let (w, h, maxval) = (field("width")?, field("height")?, field("maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!("unsupported PPM maxval {maxval}")));
    }
    pos += 1;
    let need = w * h * 3;
    let body = bytes.get(pos..pos + need).ok_or_else(|| Error::Image("truncated PPM payload".into()))?;
    let data = body.iter().map(|&b| ((b as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8).collect();
    Rgb8::new(w, h, data)
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<Rgb8> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => px.to_vec(),
        png::ColorType::Rgba => px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => px.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err(Error::Image("unexpanded palette PNG".into())),
    };
    Rgb8::new(w, h, data)
}

pub fn encode_png(img: &Rgb8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        w.write_image_data(&img.data).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a `.ppm` or `.png` file.
pub fn read_image(path: impl AsRef<Path>) -> Result<Rgb8> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if is_png(path) {
        decode_png(&bytes)
    } else {
        decode_ppm(&bytes)
    }
}

/// Writes PNG for a `.png` extension and binary PPM otherwise.
pub fn write_image(path: impl AsRef<Path>, img: &Rgb8) -> Result<()> {
    let path = path.as_ref();
    let bytes = if is_png(path) { encode_png(img)? } else { encode_ppm(img) };
    fs::File::create(path)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            w.write_all(&bytes)?;
            w.flush()
        })
        .map_err(|e| Error::io(path, e))
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut odd = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            odd = !odd;
        }
        j = i;
    }
    odd
}

/// Polygon coverage samples per pixel axis.
const SUPERSAMPLE: usize = 4;

/// Linear-gradient background overlaid with random colored polygons, each
/// carrying its own mild gradient.
pub fn synthetic_image(seed: u64, size: usize) -> ImageTensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let mut px = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = 0.5 + ((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) / std::f64::consts::SQRT_2;
            for c in 0..3 {
                px[y * size + x][c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = rng.random_range(3..=6);
    for _ in 0..shapes {
        let (cx, cy) = (rng.random_range(0.1..0.9) * s, rng.random_range(0.1..0.9) * s);
        let radius = rng.random_range(0.1..0.35) * s;
        let n = rng.random_range(3..=7);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let poly: Vec<(f64, f64)> = angles
            .iter()
            .map(|&a| {
                let r = radius * rng.random_range(0.5..1.0);
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let color = random_color(&mut rng);
        let shade = rng.random_range(-0.3..0.3);
        for y in 0..size {
            for x in 0..size {
                let k = SUPERSAMPLE as f64;
                let hits = (0..SUPERSAMPLE * SUPERSAMPLE)
                    .filter(|i| {
                        let fx = x as f64 + ((i % SUPERSAMPLE) as f64 + 0.5) / k;
                        let fy = y as f64 + ((i / SUPERSAMPLE) as f64 + 0.5) / k;
                        inside(&poly, fx, fy)
                    })
                    .count();
                let cover = hits as f64 / (k * k);
                if cover > 0.0 {
                    let g = shade * (y as f64 + 0.5 - cy) / radius;
                    for c in 0..3 {
                        let v = (color[c] + g).clamp(0.0, 1.0);
                        px[y * size + x][c] = px[y * size + x][c] * (1.0 - cover) + v * cover;
                    }
                }
            }
        }
    }
    let n = size * size;
    let t = Tensor::from_fn([3, size, size], |i| px[i % n][i / n].clamp(0.0, 1.0) as f32);
    ImageTensor::new(t).expect("three channels")
}

/// Image split by a random straight line into two flat, well separated
/// colors with mild noise, and its per-pixel labels (0 or 1, row-major).
pub fn two_region_image(seed: u64, size: usize) -> (ImageTensor<f32>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let dark: [f64; 3] = [rng.random_range(0.0..0.35), rng.random_range(0.0..0.35), rng.random_range(0.0..0.35)];
    let light: [f64; 3] = [rng.random_range(0.65..1.0), rng.random_range(0.65..1.0), rng.random_range(0.65..1.0)];
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let offset = rng.random_range(-0.25..0.25) * s;
    let mut labels = vec![0u8; size * size];
    let mut px = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let d = (x as f64 + 0.5 - s / 2.0) * theta.cos() + (y as f64 + 0.5 - s / 2.0) * theta.sin() - offset;
            let lab = u8::from(d > 0.0);
            labels[y * size + x] = lab;
            let base = if lab == 1 { light } else { dark };
            for c in 0..3 {
                let noise = rng.random_range(-0.05..0.05);
                px[(c * size + y) * size + x] = (base[c] + noise).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let img = ImageTensor::new(Tensor::new([3, size, size], px).expect("sized buffer")).expect("three channels");
    (img, labels)
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { count: usize, seed: u64 },
    Directory(PathBuf),
}

impl DataSource {
    /// `synthetic` or `synthetic:<count>` selects generated images seeded by
    /// `seed`; anything else is a directory.
    pub fn parse(spec: &str, default_count: usize, seed: u64) -> Result<Self> {
        if spec == "synthetic" {
            return Ok(Self::Synthetic {
                count: default_count,
                seed,
            });
        }
        if let Some(n) = spec.strip_prefix("synthetic:") {
            let count = n
                .parse()
                .ok()
                .filter(|&c| c > 0)
                .ok_or_else(|| Error::Config(format!("bad synthetic image count {n:?}")))?;
            return Ok(Self::Synthetic { count, seed });
        }
        Ok(Self::Directory(PathBuf::from(spec)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageTensor<f32>,
}

/// Center square crop resized (antialiased) to `size x size`.
pub fn square_crop(img: &ImageTensor<f32>, size: usize) -> Result<ImageTensor<f32>> {
    let (h, w) = (img.height(), img.width());
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let src = img.tensor().data();
    let t = Tensor::from_fn([3, side, side], |i| {
        let (c, y, x) = (i / (side * side), (i / side) % side, i % side);
        src[(c * h + y0 + y) * w + x0 + x]
    });
    let cropped = ImageTensor::new(t)?;
    if side == size {
        Ok(cropped)
    } else {
        resize_bilinear(&cropped, size, size, true)
    }
}

/// Image files (`.ppm`, `.png`) directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png"))
        })
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no .ppm or .png images"),
        ));
    }
    Ok(out)
}

/// Square images of side `size` with stable ids.
pub fn load_samples(source: &DataSource, size: usize) -> Result<Vec<Sample>> {
    match source {
        DataSource::Synthetic { count, seed } => Ok((0..*count)
            .map(|i| Sample {
                id: format!("synth_{i:04}"),
                image: synthetic_image(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size),
            })
            .collect()),
        DataSource::Directory(dir) => list_images(dir)?
            .into_iter()
            .map(|p| {
                let id = p
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Image(format!("unusable file name {}", p.display())))?
                    .to_string();
                let image = square_crop(&read_image(&p)?.to_image(), size)?;
                Ok(Sample { id, image })
            })
            .collect(),
    }
}
