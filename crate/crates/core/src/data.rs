//! Procedural images, binary PPM I/O and the 1D regression task.
//!
//! Every generator returns values already quantized to multiples of 1/255,
//! so writing an image to PPM and reading it back is lossless.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

pub type Rgb = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    /// Vertical bands `scale` pixels wide.
    Stripes,
    /// Squares `scale` pixels wide.
    Checker,
    /// Gaussian spots of radius about `scale`.
    Blobs,
    /// Bilinear value noise on a grid of `scale`-pixel cells.
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    pub kind: TextureKind,
    pub scale: usize,
    pub palette: [Rgb; 2],
    pub seed: u64,
}

/// Rounds to the nearest multiple of 1/255 after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> Elem {
    to_byte(v) as Elem / 255.0
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Image built from a per-pixel mixing weight between two colors.
fn mix_image(size: usize, palette: &[Rgb; 2], weight: impl Fn(usize, usize) -> f64) -> Tensor {
    let mut t = Tensor::zeros(vec![3, size, size]);
    let d = t.data_mut();
    for y in 0..size {
        for x in 0..size {
            let w = weight(x, y).clamp(0.0, 1.0);
            for c in 0..3 {
                d[(c * size + y) * size + x] = quantize(palette[0][c] * (1.0 - w) + palette[1][c] * w);
            }
        }
    }
    t
}

pub fn gen_texture(spec: &TextureSpec, size: usize) -> Result<Tensor> {
    if size < 16 {
        return Err(Error::Config(format!("texture size must be ≥ 16, got {size}")));
    }
    let s = spec.scale;
    if s == 0 {
        return Err(Error::Config("texture scale must be positive".into()));
    }
    if matches!(spec.kind, TextureKind::Stripes | TextureKind::Checker) && size % s != 0 {
        return Err(Error::Config(format!("scale {s} does not divide image size {size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let img = match spec.kind {
        // bands start half a period in, so a row crosses exactly size/s
        // boundaries (for even s)
        TextureKind::Stripes => mix_image(size, &spec.palette, |x, _| (((x + s / 2) / s) % 2) as f64),
        TextureKind::Checker => mix_image(size, &spec.palette, |x, y| ((x / s + y / s) % 2) as f64),
        TextureKind::Blobs => {
            let count = (size / s).pow(2).max(1);
            let centers: Vec<(f64, f64)> = (0..count)
                .map(|_| (rng.random::<f64>() * size as f64, rng.random::<f64>() * size as f64))
                .collect();
            let r2 = 2.0 * (s as f64 / 2.0).powi(2);
            mix_image(size, &spec.palette, |x, y| {
                centers
                    .iter()
                    .map(|&(cx, cy)| (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / r2).exp())
                    .fold(0.0, f64::max)
            })
        }
        TextureKind::Noise => {
            let cells = size.div_ceil(s) + 1;
            let grid: Vec<f64> = (0..cells * cells).map(|_| rng.random()).collect();
            mix_image(size, &spec.palette, |x, y| {
                let (fx, fy) = (x as f64 / s as f64, y as f64 / s as f64);
                let (ix, iy) = (fx as usize, fy as usize);
                let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                let at = |i: usize, j: usize| grid[j * cells + i];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                top * (1.0 - ty) + bottom * ty
            })
        }
    };
    Ok(img)
}

/// Smooth content images: a random linear color gradient with a few
/// soft-edged ellipses and rectangles on top.
pub fn gen_content(n: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::Config("need at least one content image".into()));
    }
    if size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| content_image(&mut rng, size)).collect())
}

fn content_image(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let color = |rng: &mut ChaCha8Rng| -> Rgb { [rng.random(), rng.random(), rng.random()] };
    let (c0, c1) = (color(rng), color(rng));
    let angle = rng.random::<f64>() * 2.0 * PI;
    let (dx, dy) = (angle.cos(), angle.sin());
    let n = size as f64;

    struct Shape {
        ellipse: bool,
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        color: Rgb,
    }
    let shapes: Vec<Shape> = (0..rng.random_range(2..=4))
        .map(|_| Shape {
            ellipse: rng.random_bool(0.5),
            cx: rng.random::<f64>() * n,
            cy: rng.random::<f64>() * n,
            rx: (0.1 + 0.25 * rng.random::<f64>()) * n,
            ry: (0.1 + 0.25 * rng.random::<f64>()) * n,
            color: color(rng),
        })
        .collect();
    let edge = (n / 32.0).max(0.5);

    let mut t = Tensor::zeros(vec![3, size, size]);
    let d = t.data_mut();
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let g = (((px / n - 0.5) * dx + (py / n - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
            let mut rgb: Rgb = std::array::from_fn(|c| c0[c] * (1.0 - g) + c1[c] * g);
            for s in &shapes {
                let (ux, uy) = ((px - s.cx) / s.rx, (py - s.cy) / s.ry);
                // signed distance in pixels, roughly; negative inside
                let dist = if s.ellipse {
                    ((ux * ux + uy * uy).sqrt() - 1.0) * s.rx.min(s.ry)
                } else {
                    ((ux.abs() - 1.0) * s.rx).max((uy.abs() - 1.0) * s.ry)
                };
                let cover = (0.5 - dist / (2.0 * edge)).clamp(0.0, 1.0);
                for c in 0..3 {
                    rgb[c] = rgb[c] * (1.0 - cover) + s.color[c] * cover;
                }
            }
            for c in 0..3 {
                d[(c * size + y) * size + x] = quantize(rgb[c]);
            }
        }
    }
    t
}

/// Interleaved 8-bit RGB (row-major, `width·height·3` bytes) of a 3×H×W image.
pub fn to_rgb_bytes(img: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = img.chw()?;
    if c != 3 {
        return Err(Error::shape(format!("RGB export needs 3 channels, got {c}")));
    }
    let d = img.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(to_byte(d[(ch * h + y) * w + x] as f64));
            }
        }
    }
    Ok(out)
}

pub fn from_rgb_bytes(bytes: &[u8], width: usize, height: usize) -> Result<Tensor> {
    if bytes.len() != width * height * 3 {
        return Err(Error::shape(format!("{width}×{height} RGB needs {} bytes, got {}", width * height * 3, bytes.len())));
    }
    Tensor::new(
        vec![3, height, width],
        (0..3 * height * width)
            .map(|i| {
                let (ch, y, x) = (i / (height * width), (i / width) % height, i % width);
                bytes[(y * width + x) * 3 + ch] as Elem / 255.0
            })
            .collect(),
    )
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (_, h, w) = img.chw()?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(to_rgb_bytes(img)?);
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |offset: usize, message: &str| Error::Format { offset: offset as u64, message: message.into() };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad(0, "not a binary PPM (expected P6 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and '#' comments between header fields
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad(pos, "expected a header number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(start, "header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad(pos, "missing whitespace after header"));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad(pos, "only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(bad(pos, "empty image"));
    }
    let need = w * h * 3;
    if bytes.len() - pos != need {
        return Err(bad(pos, &format!("expected {need} pixel bytes, found {}", bytes.len() - pos)));
    }
    from_rgb_bytes(&bytes[pos..], w, h)
}

pub fn save_ppm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionKind {
    ConstantPair,
    SinePair,
}

/// Inputs are `N` evenly spaced coordinates in `[0, 1]`, laid out as a
/// 1×1×N tensor; the two targets have the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Regression1DTask {
    pub inputs: Tensor,
    pub t0: Tensor,
    pub t1: Tensor,
}

pub fn make_regression_task(kind: RegressionKind, n: usize) -> Result<Regression1DTask> {
    if n < 16 {
        return Err(Error::Config(format!("regression task needs N ≥ 16, got {n}")));
    }
    let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let make = |f: &dyn Fn(f64) -> f64| Tensor::new(vec![1, 1, n], xs.iter().map(|&x| f(x) as Elem).collect());
    let (t0, t1) = match kind {
        RegressionKind::ConstantPair => (make(&|_| 0.2)?, make(&|_| 0.8)?),
        RegressionKind::SinePair => (
            make(&|x| 0.5 + 0.5 * (2.0 * PI * x).sin())?,
            make(&|x| 0.5 + 0.5 * (2.0 * PI * x + PI / 2.0).sin())?,
        ),
    };
    Ok(Regression1DTask { inputs: make(&|x| x)?, t0, t1 })
}

/// Mean, over rows and images, of the number of horizontal neighbours
/// whose luminance falls on opposite sides of the image's mean luminance.
pub fn transition_count(images: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for img in images {
        let (c, h, w) = img.chw()?;
        if c != 3 {
            return Err(Error::shape("transition count needs RGB images"));
        }
        let d = img.data();
        let lum: Vec<f64> = (0..h * w)
            .map(|i| 0.299 * d[i] as f64 + 0.587 * d[h * w + i] as f64 + 0.114 * d[2 * h * w + i] as f64)
            .collect();
        let mean = lum.iter().sum::<f64>() / lum.len() as f64;
        for y in 0..h {
            let row = &lum[y * w..(y + 1) * w];
            total += row.windows(2).filter(|p| (p[0] > mean) != (p[1] > mean)).count() as f64;
            rows += 1;
        }
    }
    Ok(total / rows as f64)
}
