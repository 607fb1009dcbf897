//! Image ingestion: binary PPM/PGM files, patch sampling, reflect padding
//! and a synthetic image generator for self-contained runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// A decoded image, `(1, 3, h, w)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub name: String,
    pub pixels: Tensor<T>,
}

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.into() }
}

/// Reads the next whitespace-separated header token, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
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

/// Decodes binary PPM (`P6`) or PGM (`P5`) bytes; grey images are
/// replicated to three channels.
pub fn decode_pnm<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos).ok_or_else(|| image_err(path, "empty file"))?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(image_err(path, format!("unsupported magic {other:?}, expected P5 or P6"))),
    };
    let mut field = |what: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos).ok_or_else(|| image_err(path, format!("missing {what}")))?;
        tok.parse().map_err(|_| image_err(path, format!("bad {what} {tok:?}")))
    };
    let (w, h, maxval) = (field("width")?, field("height")?, field("maxval")?);
    if w == 0 || h == 0 {
        return Err(image_err(path, "zero-sized image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(image_err(path, format!("maxval {maxval} is not an 8-bit format")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * channels;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| image_err(path, "truncated raster"))?;
    let scale = T::of(maxval as f64);
    let plane = w * h;
    let mut out = Tensor::zeros(Shape::new(1, 3, h, w));
    for (i, px) in raster.chunks(channels).enumerate() {
        for c in 0..3 {
            out.data_mut()[c * plane + i] = T::of(px[c.min(channels - 1)] as f64) / scale;
        }
    }
    Ok(out)
}

pub fn read_pnm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| image_err(path, e.to_string()))?;
    decode_pnm(&bytes, path)
}

/// Writes the first batch item as binary PPM, rounding to 8 bits.
pub fn write_ppm<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::invalid("write_ppm", format!("expected 3 channels, got {}", s.c)));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    let plane = s.plane();
    for i in 0..plane {
        for c in 0..3 {
            let v = (t.data()[c * plane + i].as_f64() * 255.0).round().clamp(0.0, 255.0);
            bytes.push(v as u8);
        }
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// All `.ppm`/`.pgm` files in `dir`, sorted by file name.
pub fn load_images<T: Scalar>(dir: &Path) -> Result<Vec<Image<T>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| image_err(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(image_err(dir, "no .ppm or .pgm images found"));
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok(Image { name, pixels: read_pnm(p)? })
        })
        .collect()
}

/// Top-left offset of a `patch`-sized crop.
pub fn crop_offset<R: Rng>(h: usize, w: usize, patch: usize, rng: &mut R) -> (usize, usize) {
    (rng.gen_range(0..=h - patch), rng.gen_range(0..=w - patch))
}

pub fn crop<T: Scalar>(t: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if top + h > s.h || left + w > s.w {
        return Err(Error::invalid("crop", format!("{h}x{w} at ({top}, {left}) exceeds {}x{}", s.h, s.w)));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..h {
                let src = s.index(n, c, top + i, left);
                let dst = out.shape().index(n, c, i, 0);
                out.data_mut()[dst..dst + w].copy_from_slice(&t.data()[src..src + w]);
            }
        }
    }
    Ok(out)
}

/// `count` random crops, taken round-robin over the images; deterministic
/// under `seed`. Images smaller than `patch` are skipped.
pub fn sample_patches<T: Scalar>(images: &[Image<T>], patch: usize, count: usize, seed: u64) -> Result<Vec<Tensor<T>>> {
    let usable: Vec<&Image<T>> =
        images.iter().filter(|im| im.pixels.shape().h >= patch && im.pixels.shape().w >= patch).collect();
    if usable.is_empty() {
        return Err(Error::invalid("sample_patches", format!("no image is at least {patch}x{patch}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let im = &usable[i % usable.len()].pixels;
            let (top, left) = crop_offset(im.shape().h, im.shape().w, patch, &mut rng);
            crop(im, top, left, patch, patch)
        })
        .collect()
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Pads bottom/right by mirror reflection up to the next multiple.
pub fn pad_reflect<T: Scalar>(t: &Tensor<T>, multiple: usize) -> Tensor<T> {
    let s = t.shape();
    let up = |v: usize| v.div_ceil(multiple) * multiple;
    let (h, w) = (up(s.h), up(s.w));
    if (h, w) == (s.h, s.w) {
        return t.clone();
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..h {
                let si = reflect(i as isize, s.h);
                for j in 0..w {
                    *out.at_mut(n, c, i, j) = t.at(n, c, si, reflect(j as isize, s.w));
                }
            }
        }
    }
    out
}

/// Smooth random RGB image: a colour gradient plus a few soft blobs and a
/// low-frequency wave, quantized to 8 bits so it survives a PPM round trip.
pub fn synthetic_image<T: Scalar>(h: usize, w: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
    let grad: [[f64; 2]; 3] = std::array::from_fn(|_| [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]);
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.gen_range(2..6))
        .map(|_| {
            let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.4..0.4));
            (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.05..0.3), amp)
        })
        .collect();
    let (fy, fx, phase, wave) = (rng.gen_range(1.0..4.0), rng.gen_range(1.0..4.0), rng.gen_range(0.0..6.3), rng.gen_range(0.0..0.15));
    let mut out = Tensor::zeros(Shape::new(1, 3, h, w));
    for i in 0..h {
        for j in 0..w {
            let (v, u) = (i as f64 / h as f64, j as f64 / w as f64);
            let osc = wave * (std::f64::consts::TAU * (fy * v + fx * u) + phase).sin();
            for c in 0..3 {
                let mut p = base[c] + grad[c][0] * (v - 0.5) + grad[c][1] * (u - 0.5) + osc;
                for (cy, cx, r, amp) in &blobs {
                    let d2 = (v - cy).powi(2) + (u - cx).powi(2);
                    p += amp[c] * (-d2 / (2.0 * r * r)).exp();
                }
                *out.at_mut(0, c, i, j) = T::of((p.clamp(0.0, 1.0) * 255.0).round() / 255.0);
            }
        }
    }
    out
}

/// Writes `count` synthetic images named `img_0000.ppm`, ... into `dir`.
pub fn write_synthetic_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    for i in 0..count {
        let img = synthetic_image::<f64>(size, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        write_ppm(&dir.join(format!("img_{i:04}.ppm")), &img)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_p6() {
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51, 0, 255, 102]);
        let t: Tensor<f64> = decode_pnm(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn grey_is_replicated() {
        let mut bytes = b"P5 1 1 255 ".to_vec();
        bytes.push(51);
        let t: Tensor<f64> = decode_pnm(&bytes, Path::new("g.pgm")).unwrap();
        assert_eq!(t.data(), &[0.2, 0.2, 0.2]);
    }

    #[test]
    fn rejects_bad_files() {
        let p = Path::new("bad.ppm");
        let err = decode_pnm::<f64>(b"P6 1 1 65535 \x00\x00\x00\x00\x00\x00", p).unwrap_err();
        assert!(err.to_string().contains("bad.ppm"));
        assert!(err.to_string().contains("maxval"));
        assert!(decode_pnm::<f64>(b"P3 1 1 255 0 0 0", p).is_err());
        assert!(decode_pnm::<f64>(b"P6 2 2 255 \x00", p).is_err());
        assert!(decode_pnm::<f64>(b"P6 x 2 255 ", p).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = synthetic_image::<f64>(64, 64, 3);
        let path = dir.path().join("a.ppm");
        write_ppm(&path, &img).unwrap();
        let back: Tensor<f64> = read_pnm(&path).unwrap();
        assert_eq!(back.shape(), Shape::new(1, 3, 64, 64));
        assert!(back.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(back.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn crops_are_deterministic() {
        let images = vec![Image { name: "a".into(), pixels: synthetic_image::<f64>(80, 96, 1) }];
        let a = sample_patches(&images, 32, 5, 9).unwrap();
        let b = sample_patches(&images, 32, 5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), Shape::new(1, 3, 32, 32));
        assert!(sample_patches(&images, 128, 1, 0).is_err());
    }

    #[test]
    fn reflect_padding() {
        let t = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_reflect(&t, 4);
        assert_eq!(p.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(&p.data()[..4], &[1.0, 2.0, 3.0, 2.0]);
        assert_eq!(&p.data()[12..], &[1.0, 2.0, 3.0, 2.0]);
        assert_eq!(crop(&p, 0, 0, 1, 3).unwrap(), t);
        let t = Tensor::<f64>::from_vec(Shape::new(1, 1, 3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_reflect(&t, 8);
        let column: Vec<f64> = (0..8).map(|i| p.at(0, 0, i, 0)).collect();
        assert_eq!(column, vec![1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
    }
}
