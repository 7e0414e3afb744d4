//! Procedural one-to-many paired datasets: clean scenes, parametric
//! low-light degradation, and several plausible exposure variants per
//! scene as targets. Also bit-exact binary PPM (P6) image I/O and the
//! JSON-lines dataset manifest.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::ndtensor::{Scalar, Tensor};
use crate::variational::{stream_id, EpsilonSource};
use crate::{Error, Result};

/// One dataset entry: a degraded input and >= 1 plausible references.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub scene_id: u64,
    pub x: Tensor<T>,
    pub targets: Vec<Tensor<T>>,
}

/// Parametric low-light degradation: x = clamp(cast * gain * y^gamma + noise).
#[derive(Debug, Clone)]
pub struct DegradeParams {
    pub gamma: f64,
    pub gain: f64,
    pub noise_sigma: f64,
    pub color_cast: [f64; 3],
}

impl Default for DegradeParams {
    fn default() -> Self {
        DegradeParams {
            gamma: 2.0,
            gain: 0.3,
            noise_sigma: 0.02,
            color_cast: [1.0, 1.0, 1.0],
        }
    }
}

/// Deterministic procedural scenes: a smooth gradient base, random
/// rectangles and disks, and mild texture noise, normalized per image to
/// the full [0,1] range.
pub fn gen_clean<T: Scalar>(seed: u64, count: usize, size: usize) -> Result<Vec<Tensor<T>>> {
    if size < 16 {
        return Err(Error::Domain(format!("scene size must be >= 16, got {size}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream_id("scenes"));
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut img = vec![0.0f64; 3 * size * size];
        // Smooth per-channel gradient base.
        let gx: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let gy: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let off: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    img[(c * size + y) * size + x] = off[c]
                        + gx[c] * x as f64 / size as f64
                        + gy[c] * y as f64 / size as f64;
                }
            }
        }
        // Random rectangles.
        for _ in 0..rng.gen_range(2..6) {
            let x0 = rng.gen_range(0..size);
            let y0 = rng.gen_range(0..size);
            let w = rng.gen_range(size / 8..size / 2);
            let h = rng.gen_range(size / 8..size / 2);
            let v: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            for c in 0..3 {
                for y in y0..(y0 + h).min(size) {
                    for x in x0..(x0 + w).min(size) {
                        img[(c * size + y) * size + x] = v[c];
                    }
                }
            }
        }
        // Random disks.
        for _ in 0..rng.gen_range(1..4) {
            let cx = rng.gen_range(0..size) as f64;
            let cy = rng.gen_range(0..size) as f64;
            let r = rng.gen_range(size as f64 / 16.0..size as f64 / 4.0);
            let v: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        if d < r {
                            img[(c * size + y) * size + x] = v[c];
                        }
                    }
                }
            }
        }
        // Texture noise.
        for v in img.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        // Normalize to the full dynamic range.
        let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-9);
        let data: Vec<T> = img.iter().map(|&v| T::of_f64((v - lo) / span)).collect();
        scenes.push(Tensor::new(vec![3, size, size], data)?);
    }
    Ok(scenes)
}

/// Apply the low-light degradation model.
pub fn degrade<T: Scalar>(
    y: &Tensor<T>,
    p: &DegradeParams,
    eps: &mut EpsilonSource,
) -> Result<Tensor<T>> {
    if y.shape().len() != 3 || y.shape()[0] != 3 {
        return Err(Error::Domain(format!("degrade expects [3,H,W], got {:?}", y.shape())));
    }
    let noise: Tensor<T> = eps.draw(y.shape());
    let hw = y.shape()[1] * y.shape()[2];
    let out = Tensor::from_fn(y.shape(), |i| {
        let c = i / hw;
        let v = y.data()[i].as_f64().max(0.0);
        let d = p.color_cast[c] * p.gain * v.powf(p.gamma)
            + p.noise_sigma * noise.data()[i].as_f64();
        T::of_f64(d.clamp(0.0, 1.0))
    });
    Ok(out)
}

/// Per-scene: one degraded input, `n_targets` exposure variants of the
/// clean scene as references. Targets are scaled so the brightest variant
/// stays within [0,1]; adjacent variants differ by the spread gains, e.g.
/// {1-s, 1+s} for two targets.
pub fn gen_one_to_many<T: Scalar>(
    seed: u64,
    count: usize,
    size: usize,
    n_targets: usize,
    exposure_spread: f64,
) -> Result<Vec<Sample<T>>> {
    if n_targets == 0 {
        return Err(Error::Domain("n_targets must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&exposure_spread) {
        return Err(Error::Domain("exposure_spread must be in [0,1)".into()));
    }
    let scenes = gen_clean::<T>(seed, count, size)?;
    let mut prng = ChaCha12Rng::seed_from_u64(seed);
    prng.set_stream(stream_id("degrade-params"));
    let mut eps = EpsilonSource::with_label(seed, "degrade-noise");

    let s = exposure_spread;
    let norm = 1.0 / (1.0 + s);
    let gains: Vec<f64> = if n_targets == 1 {
        vec![1.0]
    } else {
        (0..n_targets)
            .map(|t| 1.0 - s + 2.0 * s * t as f64 / (n_targets - 1) as f64)
            .collect()
    };

    let mut out = Vec::with_capacity(count);
    for (i, clean) in scenes.into_iter().enumerate() {
        let params = DegradeParams {
            gamma: prng.gen_range(1.5..2.5),
            gain: prng.gen_range(0.2..0.4),
            noise_sigma: 0.02,
            color_cast: [
                prng.gen_range(0.7..1.0),
                prng.gen_range(0.7..1.0),
                prng.gen_range(0.7..1.0),
            ],
        };
        let x = degrade(&clean, &params, &mut eps)?;
        let targets: Vec<Tensor<T>> = gains
            .iter()
            .map(|&g| clean.scale(T::of_f64(g * norm)))
            .collect();
        out.push(Sample {
            scene_id: i as u64,
            x,
            targets,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Binary PPM (P6, 8-bit) I/O, bit-exact.
// ---------------------------------------------------------------------

/// Write a [3,H,W] image as binary PPM, clamping to [0,1] and quantizing
/// to 8 bits.
pub fn write_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    if img.shape().len() != 3 || img.shape()[0] != 3 {
        return Err(Error::Domain(format!("write_ppm expects [3,H,W], got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].as_f64().clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct PpmParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PpmParser<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skip whitespace and '#' comments between header tokens.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err("expected a decimal integer"))
    }
}

/// Read a binary PPM written by `write_ppm` (or any P6 file with
/// maxval 255) into a [3,H,W] tensor with values in [0,1].
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let mut p = PpmParser {
        bytes: &bytes,
        pos: 0,
    };
    if p.token()? != b"P6" {
        return Err(p.err("not a P6 PPM file"));
    }
    let w = p.number()?;
    let h = p.number()?;
    let maxval = p.number()?;
    if maxval != 255 {
        return Err(p.err(&format!("unsupported depth: maxval {maxval}, only 255 is supported")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(p.err("missing header/payload separator"));
    }
    p.pos += 1;
    let need = 3 * w * h;
    let payload = &bytes[p.pos..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: need {need} bytes, have {}", payload.len()),
        });
    }
    let mut data = vec![T::zero(); need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let b = payload[(y * w + x) * 3 + c];
                data[(c * h + y) * w + x] = T::of_f64(b as f64 / 255.0);
            }
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(Error::Tensor)
}

// ---------------------------------------------------------------------
// Manifest (JSON lines).
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub scene_id: u64,
    pub x_path: String,
    pub target_paths: Vec<String>,
}

/// Write samples as PPM files plus a JSON-lines manifest; returns the
/// manifest path.
pub fn save_dataset<T: Scalar>(dir: &Path, samples: &[Sample<T>]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = String::new();
    for s in samples {
        let x_name = format!("x_{:06}.ppm", s.scene_id);
        write_ppm(&dir.join(&x_name), &s.x)?;
        let mut target_paths = Vec::new();
        for (t, y) in s.targets.iter().enumerate() {
            let y_name = format!("y_{:06}_{t}.ppm", s.scene_id);
            write_ppm(&dir.join(&y_name), y)?;
            target_paths.push(y_name);
        }
        let rec = ManifestRecord {
            scene_id: s.scene_id,
            x_path: x_name,
            target_paths,
        };
        manifest.push_str(&serde_json::to_string(&rec).expect("manifest record"));
        manifest.push('\n');
    }
    fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            offset: i,
            msg: format!("manifest line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Load all images referenced by a manifest, resolving paths relative to
/// the manifest's directory.
pub fn load_dataset<T: Scalar>(manifest_path: &Path) -> Result<Vec<Sample<T>>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    read_manifest(manifest_path)?
        .into_iter()
        .map(|rec| {
            let x = read_ppm(&dir.join(&rec.x_path))?;
            let targets = rec
                .target_paths
                .iter()
                .map(|p| read_ppm(&dir.join(p)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Sample {
                scene_id: rec.scene_id,
                x,
                targets,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_scenes_deterministic_and_full_range() {
        let a = gen_clean::<f64>(5, 3, 16).unwrap();
        let b = gen_clean::<f64>(5, 3, 16).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x, y);
        }
        for img in &a {
            let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo < 0.1 && hi > 0.9);
        }
        assert!(gen_clean::<f64>(5, 0, 16).unwrap().is_empty());
        assert!(gen_clean::<f64>(5, 1, 8).is_err());
    }

    #[test]
    fn identity_degradation() {
        let y = gen_clean::<f64>(1, 1, 16).unwrap().pop().unwrap();
        let p = DegradeParams {
            gamma: 1.0,
            gain: 1.0,
            noise_sigma: 0.0,
            color_cast: [1.0; 3],
        };
        let mut eps = EpsilonSource::new(0, 0);
        let x = degrade(&y, &p, &mut eps).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn gamma_gain_arithmetic_and_darkening() {
        let y = Tensor::<f64>::ones(&[3, 16, 16]);
        let p = DegradeParams {
            gamma: 2.0,
            gain: 0.5,
            noise_sigma: 0.0,
            color_cast: [1.0; 3],
        };
        let mut eps = EpsilonSource::new(0, 0);
        let x = degrade(&y, &p, &mut eps).unwrap();
        assert!(x.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(x.mean() < y.mean());
    }

    #[test]
    fn bimodal_targets_mean_ratio() {
        let samples = gen_one_to_many::<f64>(3, 4, 32, 2, 0.3).unwrap();
        for s in &samples {
            assert_eq!(s.targets.len(), 2);
            let ratio = s.targets[1].mean() / s.targets[0].mean();
            assert!((ratio - 1.3 / 0.7).abs() < 1e-9, "ratio {ratio}");
            for t in &s.targets {
                assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn single_target_degenerates() {
        let samples = gen_one_to_many::<f64>(3, 2, 16, 1, 0.0).unwrap();
        assert!(samples.iter().all(|s| s.targets.len() == 1));
    }

    #[test]
    fn minimal_ppm_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.ppm");
        let img = Tensor::<f64>::ones(&[3, 1, 1]);
        write_ppm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
    }

    #[test]
    fn ppm_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = gen_clean::<f64>(9, 1, 16).unwrap().pop().unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm::<f64>(&path).unwrap();
        assert!(img.max_abs_diff(&back) <= 0.5 / 255.0 + 1e-12);
        // Re-reading and re-writing is bit-exact.
        let path2 = dir.path().join("img2.ppm");
        write_ppm(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn ppm_rejects_unsupported_depth_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let deep = dir.path().join("deep.ppm");
        fs::write(&deep, b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").unwrap();
        let err = read_ppm::<f64>(&deep).unwrap_err();
        assert!(err.to_string().contains("unsupported depth"));

        let trunc = dir.path().join("trunc.ppm");
        fs::write(&trunc, b"P6\n2 2\n255\n\xff").unwrap();
        let err = read_ppm::<f64>(&trunc).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn dataset_bytes_are_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let s1 = gen_one_to_many::<f32>(7, 2, 16, 2, 0.3).unwrap();
        let s2 = gen_one_to_many::<f32>(7, 2, 16, 2, 0.3).unwrap();
        let m1 = save_dataset(d1.path(), &s1).unwrap();
        let m2 = save_dataset(d2.path(), &s2).unwrap();
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
        for entry in fs::read_dir(d1.path()).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                fs::read(d1.path().join(&name)).unwrap(),
                fs::read(d2.path().join(&name)).unwrap(),
                "{name:?}"
            );
        }
        let loaded = load_dataset::<f32>(&m1).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].targets.len(), 2);
    }
}
