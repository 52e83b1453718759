//! Synthetic shape dataset: one coloured shape on a noisy background per
//! image, with its ground-truth foreground mask.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::patch_mask::CHANNELS;
use crate::tensor::Tensor;

/// Names of the shape classes, in label order.
pub const SHAPES: [&str; 8] = [
    "disk", "square", "triangle", "ring", "plus", "diamond", "cross", "frame",
];

/// Pixel normalisation applied to every channel: `(v / 255 - MEAN) / STD`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub count: usize,
    pub image_size: usize,
    pub classes: usize,
    /// Fraction of images held out for validation (rounded to whole class rounds).
    pub val_fraction: f64,
    pub seed: u64,
    pub min_foreground: f64,
    pub max_foreground: f64,
    /// Amplitude of uniform per-pixel noise, in 0..255 units.
    pub noise: f64,
    /// Background channels are drawn from `0..background_max`, foreground
    /// channels from `foreground_min..255`, so the shape is always the
    /// brighter region whatever its hue.
    pub background_max: f64,
    pub foreground_min: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            count: 4096,
            image_size: 32,
            classes: 8,
            val_fraction: 0.25,
            seed: 0,
            min_foreground: 0.10,
            max_foreground: 0.60,
            noise: 24.0,
            background_max: 110.0,
            foreground_min: 145.0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes == 0 || self.classes > SHAPES.len() {
            return bad(format!("classes must be in 1..={}, got {}", SHAPES.len(), self.classes));
        }
        if self.count == 0 || !self.count.is_multiple_of(self.classes) {
            return bad(format!(
                "image count {} must be a positive multiple of {} classes",
                self.count, self.classes
            ));
        }
        if !(0.0 < self.background_max && self.background_max <= self.foreground_min && self.foreground_min < 255.0) {
            return bad("colour bounds must satisfy 0 < background_max <= foreground_min < 255".into());
        }
        if self.image_size < 8 {
            return bad(format!("image size {} is too small", self.image_size));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if !(0.0 < self.min_foreground && self.min_foreground < self.max_foreground && self.max_foreground < 1.0) {
            return bad("foreground bounds must satisfy 0 < min < max < 1".into());
        }
        Ok(())
    }

    /// Images in the validation split; always whole rounds of `classes`.
    pub fn val_count(&self) -> usize {
        let rounds = self.count / self.classes;
        let val_rounds = (rounds as f64 * self.val_fraction).round() as usize;
        val_rounds.min(rounds.saturating_sub(1)) * self.classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub id: u64,
    pub label: usize,
    pub split: Split,
    /// Raw RGB bytes, `size * size * 3`, row-major.
    pub rgb: Vec<u8>,
    /// Foreground mask, `size * size`.
    pub foreground: Vec<bool>,
    pub size: usize,
}

impl ToyImage {
    /// Normalised `[H, W, 3]` tensor.
    pub fn tensor(&self) -> Tensor<f32> {
        Tensor::new(
            vec![self.size, self.size, CHANNELS],
            self.rgb
                .iter()
                .map(|&v| ((v as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD) as f32)
                .collect(),
        )
        .expect("rgb buffer matches size")
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground.iter().filter(|&&f| f).count() as f64 / self.foreground.len() as f64
    }
}

/// Membership test of shape `label` at offset `(u, v)` in units of the shape radius.
fn inside(label: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match label {
        0 => u * u + v * v <= 1.0,
        1 => au.max(av) <= 0.8,
        // upward triangle with apex at v = -0.9
        2 => (-0.9..=0.8).contains(&v) && au <= (v + 0.9) / 1.7,
        3 => (0.3..=1.0).contains(&(u * u + v * v)),
        4 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        5 => au + av <= 1.0,
        6 => au.max(av) <= 0.9 && ((u - v).abs() <= 0.4 || (u + v).abs() <= 0.4),
        _ => (0.55..=0.9).contains(&au.max(av)),
    }
}

fn colour(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [(); 3].map(|_| rng.gen_range(lo..hi))
}

/// Image `index` of the dataset described by `spec`; depends only on
/// `(spec, index)`. Labels cycle through the classes so every class gets the
/// same count.
pub fn generate(spec: &ToySpec, index: usize) -> ToyImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let size = spec.image_size;
    let label = index % spec.classes;
    let split = if index >= spec.count - spec.val_count() {
        Split::Val
    } else {
        Split::Train
    };
    let s = size as f64;
    let foreground = loop {
        let r = rng.gen_range(0.18..0.48) * s;
        let cx = rng.gen_range(r..s - r);
        let cy = rng.gen_range(r..s - r);
        let mask: Vec<bool> = (0..size * size)
            .map(|i| {
                let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
                inside(label, (x - cx) / r, (y - cy) / r)
            })
            .collect();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        if (spec.min_foreground..=spec.max_foreground).contains(&frac) {
            break mask;
        }
    };
    let fg = colour(&mut rng, spec.foreground_min, 255.0);
    let bg = colour(&mut rng, 0.0, spec.background_max);
    let mut rgb = Vec::with_capacity(size * size * CHANNELS);
    for &f in &foreground {
        let base = if f { fg } else { bg };
        for c in base {
            let n = if spec.noise > 0.0 {
                rng.gen_range(-spec.noise..spec.noise)
            } else {
                0.0
            };
            rgb.push((c + n).round().clamp(0.0, 255.0) as u8);
        }
    }
    ToyImage {
        id: index as u64,
        label,
        split,
        rgb,
        foreground,
        size,
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub spec: ToySpec,
    pub images: Vec<ToyImage>,
}

impl ToyDataset {
    pub fn generate(spec: ToySpec) -> Result<Self> {
        spec.validate()?;
        let images = (0..spec.count).map(|i| generate(&spec, i)).collect();
        Ok(Self { spec, images })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ToyImage> {
        self.images.iter().filter(move |im| im.split == split)
    }

    /// Write `images/NNNNN.ppm`, `masks/NNNNN.pgm` and `index.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut index = String::from("id,split,label,shape,image,mask,sha256\n");
        for im in &self.images {
            let image_rel = format!("images/{:05}.ppm", im.id);
            let mask_rel = format!("masks/{:05}.pgm", im.id);
            let ppm = encode_pnm(im.size, im.size, &im.rgb, true)?;
            let mask_bytes: Vec<u8> = im.foreground.iter().map(|&f| if f { 255 } else { 0 }).collect();
            let pgm = encode_pnm(im.size, im.size, &mask_bytes, false)?;
            write(&dir.join(&image_rel), &ppm)?;
            write(&dir.join(&mask_rel), &pgm)?;
            let mut h = Sha256::new();
            h.update(&ppm);
            h.update(&pgm);
            index.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                im.id,
                match im.split {
                    Split::Train => "train",
                    Split::Val => "val",
                },
                im.label,
                SHAPES[im.label],
                image_rel,
                mask_rel,
                hex(&h.finalize())
            ));
        }
        write(&dir.join("index.csv"), index.as_bytes())
    }

    /// Read a directory written by [`ToyDataset::save`], verifying checksums.
    /// `spec` is carried along for reference; images come from disk.
    pub fn load(dir: &Path, spec: ToySpec) -> Result<Self> {
        let index_path = dir.join("index.csv");
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut images = Vec::new();
        for (line_no, line) in text.lines().enumerate().skip(1) {
            let bad = |d: &str| Error::format(&index_path, format!("line {}: {d}", line_no + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let id = f[0].parse().map_err(|_| bad("bad id"))?;
            let split = match f[1] {
                "train" => Split::Train,
                "val" => Split::Val,
                _ => return Err(bad("bad split")),
            };
            let label: usize = f[2].parse().map_err(|_| bad("bad label"))?;
            let ppm = fs::read(dir.join(f[4])).map_err(|e| Error::io(dir.join(f[4]), e))?;
            let pgm = fs::read(dir.join(f[5])).map_err(|e| Error::io(dir.join(f[5]), e))?;
            let mut h = Sha256::new();
            h.update(&ppm);
            h.update(&pgm);
            if hex(&h.finalize()) != f[6] {
                return Err(bad("checksum mismatch"));
            }
            let rgb = image::load_from_memory(&ppm)
                .map_err(|e| Error::format(dir.join(f[4]), e.to_string()))?
                .to_rgb8();
            let mask = image::load_from_memory(&pgm)
                .map_err(|e| Error::format(dir.join(f[5]), e.to_string()))?
                .to_luma8();
            if rgb.width() != rgb.height() || mask.dimensions() != rgb.dimensions() {
                return Err(bad("image and mask sizes disagree"));
            }
            images.push(ToyImage {
                id,
                label,
                split,
                size: rgb.width() as usize,
                foreground: mask.into_raw().into_iter().map(|v| v >= 128).collect(),
                rgb: rgb.into_raw(),
            });
        }
        Ok(Self { spec, images })
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Binary PPM (`rgb`) or PGM bytes.
pub fn encode_pnm(width: usize, height: usize, pixels: &[u8], rgb: bool) -> Result<Vec<u8>> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::{ExtendedColorType, ImageEncoder};
    let mut out = Vec::new();
    let (subtype, colour) = if rgb {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(pixels, width as u32, height as u32, colour)
        .map_err(|e| Error::format("<pnm>", e.to_string()))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToySpec {
        ToySpec {
            count: 64,
            ..ToySpec::default()
        }
    }

    #[test]
    fn generation_is_pure() {
        let s = small();
        assert_eq!(generate(&s, 5), generate(&s, 5));
        assert_ne!(generate(&s, 5).rgb, generate(&s, 13).rgb);
    }

    #[test]
    fn stratified_and_bounded() {
        let d = ToyDataset::generate(small()).unwrap();
        let mut counts = [0; 8];
        for im in &d.images {
            counts[im.label] += 1;
            let f = im.foreground_fraction();
            assert!((0.10..=0.60).contains(&f), "{f}");
        }
        assert_eq!(counts, [8; 8]);
        let val: Vec<_> = d.split(Split::Val).collect();
        assert_eq!(val.len(), 16);
        let mut val_counts = [0; 8];
        val.iter().for_each(|im| val_counts[im.label] += 1);
        assert_eq!(val_counts, [2; 8]);
    }

    #[test]
    fn save_load_round_trip() {
        let d = ToyDataset::generate(ToySpec { count: 16, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = ToyDataset::load(dir.path(), d.spec.clone()).unwrap();
        assert_eq!(back.images, d.images);
    }
}
