//! Labelled image sets: CIFAR-10/100 binary ingestion and a seeded synthetic
//! generator.
//!
//! Images are stored `[count, H, W, C]` with values in `[0, 1]`. CIFAR
//! records are channel-planar (all red, then green, then blue, each 32×32
//! row-major); they are interleaved here so that element `(y, x, c)` sits at
//! `(y · 32 + x) · 3 + c`. Pixels are scaled by `1/255` and nothing else.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * CIFAR_CHANNELS;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    /// `[count, H, W, C]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let set = LabeledImageSet {
            images,
            labels,
            num_classes,
        };
        set.validate()?;
        Ok(set)
    }

    /// Range, label and shape invariants.
    pub fn validate(&self) -> Result<()> {
        let shape = self.images.shape();
        if shape.len() != 4 || shape[0] != self.labels.len() || self.labels.is_empty() {
            return Err(Error::Format(format!(
                "images {shape:?} do not match {} labels",
                self.labels.len()
            )));
        }
        if let Some(i) = self
            .images
            .data()
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Format(format!(
                "pixel {i} = {} outside [0, 1]",
                self.images.data()[i]
            )));
        }
        if let Some((i, &y)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &y)| y >= self.num_classes)
        {
            return Err(Error::Format(format!(
                "label {y} of example {i} outside 0..{}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[H, W, C]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gather examples by index into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [h, w, c] = self.image_shape();
        let per = h * w * c;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let images = Tensor::new([indices.len(), h, w, c], data).expect("consistent batch");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }

    /// First `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> LabeledImageSet {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        LabeledImageSet {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }
}

fn decode_planar(record: &[u8]) -> impl Iterator<Item = f64> + '_ {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    (0..plane).flat_map(move |p| (0..CIFAR_CHANNELS).map(move |c| record[c * plane + p] as f64 / 255.0))
}

fn parse_records(bytes: &[u8], label_bytes: usize, max_label: u8, offset: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let record = label_bytes + CIFAR_PIXELS;
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::Format(format!(
            "length {} is not a multiple of the {record}-byte record size",
            bytes.len()
        )));
    }
    let count = bytes.len() / record;
    let mut pixels = Vec::with_capacity(count * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        // CIFAR-100 stores (coarse, fine); the fine label is the last label byte.
        let label = rec[label_bytes - 1];
        if label > max_label {
            return Err(Error::CorruptRecord {
                index: offset + i,
                label,
                max: max_label,
            });
        }
        labels.push(label as usize);
        pixels.extend(decode_planar(&rec[label_bytes..]));
    }
    Ok((pixels, labels))
}

fn read_cifar(paths: &[&Path], label_bytes: usize, classes: usize) -> Result<LabeledImageSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (p, l) = parse_records(&bytes, label_bytes, (classes - 1) as u8, labels.len())
            .map_err(|e| match e {
                Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
                other => other,
            })?;
        pixels.extend(p);
        labels.extend(l);
    }
    if labels.is_empty() {
        return Err(Error::Format("no records found".into()));
    }
    let images = Tensor::new([labels.len(), CIFAR_SIDE, CIFAR_SIDE, CIFAR_CHANNELS], pixels)?;
    LabeledImageSet::new(images, labels, classes)
}

/// Decode CIFAR-10 binary batches (3073-byte records), in file then record
/// order.
pub fn read_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledImageSet> {
    let paths: Vec<&Path> = paths.iter().map(AsRef::as_ref).collect();
    read_cifar(&paths, 1, 10)
}

/// Decode CIFAR-100 binary files (3074-byte records, coarse then fine label);
/// the fine label is used.
pub fn read_cifar100_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledImageSet> {
    let paths: Vec<&Path> = paths.iter().map(AsRef::as_ref).collect();
    read_cifar(&paths, 2, 100)
}

/// Parameters of the synthetic blob dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Brightness offset of a class's solid square.
pub const BLOB_AMPLITUDE: f64 = 0.15;
/// Amplitude of the class-specific high-frequency texture.
pub const TEXTURE_AMPLITUDE: f64 = 0.03;

fn texture_sign(class: usize, pixel: usize) -> f64 {
    // splitmix64 finaliser over (class, pixel); fixed, seed-independent
    let mut z = (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (pixel as u64).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    if z & 1 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Noise-free image of class `k`, `[H, W, C]` row-major.
///
/// Mid-grey background, plus a bright square of side `H/4` in a
/// class-specific cell of a 4×4 grid on a class-specific channel, plus a
/// faint ±texture spread over every pixel.
pub fn blob_template(class: usize, image_size: usize, channels: usize) -> Vec<f64> {
    let side = image_size.div_ceil(4);
    let cell = class % 16;
    // spread classes over the grid: step 5 visits all 16 cells
    let cell = (cell * 5) % 16;
    let (cy, cx) = (cell / 4 * side, cell % 4 * side);
    let channel = class % channels;
    let mut out = Vec::with_capacity(image_size * image_size * channels);
    for y in 0..image_size {
        for x in 0..image_size {
            for c in 0..channels {
                let pixel = (y * image_size + x) * channels + c;
                let mut v = 0.5 + TEXTURE_AMPLITUDE * texture_sign(class, pixel);
                if c == channel && (cy..cy + side).contains(&y) && (cx..cx + side).contains(&x) {
                    v += BLOB_AMPLITUDE;
                }
                out.push(v);
            }
        }
    }
    out
}

/// Balanced seeded dataset: `per_class` noisy copies of each class template,
/// classes interleaved (`0, 1, …, K−1, 0, 1, …`). Noise is Gaussian with
/// standard deviation `noise`, then pixels are clipped to `[0, 1]`.
pub fn gen_synthetic_blobs(spec: &BlobSpec) -> Result<LabeledImageSet> {
    if spec.classes < 2 {
        return Err(Error::Config(format!("synthetic classes must be >= 2, got {}", spec.classes)));
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(Error::Config(format!("noise must be a finite value >= 0, got {}", spec.noise)));
    }
    if spec.per_class == 0 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::Config("per_class, image_size and channels must be >= 1".into()));
    }
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|k| blob_template(k, spec.image_size, spec.channels))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("valid std"));
    let count = spec.classes * spec.per_class;
    let per = spec.image_size * spec.image_size * spec.channels;
    let mut data = Vec::with_capacity(count * per);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..spec.per_class {
        for (k, t) in templates.iter().enumerate() {
            labels.push(k);
            for &v in t {
                let noisy = match &normal {
                    Some(n) => v + n.sample(&mut rng),
                    None => v,
                };
                data.push(noisy.clamp(0.0, 1.0));
            }
        }
    }
    let images = Tensor::new([count, spec.image_size, spec.image_size, spec.channels], data)?;
    LabeledImageSet::new(images, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, pixel: impl Fn(usize, usize, usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    r.push(pixel(c, y, x));
                }
            }
        }
        r
    }

    #[test]
    fn two_records_decode_with_interleaving() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut bytes = record(7, |c, y, x| ((c * 50 + y + x) % 256) as u8);
        bytes.extend(record(0, |_, _, _| 255));
        std::fs::write(&path, &bytes).unwrap();
        let set = read_cifar10_binary(&[&path]).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.labels, vec![7, 0]);
        let d = set.images.data();
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    let want = ((c * 50 + y + x) % 256) as f64 / 255.0;
                    assert_eq!(d[(y * 32 + x) * 3 + c], want);
                }
            }
        }
        assert!(d[CIFAR_PIXELS..].iter().all(|v| *v == 1.0));
    }

    #[test]
    fn zero_byte_maps_to_zero() {
        let (p, _) = parse_records(&record(1, |_, _, _| 0), 1, 9, 0).unwrap();
        assert!(p.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bad_length_and_bad_label() {
        assert!(matches!(parse_records(&[0u8; 3072], 1, 9, 0), Err(Error::Format(_))));
        let mut bytes = record(3, |_, _, _| 1);
        bytes.extend(record(10, |_, _, _| 1));
        match parse_records(&bytes, 1, 9, 0) {
            Err(Error::CorruptRecord { index, label, .. }) => assert_eq!((index, label), (1, 10)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![3u8];
        rec.extend(record(42, |_, _, _| 9));
        let (_, labels) = parse_records(&rec, 2, 99, 0).unwrap();
        assert_eq!(labels, vec![42]);
    }

    fn spec(noise: f64, seed: u64) -> BlobSpec {
        BlobSpec {
            classes: 4,
            per_class: 5,
            image_size: 16,
            channels: 3,
            noise,
            seed,
        }
    }

    #[test]
    fn noiseless_classes_identical() {
        let set = gen_synthetic_blobs(&spec(0.0, 1)).unwrap();
        let per = 16 * 16 * 3;
        let d = set.images.data();
        for i in 0..set.len() {
            let k = set.labels[i];
            let first = set.labels.iter().position(|&l| l == k).unwrap();
            assert_eq!(d[i * per..(i + 1) * per], d[first * per..(first + 1) * per]);
        }
    }

    #[test]
    fn same_seed_bitwise_identical() {
        let a = gen_synthetic_blobs(&spec(0.1, 9)).unwrap();
        let b = gen_synthetic_blobs(&spec(0.1, 9)).unwrap();
        assert!(a.images.bitwise_eq(&b.images));
        let c = gen_synthetic_blobs(&spec(0.1, 10)).unwrap();
        assert!(!a.images.bitwise_eq(&c.images));
    }

    #[test]
    fn nearest_template_classifies_everything() {
        let mut s = spec(0.05, 3);
        s.per_class = 50;
        let set = gen_synthetic_blobs(&s).unwrap();
        let templates: Vec<Vec<f64>> = (0..4).map(|k| blob_template(k, 16, 3)).collect();
        let per = 16 * 16 * 3;
        for (i, img) in set.images.data().chunks(per).enumerate() {
            let nearest = templates
                .iter()
                .map(|t| t.iter().zip(img).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            assert_eq!(nearest, set.labels[i]);
        }
    }

    #[test]
    fn rejects_single_class() {
        let mut s = spec(0.1, 1);
        s.classes = 1;
        assert!(gen_synthetic_blobs(&s).is_err());
    }
}
