//! Deterministic synthetic glyph dataset.
//!
//! Every class is a pair of small glyphs: one stamped in the upper-left
//! image quadrant, one in the lower-right. The pairing is arranged so that
//! adjacent classes share one glyph and differ only in the other, which
//! makes single-region classifiers ambiguous on purpose. Each image lays
//! the glyphs over a shared background texture at a per-image circular
//! shift, then adds Gaussian pixel noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::hash::fnv1a64_f64;
use crate::tensor::Tensor;

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    SpecInvalid(String),
    #[error("batch wants {need} distinct classes, dataset has {have}")]
    NotEnoughClasses { have: usize, need: usize },
    #[error("class {class} has {have} images, pairs need 2")]
    NotEnoughImagesInClass { class: usize, have: usize },
    #[error("dataset payload: {0}")]
    BadPayload(String),
    #[error("dataset checksum mismatch: manifest {expected:#018x}, payload {got:#018x}")]
    ChecksumMismatch { expected: u64, got: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

const GLYPH_SIDE: usize = 5;

/// Upper-left inventory. Rows are y, columns x.
const GLYPHS_A: [[u8; 25]; 8] = [
    // cross
    [0,0,1,0,0, 0,0,1,0,0, 1,1,1,1,1, 0,0,1,0,0, 0,0,1,0,0],
    // ring
    [1,1,1,1,1, 1,0,0,0,1, 1,0,0,0,1, 1,0,0,0,1, 1,1,1,1,1],
    // diagonal
    [1,0,0,0,0, 0,1,0,0,0, 0,0,1,0,0, 0,0,0,1,0, 0,0,0,0,1],
    // x
    [1,0,0,0,1, 0,1,0,1,0, 0,0,1,0,0, 0,1,0,1,0, 1,0,0,0,1],
    // t
    [1,1,1,1,1, 0,0,1,0,0, 0,0,1,0,0, 0,0,1,0,0, 0,0,1,0,0],
    // l
    [1,0,0,0,0, 1,0,0,0,0, 1,0,0,0,0, 1,0,0,0,0, 1,1,1,1,1],
    // h
    [1,0,0,0,1, 1,0,0,0,1, 1,1,1,1,1, 1,0,0,0,1, 1,0,0,0,1],
    // z
    [1,1,1,1,1, 0,0,0,1,0, 0,0,1,0,0, 0,1,0,0,0, 1,1,1,1,1],
];

/// Lower-right inventory.
const GLYPHS_B: [[u8; 25]; 8] = [
    // diamond
    [0,0,1,0,0, 0,1,1,1,0, 1,1,1,1,1, 0,1,1,1,0, 0,0,1,0,0],
    // vertical bars
    [1,0,1,0,1, 1,0,1,0,1, 1,0,1,0,1, 1,0,1,0,1, 1,0,1,0,1],
    // horizontal bars
    [1,1,1,1,1, 0,0,0,0,0, 1,1,1,1,1, 0,0,0,0,0, 1,1,1,1,1],
    // u
    [1,0,0,0,1, 1,0,0,0,1, 1,0,0,0,1, 1,0,0,0,1, 0,1,1,1,0],
    // corners and center
    [1,0,0,0,1, 0,0,0,0,0, 0,0,1,0,0, 0,0,0,0,0, 1,0,0,0,1],
    // wedge
    [0,0,0,0,1, 0,0,0,1,1, 0,0,1,1,1, 0,1,1,1,1, 1,1,1,1,1],
    // slash bar
    [0,0,0,0,1, 0,0,0,1,0, 1,1,1,1,1, 0,1,0,0,0, 1,0,0,0,0],
    // dotted ring
    [0,1,1,1,0, 1,0,0,0,1, 1,0,1,0,1, 1,0,0,0,1, 0,1,1,1,0],
];

/// Most classes the inventories support.
pub const MAX_CLASSES: usize = 16;

const GLYPH_VALUE: f64 = 0.9;

/// Glyph indices (upper-left, lower-right) for a class. Consecutive even
/// and odd classes share the first glyph; classes two apart share the
/// second. All pairs are distinct.
pub fn glyph_pair(class: usize) -> (usize, usize) {
    (class / 2, 2 * ((class / 2) / 2) + class % 2)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub images_per_class: usize,
    pub width: usize,
    pub height: usize,
    /// Standard deviation of the Gaussian pixel noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Default desk-scale dataset: 8 classes of 16x16 images, 30 images
    /// each (intended split: 20 train, 10 test).
    pub fn desk(seed: u64) -> SynthSpec {
        SynthSpec {
            classes: 8,
            images_per_class: 30,
            width: 16,
            height: 16,
            noise_std: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::SpecInvalid(msg));
        if self.classes < 2 || self.classes > MAX_CLASSES {
            return bad(format!("classes must be in 2..={}, got {}", MAX_CLASSES, self.classes));
        }
        if self.images_per_class < 2 {
            return bad(format!("pairs need images_per_class >= 2, got {}", self.images_per_class));
        }
        let min_side = 2 * GLYPH_SIDE;
        if self.width < min_side || self.height < min_side {
            return bad(format!(
                "each quadrant must fit a {0}x{0} glyph; need at least {1}x{1}, got {2}x{3}",
                GLYPH_SIDE, min_side, self.width, self.height
            ));
        }
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return bad(format!("quadrants need even dims, got {}x{}", self.width, self.height));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// Generated images in class-major order: image `i` of class `k` sits at
/// `k * images_per_class + i`. Pixel layout matches tensors: `x * height + y`.
pub struct Dataset {
    pub spec: SynthSpec,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// FNV-1a over every pixel of every image, little-endian f64 bytes.
    pub checksum: u64,
}

/// Fixed background texture, sampled at a circular shift.
fn background(x: usize, y: usize) -> f64 {
    0.2 + 0.02 * ((x * 31 + y * 17) % 11) as f64
}

fn stamp(img: &mut [f64], height: usize, stencil: &[u8; 25], x0: usize, y0: usize) {
    for gy in 0..GLYPH_SIDE {
        for gx in 0..GLYPH_SIDE {
            if stencil[gy * GLYPH_SIDE + gx] == 1 {
                img[(x0 + gx) * height + (y0 + gy)] = GLYPH_VALUE;
            }
        }
    }
}

/// One standard normal draw via Box-Muller; consumes two uniforms.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic generation: identical specs give bit-identical datasets.
pub fn gen_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = crate::seeded_rng(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let mut images = Vec::with_capacity(spec.classes * spec.images_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for class in 0..spec.classes {
        let (ga, gb) = glyph_pair(class);
        for _ in 0..spec.images_per_class {
            let dx = rng.gen_range(0..w);
            let dy = rng.gen_range(0..h);
            let mut img = vec![0.0; w * h];
            for x in 0..w {
                for y in 0..h {
                    img[x * h + y] = background((x + dx) % w, (y + dy) % h);
                }
            }
            // Glyphs centered in their quadrants.
            let (qx, qy) = ((w / 2 - GLYPH_SIDE) / 2, (h / 2 - GLYPH_SIDE) / 2);
            stamp(&mut img, h, &GLYPHS_A[ga], qx, qy);
            stamp(&mut img, h, &GLYPHS_B[gb], w / 2 + qx, h / 2 + qy);
            if spec.noise_std > 0.0 {
                for px in img.iter_mut() {
                    *px = (*px + spec.noise_std * gaussian(&mut rng)).clamp(0.0, 1.0);
                }
            }
            images.push(img);
            labels.push(class);
        }
    }
    let checksum = dataset_checksum(&images);
    Ok(Dataset { spec: spec.clone(), images, labels, checksum })
}

fn dataset_checksum(images: &[Vec<f64>]) -> u64 {
    let flat: Vec<f64> = images.iter().flatten().copied().collect();
    fnv1a64_f64(&flat)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Image as a `[width, height, 1]` input tensor.
    pub fn image_tensor(&self, index: usize) -> Result<Tensor> {
        let img = self
            .images
            .get(index)
            .ok_or_else(|| DataError::BadPayload(format!("image index {} of {}", index, self.len())))?;
        Ok(Tensor::literal(vec![self.spec.width, self.spec.height, 1], img.clone())
            .expect("stored image has spec dims"))
    }

    /// Split each class's images: the first `train_per_class` go to the
    /// training set, the rest to the test set. Order within each class is
    /// preserved.
    pub fn split(&self, train_per_class: usize) -> Result<(Dataset, Dataset)> {
        let ipc = self.spec.images_per_class;
        if train_per_class == 0 || train_per_class >= ipc {
            return Err(DataError::SpecInvalid(format!(
                "train_per_class must be in 1..{}, got {}",
                ipc, train_per_class
            )));
        }
        let mut train = (Vec::new(), Vec::new());
        let mut test = (Vec::new(), Vec::new());
        for class in 0..self.spec.classes {
            let base = class * ipc;
            for i in 0..ipc {
                let part = if i < train_per_class { &mut train } else { &mut test };
                part.0.push(self.images[base + i].clone());
                part.1.push(self.labels[base + i]);
            }
        }
        let make = |(images, labels): (Vec<Vec<f64>>, Vec<usize>), per_class: usize| {
            let mut spec = self.spec.clone();
            spec.images_per_class = per_class;
            let checksum = dataset_checksum(&images);
            Dataset { spec, images, labels, checksum }
        };
        Ok((make(train, train_per_class), make(test, ipc - train_per_class)))
    }

    fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Draw `pairs` distinct classes and two distinct images from each.
    /// Members of a pair are adjacent in the result.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, pairs: usize) -> Result<PairBatch> {
        if pairs == 0 {
            return Err(DataError::SpecInvalid("batch needs at least one pair".into()));
        }
        if pairs > self.classes() {
            return Err(DataError::NotEnoughClasses { have: self.classes(), need: pairs });
        }
        // Partial Fisher-Yates over the class list.
        let mut classes: Vec<usize> = (0..self.classes()).collect();
        for i in 0..pairs {
            let j = rng.gen_range(i..classes.len());
            classes.swap(i, j);
        }
        classes.truncate(pairs);

        let mut indices = Vec::with_capacity(2 * pairs);
        let mut labels = Vec::with_capacity(2 * pairs);
        for &class in &classes {
            let pool = self.class_indices(class);
            if pool.len() < 2 {
                return Err(DataError::NotEnoughImagesInClass { class, have: pool.len() });
            }
            let first = rng.gen_range(0..pool.len());
            let mut second = rng.gen_range(0..pool.len() - 1);
            if second >= first {
                second += 1;
            }
            indices.push(pool[first]);
            indices.push(pool[second]);
            labels.push(class);
            labels.push(class);
        }
        Ok(PairBatch { indices, labels })
    }
}

/// Dataset indices for one sampled pair batch.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// 2N image indices; `2i` and `2i+1` share a class.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: SynthSpec,
    labels: Vec<usize>,
    checksum: u64,
}

const IMAGES_FILE: &str = "images.f64";
const MANIFEST_FILE: &str = "index.json";

/// Write `index.json` (spec, labels, checksum) and `images.f64` (raw
/// little-endian pixels) into `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        spec: ds.spec.clone(),
        labels: ds.labels.clone(),
        checksum: ds.checksum,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    let mut f = fs::File::create(dir.join(IMAGES_FILE))?;
    for img in &ds.images {
        for v in img {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a saved dataset, verifying payload size and checksum.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    manifest.spec.validate()?;
    let pixels = manifest.spec.width * manifest.spec.height;
    let count = manifest.labels.len();
    let mut bytes = Vec::new();
    fs::File::open(dir.join(IMAGES_FILE))?.read_to_end(&mut bytes)?;
    if bytes.len() != count * pixels * 8 {
        return Err(DataError::BadPayload(format!(
            "{} bytes for {} images of {} pixels",
            bytes.len(),
            count,
            pixels
        )));
    }
    let mut images = Vec::with_capacity(count);
    for i in 0..count {
        let img: Vec<f64> = bytes[i * pixels * 8..(i + 1) * pixels * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        images.push(img);
    }
    let got = dataset_checksum(&images);
    if got != manifest.checksum {
        return Err(DataError::ChecksumMismatch { expected: manifest.checksum, got });
    }
    Ok(Dataset {
        spec: manifest.spec,
        images,
        labels: manifest.labels,
        checksum: got,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            classes: 4,
            images_per_class: 6,
            width: 12,
            height: 12,
            noise_std: 0.05,
            seed,
        }
    }

    #[test]
    fn glyph_pairs_are_distinct_and_overlap_by_at_most_one() {
        let pairs: Vec<(usize, usize)> = (0..MAX_CLASSES).map(glyph_pair).collect();
        for i in 0..pairs.len() {
            for j in 0..i {
                assert_ne!(pairs[i], pairs[j], "classes {} and {}", i, j);
            }
        }
        // First eight classes, spelled out.
        assert_eq!(
            &pairs[..8],
            &[(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 3), (3, 2), (3, 3)]
        );
        // Glyph indices stay inside the inventories.
        for &(a, b) in &pairs {
            assert!(a < GLYPHS_A.len() && b < GLYPHS_B.len());
        }
    }

    #[test]
    fn spec_validation_rejects_bad_shapes() {
        let mut s = small_spec(1);
        s.classes = 1;
        assert!(matches!(s.validate(), Err(DataError::SpecInvalid(_))));
        s = small_spec(1);
        s.classes = MAX_CLASSES + 1;
        assert!(s.validate().is_err());
        s = small_spec(1);
        s.width = 9;
        assert!(s.validate().is_err());
        s = small_spec(1);
        s.width = 14;
        s.height = 13;
        assert!(s.validate().is_err());
        s = small_spec(1);
        s.noise_std = -0.1;
        assert!(s.validate().is_err());
        s = small_spec(1);
        s.images_per_class = 1;
        assert!(s.validate().is_err());
        assert!(small_spec(1).validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = gen_dataset(&small_spec(9)).unwrap();
        let b = gen_dataset(&small_spec(9)).unwrap();
        assert_eq!(a.checksum, b.checksum);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let c = gen_dataset(&small_spec(10)).unwrap();
        assert_ne!(a.checksum, c.checksum);
    }

    #[test]
    fn counts_and_labels_follow_class_major_order() {
        let ds = gen_dataset(&small_spec(11)).unwrap();
        assert_eq!(ds.len(), 24);
        for class in 0..4 {
            for i in 0..6 {
                assert_eq!(ds.labels[class * 6 + i], class);
            }
        }
        assert_eq!(ds.image_tensor(0).unwrap().shape(), &[12, 12, 1]);
        assert!(ds.image_tensor(24).is_err());
    }

    #[test]
    fn noiseless_images_pin_glyph_pixels_exactly() {
        let mut spec = small_spec(12);
        spec.noise_std = 0.0;
        let ds = gen_dataset(&spec).unwrap();
        let h = spec.height;
        let (qx, qy) = ((spec.width / 2 - GLYPH_SIDE) / 2, (spec.height / 2 - GLYPH_SIDE) / 2);
        for (idx, img) in ds.images.iter().enumerate() {
            let (ga, gb) = glyph_pair(ds.labels[idx]);
            for gy in 0..GLYPH_SIDE {
                for gx in 0..GLYPH_SIDE {
                    if GLYPHS_A[ga][gy * GLYPH_SIDE + gx] == 1 {
                        assert_eq!(img[(qx + gx) * h + qy + gy], GLYPH_VALUE);
                    }
                    if GLYPHS_B[gb][gy * GLYPH_SIDE + gx] == 1 {
                        let (x, y) = (spec.width / 2 + qx + gx, spec.height / 2 + qy + gy);
                        assert_eq!(img[x * h + y], GLYPH_VALUE);
                    }
                }
            }
        }
        // Background still varies between images of one class (shifts).
        let first = &ds.images[0];
        let second = &ds.images[1];
        assert!(first.iter().zip(second).any(|(a, b)| a != b));
    }

    #[test]
    fn every_pixel_stays_in_the_unit_interval() {
        let mut spec = small_spec(13);
        spec.noise_std = 0.5;
        let ds = gen_dataset(&spec).unwrap();
        for img in &ds.images {
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn split_preserves_per_class_order_and_content() {
        let ds = gen_dataset(&small_spec(14)).unwrap();
        let (train, test) = ds.split(4).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(test.len(), 8);
        assert_eq!(train.spec.images_per_class, 4);
        assert_eq!(test.spec.images_per_class, 2);
        for class in 0..4 {
            for i in 0..4 {
                assert_eq!(train.images[class * 4 + i], ds.images[class * 6 + i]);
            }
            for i in 0..2 {
                assert_eq!(test.images[class * 2 + i], ds.images[class * 6 + 4 + i]);
            }
        }
        assert!(ds.split(0).is_err());
        assert!(ds.split(6).is_err());
    }

    #[test]
    fn sampled_batches_pair_distinct_images_of_distinct_classes() {
        let ds = gen_dataset(&small_spec(15)).unwrap();
        let mut rng = seeded_rng(100);
        for _ in 0..200 {
            let batch = ds.sample_batch(&mut rng, 3).unwrap();
            assert_eq!(batch.indices.len(), 6);
            let mut seen_classes = std::collections::HashSet::new();
            for pair in 0..3 {
                let (i, j) = (batch.indices[2 * pair], batch.indices[2 * pair + 1]);
                assert_ne!(i, j);
                assert_eq!(ds.labels[i], ds.labels[j]);
                assert_eq!(batch.labels[2 * pair], ds.labels[i]);
                assert!(seen_classes.insert(ds.labels[i]));
            }
        }
    }

    #[test]
    fn sampler_visits_classes_roughly_uniformly() {
        let ds = gen_dataset(&small_spec(16)).unwrap();
        let mut rng = seeded_rng(101);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let batch = ds.sample_batch(&mut rng, 2).unwrap();
            for pair in 0..2 {
                counts[batch.labels[2 * pair]] += 1;
            }
        }
        // Each class expects draws * 2 / 4 hits; allow 20 percent.
        let expect = draws as f64 * 2.0 / 4.0;
        for (class, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expect).abs() < 0.2 * expect,
                "class {} drawn {} times, expected about {}",
                class,
                c,
                expect
            );
        }
    }

    #[test]
    fn sampler_reports_shortages() {
        let ds = gen_dataset(&small_spec(17)).unwrap();
        let mut rng = seeded_rng(102);
        assert!(matches!(
            ds.sample_batch(&mut rng, 5),
            Err(DataError::NotEnoughClasses { have: 4, need: 5 })
        ));
        // A hand-built dataset with a single image in class 1.
        let mut lopsided = small_spec(18);
        lopsided.classes = 2;
        let crippled = Dataset {
            spec: lopsided,
            images: vec![vec![0.0; 144]; 3],
            labels: vec![0, 0, 1],
            checksum: 0,
        };
        let err = loop {
            // Class choice is random; force it to eventually pick class 1.
            match crippled.sample_batch(&mut rng, 1) {
                Ok(_) => continue,
                Err(e) => break e,
            }
        };
        assert!(matches!(err, DataError::NotEnoughImagesInClass { class: 1, have: 1 }));
    }

    #[test]
    fn saved_datasets_round_trip_and_detect_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&small_spec(19)).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.checksum, ds.checksum);
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        // Flip one payload byte: the checksum must catch it.
        let img_path = dir.path().join(IMAGES_FILE);
        let mut bytes = fs::read(&img_path).unwrap();
        bytes[100] ^= 0xff;
        fs::write(&img_path, bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::ChecksumMismatch { .. })
        ));

        // Truncated payloads are a different failure.
        let bytes = fs::read(&img_path).unwrap();
        fs::write(&img_path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::BadPayload(_))));
    }
}
