//! Labeled image sets: CIFAR-10 binary ingestion, the synthetic two-class
//! corpus, and the raw archive format shared with adversarial dumps.
//!
//! Images are stored channel-planar (`[C, H, W]` per image), values in
//! `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<usize>,
    ids: Vec<u64>,
    classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl LabeledImageSet {
    pub fn new(
        shape: [usize; 3],
        pixels: Vec<f64>,
        labels: Vec<usize>,
        ids: Vec<u64>,
        classes: usize,
        split: Split,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::Data(format!("degenerate image shape {shape:?}")));
        }
        if pixels.len() != per * labels.len() || ids.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} labels, {} ids and {} pixels do not describe whole {shape:?} images",
                labels.len(),
                ids.len(),
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Data(format!("pixel value {p} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} outside [0, {classes})")));
        }
        Ok(Self {
            shape,
            pixels,
            labels,
            ids,
            classes,
            split,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.shape.to_vec(), self.image(i).to_vec())
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn id(&self, i: usize) -> u64 {
        self.ids[i]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New set made of the given indices, in the given order.
    pub fn select(&self, indices: &[usize], split: Split) -> Self {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            shape: self.shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            classes: self.classes,
            split,
            provenance: self.provenance.clone(),
        }
    }

    /// Seeded class-stratified sample of `size` items without replacement.
    /// Returned indices are sorted.
    pub fn stratified_indices(&self, size: usize, seed: u64) -> Result<Vec<usize>> {
        stratified_indices(&self.labels, self.classes, size, seed)
    }

    /// Seeded `(train, held_out)` partition with `floor(fraction * n)`
    /// held-out items, stratified by class.
    pub fn split_off(&self, fraction: f64, seed: u64, held_out: Split) -> (Self, Self) {
        let k = ((self.len() as f64) * fraction).floor() as usize;
        let chosen = if k == 0 {
            Vec::new()
        } else {
            stratified_indices(&self.labels, self.classes, k, seed).expect("k <= len")
        };
        let mut mask = vec![false; self.len()];
        chosen.iter().for_each(|&i| mask[i] = true);
        let rest: Vec<usize> = (0..self.len()).filter(|&i| !mask[i]).collect();
        (self.select(&rest, self.split), self.select(&chosen, held_out))
    }
}

fn stratified_indices(labels: &[usize], classes: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(Error::Data("requested an empty subset".into()));
    }
    if size > labels.len() {
        return Err(Error::Data(format!(
            "requested {size} samples from a set of {}",
            labels.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let total = labels.len();
    // Largest-remainder apportionment of `size` over class frequencies.
    let mut quotas: Vec<usize> = by_class.iter().map(|c| size * c.len() / total).collect();
    let mut remainders: Vec<(usize, usize)> = by_class
        .iter()
        .enumerate()
        .map(|(k, c)| ((size * c.len()) % total, k))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = size - quotas.iter().sum::<usize>();
    for &(_, k) in remainders.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quotas[k] < by_class[k].len() {
            quotas[k] += 1;
            missing -= 1;
        }
    }
    let mut out = Vec::with_capacity(size);
    for (k, members) in by_class.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..quotas[k]]);
    }
    out.sort_unstable();
    Ok(out)
}

pub const CIFAR10_RECORD: usize = 1 + 3072;
pub const CIFAR10_BATCH_RECORDS: usize = 10_000;
const CIFAR10_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const CIFAR10_TEST_FILE: &str = "test_batch.bin";

/// Loads the CIFAR-10 binary distribution from `root` (the directory holding
/// `data_batch_*.bin` / `test_batch.bin`). `subset` of `None` keeps the whole
/// split; otherwise a seeded class-stratified sample is taken. Sample ids are
/// record positions within the split, so a given image keeps its id across
/// subsets.
pub fn load_cifar10(root: &Path, split: Split, subset: Option<usize>, seed: u64) -> Result<LabeledImageSet> {
    let files: Vec<&str> = match split {
        Split::Train => CIFAR10_TRAIN_FILES.to_vec(),
        Split::Test => vec![CIFAR10_TEST_FILE],
        Split::Val => return Err(Error::Ingestion("CIFAR-10 has no validation split".into())),
    };
    if subset == Some(0) {
        return Err(Error::Data("requested an empty subset".into()));
    }
    let mut labels = Vec::new();
    let mut raw = Vec::new();
    for f in files {
        let path = root.join(f);
        let bytes = fs::read(&path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        if bytes.len() != CIFAR10_RECORD * CIFAR10_BATCH_RECORDS {
            return Err(Error::Ingestion(format!(
                "{} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                CIFAR10_RECORD * CIFAR10_BATCH_RECORDS
            )));
        }
        for rec in bytes.chunks_exact(CIFAR10_RECORD) {
            if rec[0] > 9 {
                return Err(Error::Ingestion(format!("{}: label byte {} > 9", path.display(), rec[0])));
            }
            labels.push(rec[0] as usize);
        }
        raw.extend_from_slice(&bytes);
    }
    let indices: Vec<usize> = match subset {
        None => (0..labels.len()).collect(),
        Some(size) => stratified_indices(&labels, 10, size, seed)?,
    };
    let mut pixels = Vec::with_capacity(indices.len() * 3072);
    for &i in &indices {
        pixels.extend(raw[i * CIFAR10_RECORD + 1..(i + 1) * CIFAR10_RECORD].iter().map(|&b| b as f64 / 255.0));
    }
    LabeledImageSet::new(
        [3, 32, 32],
        pixels,
        indices.iter().map(|&i| labels[i]).collect(),
        indices.iter().map(|&i| i as u64).collect(),
        10,
        split,
        format!("cifar10:{split:?}").to_lowercase(),
    )
}

/// Two-class synthetic corpus. Class 0 images carry a bright square in the
/// top-left corner, class 1 in the bottom-right; everything else is dark
/// background noise. Background pixels lie in `[0, b]` and blob pixels in
/// `[b + margin, 1]` with `b = (1 − margin) / 2`, so the difference of the
/// two corner means separates the classes by at least `2·margin`.
/// Labels alternate starting with 0.
pub fn make_synthetic_twoclass(n: usize, resolution: usize, margin: f64, seed: u64) -> Result<LabeledImageSet> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::Data(format!("sample count must be positive and even, got {n}")));
    }
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::Data(format!("margin must lie in (0, 1), got {margin}")));
    }
    if resolution < 2 {
        return Err(Error::Data(format!("resolution must be at least 2, got {resolution}")));
    }
    let channels = 3;
    let side = (resolution / 4).max(1);
    let bg_max = (1.0 - margin) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * channels * resolution * resolution);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let offset = if label == 0 { 0 } else { resolution - side };
        for _c in 0..channels {
            for y in 0..resolution {
                for x in 0..resolution {
                    let in_blob = (offset..offset + side).contains(&y) && (offset..offset + side).contains(&x);
                    pixels.push(if in_blob {
                        rng.random_range(bg_max + margin..=1.0)
                    } else {
                        rng.random_range(0.0..=bg_max)
                    });
                }
            }
        }
        labels.push(label);
    }
    LabeledImageSet::new(
        [channels, resolution, resolution],
        pixels,
        labels,
        (0..n as u64).collect(),
        2,
        Split::Train,
        format!("synthetic-twoclass:n={n}:res={resolution}:margin={margin}:seed={seed}"),
    )
}

pub const ARCHIVE_HEADER: &str = "archive.json";
pub const ARCHIVE_PIXELS: &str = "pixels.bin";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchiveHeader {
    format: String,
    version: u32,
    count: usize,
    shape: [usize; 3],
    classes: usize,
    split: Split,
    provenance: String,
    labels: Vec<usize>,
    ids: Vec<u64>,
}

/// Writes `set` as `archive.json` + `pixels.bin` (little-endian `f32`,
/// image-major, channel-planar).
pub fn save_archive(set: &LabeledImageSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = ArchiveHeader {
        format: "diffprobe-images".into(),
        version: 1,
        count: set.len(),
        shape: set.shape,
        classes: set.classes,
        split: set.split,
        provenance: set.provenance.clone(),
        labels: set.labels.clone(),
        ids: set.ids.clone(),
    };
    let blob: Vec<u8> = set.pixels.iter().flat_map(|&p| (p as f32).to_le_bytes()).collect();
    write_atomic(&dir.join(ARCHIVE_PIXELS), &blob)?;
    write_atomic(&dir.join(ARCHIVE_HEADER), &serde_json::to_vec_pretty(&header)?)?;
    Ok(())
}

pub fn load_archive(dir: &Path) -> Result<LabeledImageSet> {
    let header: ArchiveHeader = serde_json::from_slice(&fs::read(dir.join(ARCHIVE_HEADER))?)?;
    if header.format != "diffprobe-images" || header.version != 1 {
        return Err(Error::Ingestion(format!("unsupported archive {} v{}", header.format, header.version)));
    }
    let blob = fs::read(dir.join(ARCHIVE_PIXELS))?;
    let expected = header.count * header.shape.iter().product::<usize>() * 4;
    if blob.len() != expected {
        return Err(Error::Ingestion(format!("pixel blob has {} bytes, expected {expected}", blob.len())));
    }
    let pixels = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    LabeledImageSet::new(
        header.shape,
        pixels,
        header.labels,
        header.ids,
        header.classes,
        header.split,
        header.provenance,
    )
}
