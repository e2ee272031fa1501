//! Dataset loading and surrogate training-data synthesis.
//!
//! Two sources are supported: the canonical CIFAR-10 binary batches and a
//! procedural colored-shapes dataset used as an offline fallback. The
//! surrogate pair/triplet builders feed the locator/inpainter and
//! de-cleaner training loops.

use crate::error::{BdfwError, Result};
use crate::rng::RngStream;
use crate::tensor::{BinaryMask, ImageTensor, LabeledImage};
use crate::trigger::{apply_hvt, gen_surrogate_hvt, gen_surrogate_svt, TriggerSpec};
use ndarray::Array3;
use std::fs::File;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// An image classification dataset; labels in {0..num_classes-1} and all
/// images share one shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<LabeledImage>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        self.records[0].image.shape()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Class-stratified subset of exactly `n` records (proportions
    /// preserved within one sample per class).
    pub fn stratified_subset(&self, n: usize, rng: &mut RngStream) -> Dataset {
        assert!(n <= self.len());
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, r) in self.records.iter().enumerate() {
            by_class[r.label].push(i);
        }
        let total = self.len() as f64;
        let mut take: Vec<usize> = by_class
            .iter()
            .map(|c| ((c.len() as f64 / total) * n as f64).floor() as usize)
            .collect();
        let mut assigned: usize = take.iter().sum();
        // distribute the remainder by largest fractional part
        let mut order: Vec<usize> = (0..self.num_classes).collect();
        order.sort_by(|&a, &b| {
            let fa = (by_class[a].len() as f64 / total) * n as f64 - take[a] as f64;
            let fb = (by_class[b].len() as f64 / total) * n as f64 - take[b] as f64;
            fb.partial_cmp(&fa).unwrap()
        });
        for &c in &order {
            if assigned == n {
                break;
            }
            if take[c] < by_class[c].len() {
                take[c] += 1;
                assigned += 1;
            }
        }
        let mut picked = Vec::with_capacity(n);
        for (c, idxs) in by_class.iter().enumerate() {
            let mut shuffled = idxs.clone();
            rng.shuffle(&mut shuffled);
            picked.extend(shuffled.into_iter().take(take[c]));
        }
        picked.sort_unstable();
        Dataset {
            records: picked.iter().map(|&i| self.records[i].clone()).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_BATCH_RECORDS: usize = 10_000;

fn read_cifar_file(path: &Path) -> Result<Vec<LabeledImage>> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| BdfwError::Dataset(format!("missing CIFAR file {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() != CIFAR_RECORD * CIFAR_BATCH_RECORDS {
        return Err(BdfwError::Dataset(format!(
            "{}: expected {} bytes ({} records), found {}",
            path.display(),
            CIFAR_RECORD * CIFAR_BATCH_RECORDS,
            CIFAR_BATCH_RECORDS,
            bytes.len()
        )));
    }
    let mut records = Vec::with_capacity(CIFAR_BATCH_RECORDS);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(BdfwError::Dataset(format!(
                "{}: label byte {label} out of range",
                path.display()
            )));
        }
        let mut data = Array3::zeros((3, 32, 32));
        for c in 0..3 {
            for i in 0..32 {
                for j in 0..32 {
                    data[[c, i, j]] = rec[1 + c * 1024 + i * 32 + j] as f64 / 255.0;
                }
            }
        }
        records.push(LabeledImage::clean(ImageTensor::new(data), label));
    }
    Ok(records)
}

/// Load the standard CIFAR-10 binary layout: five 10k-record training
/// batches plus one 10k test batch. Returns (train, test).
pub fn load_cifar_binary(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_records = Vec::with_capacity(50_000);
    for i in 1..=5 {
        train_records.extend(read_cifar_file(&dir.join(format!("data_batch_{i}.bin")))?);
    }
    let test_records = read_cifar_file(&dir.join("test_batch.bin"))?;
    Ok((
        Dataset {
            records: train_records,
            num_classes: 10,
            split: Split::Train,
        },
        Dataset {
            records: test_records,
            num_classes: 10,
            split: Split::Test,
        },
    ))
}

/// Shape classes available to the procedural fallback dataset.
const SHAPE_CLASS_NAMES: [&str; 6] = ["circle", "square", "triangle", "cross", "ring", "diamond"];

fn draw_class_shape(img: &mut ImageTensor, class: usize, fg: &[f64; 3], rng: &mut RngStream) {
    let (_, h, w) = img.shape();
    let side = h.min(w);
    let size = (rng.uniform_in(0.35, 0.62) * side as f64).round() as usize;
    let top = rng.below(h - size + 1);
    let left = rng.below(w - size + 1);
    let mut put = |i: usize, j: usize| {
        for c in 0..3 {
            img.data[[c, i, j]] = fg[c];
        }
    };
    match class {
        0 => {
            // circle
            let r = size as f64 / 2.0;
            let (cy, cx) = (top as f64 + r - 0.5, left as f64 + r - 0.5);
            for i in top..top + size {
                for j in left..left + size {
                    if (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2) <= r * r {
                        put(i, j);
                    }
                }
            }
        }
        1 => {
            for i in top..top + size {
                for j in left..left + size {
                    put(i, j);
                }
            }
        }
        2 => {
            // triangle, apex up
            for i in 0..size {
                let half = (i as f64 + 1.0) / size as f64 * (size as f64 / 2.0);
                let mid = left as f64 + size as f64 / 2.0;
                for j in left..left + size {
                    if (j as f64 + 0.5 - mid).abs() <= half {
                        put(top + i, j);
                    }
                }
            }
        }
        3 => {
            // plus/cross
            let arm = (size as f64 / 3.0).round() as usize;
            let lo = (size - arm) / 2;
            for i in 0..size {
                for j in 0..size {
                    if (lo..lo + arm).contains(&i) || (lo..lo + arm).contains(&j) {
                        put(top + i, left + j);
                    }
                }
            }
        }
        4 => {
            // ring
            let r = size as f64 / 2.0;
            let inner = r * 0.55;
            let (cy, cx) = (top as f64 + r - 0.5, left as f64 + r - 0.5);
            for i in top..top + size {
                for j in left..left + size {
                    let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                    if d2 <= r * r && d2 >= inner * inner {
                        put(i, j);
                    }
                }
            }
        }
        5 => {
            // diamond
            let c = size as f64 / 2.0;
            for i in 0..size {
                for j in 0..size {
                    if (i as f64 + 0.5 - c).abs() + (j as f64 + 0.5 - c).abs() <= c {
                        put(top + i, left + j);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Procedural 32x32x3 dataset of colored geometric shapes on solid
/// backgrounds, `k` shape classes, deterministic per seed.
pub fn make_shapes_dataset(n: usize, k: usize, seed: u64) -> Result<Dataset> {
    if k == 0 || k > SHAPE_CLASS_NAMES.len() {
        return Err(BdfwError::InvalidParam(format!(
            "shapes dataset supports 1..={} classes, got {k}",
            SHAPE_CLASS_NAMES.len()
        )));
    }
    if n < k {
        return Err(BdfwError::InvalidParam(format!("need n >= K, got n={n}, K={k}")));
    }
    let mut records = Vec::with_capacity(n);
    for idx in 0..n {
        let class = idx % k;
        let mut rng = RngStream::new(seed, &format!("shapes/{idx}"));
        let bg: [f64; 3] = [rng.uniform(), rng.uniform(), rng.uniform()];
        // keep the shape color clearly separated from the background
        let fg: [f64; 3] = loop {
            let c = [rng.uniform(), rng.uniform(), rng.uniform()];
            let dist: f64 = c.iter().zip(bg.iter()).map(|(a, b)| (a - b).abs()).sum();
            if dist >= 0.6 {
                break c;
            }
        };
        let mut img = ImageTensor::zeros(3, 32, 32);
        for c in 0..3 {
            img.data
                .slice_mut(ndarray::s![c, .., ..])
                .fill(bg[c]);
        }
        draw_class_shape(&mut img, class, &fg, &mut rng);
        records.push(LabeledImage::clean(img, class));
    }
    let mut order_rng = RngStream::new(seed, "shapes/order");
    order_rng.shuffle(&mut records);
    Ok(Dataset {
        records,
        num_classes: k,
        split: Split::Train,
    })
}

/// One locator/inpainter training record: a patched image, the clean
/// mask (1 = clean pixel), and the pre-patch original.
#[derive(Debug, Clone)]
pub struct Stage1Pair {
    pub patched: ImageTensor,
    pub clean_mask: BinaryMask,
    pub clean_original: ImageTensor,
}

/// One de-cleaner training record; `blended == clean*(1-w) + trigger*w`.
#[derive(Debug, Clone)]
pub struct SurrogateTriplet {
    pub clean: ImageTensor,
    pub trigger: ImageTensor,
    pub blended: ImageTensor,
    pub weight: f64,
}

/// Convex blend of two images, without clamping (both operands in [0,1]).
pub fn blend(clean: &ImageTensor, trigger: &ImageTensor, w: f64) -> ImageTensor {
    ImageTensor::new(&clean.data * (1.0 - w) + &trigger.data * w)
}

/// Build one surrogate patch pair for a single record. Pair geometry and
/// fill are a pure function of the forked rng stream, so regenerating
/// per epoch just means forking a fresh stream.
pub fn stage1_pair_for(record: &LabeledImage, rng: &mut RngStream) -> Stage1Pair {
    let (c, h, w) = record.image.shape();
    let (mut pattern, trigger_mask) = gen_surrogate_hvt(c, h, w, rng);
    // force the patched region to differ from the underlying image
    let spec = |pattern: ImageTensor| TriggerSpec::HvtPatch {
        pattern,
        mask: trigger_mask.clone(),
        target_class: 0,
    };
    let mut patched = apply_hvt(&record.image, &spec(pattern.clone())).unwrap();
    if patched == record.image {
        for i in 0..h {
            for j in 0..w {
                if trigger_mask.data[[i, j]] == 1.0 {
                    let v = pattern.data[[0, i, j]];
                    pattern.data[[0, i, j]] = if v < 0.5 { v + 0.5 } else { v - 0.5 };
                }
            }
        }
        patched = apply_hvt(&record.image, &spec(pattern)).unwrap();
    }
    Stage1Pair {
        patched,
        clean_mask: trigger_mask.complement(),
        clean_original: record.image.clone(),
    }
}

/// Surrogate pairs for the whole dataset (one trigger per image).
pub fn build_stage1_pairs(ds: &Dataset, rng: &RngStream) -> Vec<Stage1Pair> {
    ds.records
        .iter()
        .enumerate()
        .map(|(i, r)| stage1_pair_for(r, &mut rng.fork(&format!("pair/{i}"))))
        .collect()
}

/// Build one surrogate blend triplet for a single record.
pub fn stage2_triplet_for(record: &LabeledImage, rng: &mut RngStream) -> SurrogateTriplet {
    let (c, h, w) = record.image.shape();
    let trigger = gen_surrogate_svt(c, h, w, rng);
    let weight = rng.uniform_in(0.1, 0.4);
    let blended = blend(&record.image, &trigger, weight);
    SurrogateTriplet {
        clean: record.image.clone(),
        trigger,
        blended,
        weight,
    }
}

/// Surrogate triplets for the whole dataset.
pub fn build_stage2_triplets(ds: &Dataset, rng: &RngStream) -> Vec<SurrogateTriplet> {
    ds.records
        .iter()
        .enumerate()
        .map(|(i, r)| stage2_triplet_for(r, &mut rng.fork(&format!("triplet/{i}"))))
        .collect()
}
