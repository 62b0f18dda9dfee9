//! Manifests, image IO, masking, triplet sampling and fold splitting.

mod manifest;
pub mod pnm;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{
    load_manifest, outfits, parse_manifest, write_manifest, Category, ItemRecord, Manifest,
    OutfitItems,
};
pub use synth::{family_of, generate_synthetic, StyleKind, SynthFamily};

/// Multiplies every channel of `image` by `mask`.
pub fn apply_mask(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (is, ms) = (image.shape(), mask.shape());
    if is.len() != 3 || ms.len() != 3 || ms[0] != 1 || is[1..] != ms[1..] {
        return Err(Error::dim(format!(
            "apply_mask needs image [C,H,W] and mask [1,H,W] with matching H,W; got {is:?} and {ms:?}"
        )));
    }
    let plane = ms[1] * ms[2];
    let m = mask.data();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| x * m[i % plane])
        .collect();
    Tensor::new(is.to_vec(), data)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

/// Samples `count` triplets from the complete outfits in `pool`.
///
/// Anchors walk the pool in a seeded order (reshuffled after each pass) and
/// alternate category: even indices anchor on typeA, odd on typeB. The
/// negative is the positive's category taken from a uniformly drawn other
/// outfit.
pub fn build_triplets(
    records: &[ItemRecord],
    pool: &BTreeSet<String>,
    count: usize,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let all = outfits(records);
    let complete: Vec<&OutfitItems> = pool
        .iter()
        .filter_map(|id| all.get(id))
        .filter(|o| o.is_complete())
        .collect();
    if complete.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "triplet sampling needs at least 2 complete outfits in the pool, found {}",
            complete.len()
        )));
    }
    let n = complete.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        if i % n == 0 {
            order.shuffle(&mut rng);
        }
        let a = order[i % n];
        let anchor_cat = if i % 2 == 0 { Category::TypeA } else { Category::TypeB };
        let pos_cat = anchor_cat.complement();
        // uniform over the n-1 other outfits
        let mut neg = rng.gen_range(0..n - 1);
        if neg >= a {
            neg += 1;
        }
        let item = |o: usize, c: Category| complete[o].get(c).expect("complete outfit").to_string();
        out.push(Triplet {
            anchor: item(a, anchor_cat),
            positive: item(a, pos_cat),
            negative: item(neg, pos_cat),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train_outfits: BTreeSet<String>,
    pub test_outfits: BTreeSet<String>,
}

/// Seeded shuffle of the sorted ids followed by a contiguous partition into
/// `k` test sets. The first `n % k` folds receive one extra outfit.
pub fn kfold_split(outfit_ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Validation(format!("k must be at least 2, got {k}")));
    }
    let mut ids: Vec<String> = outfit_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} outfits cannot be split into {k} folds",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut start = 0;
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let test: BTreeSet<String> = ids[start..start + len].iter().cloned().collect();
        let train = ids
            .iter()
            .filter(|id| !test.contains(*id))
            .cloned()
            .collect();
        folds.push(FoldSplit {
            fold_index: f,
            train_outfits: train,
            test_outfits: test,
        });
        start += len;
    }
    Ok(folds)
}

/// Reads one item as a masked `[C,H,W]` tensor at the requested size.
///
/// Samples map to `[0,1]`, the mask is binarised at 0.5, and both are
/// resampled by nearest neighbour. `channels` must be 3 (RGB) or 1 (luma).
pub fn load_item(m: &Manifest, rec: &ItemRecord, input_shape: [usize; 3]) -> Result<Tensor> {
    let image = pnm::read_ppm(m.resolve(&rec.image_path))?;
    let mask = pnm::read_pgm(m.resolve(&rec.mask_path))?;
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::Validation(format!(
            "item {}: image is {}x{} but mask is {}x{}",
            rec.item_id, image.width, image.height, mask.width, mask.height
        )));
    }
    let [c, h, w] = input_shape;
    if c != 3 && c != 1 {
        return Err(Error::Config(format!(
            "model.input_shape: images have 3 or 1 channels, got {c}"
        )));
    }
    let mut data = vec![0.0f32; c * h * w];
    for y in 0..h {
        let sy = y * image.height / h;
        for x in 0..w {
            let sx = x * image.width / w;
            let p = sy * image.width + sx;
            if mask.samples[p] < 128 {
                continue;
            }
            let rgb = &image.samples[3 * p..3 * p + 3];
            if c == 3 {
                for ch in 0..3 {
                    data[ch * h * w + y * w + x] = rgb[ch] as f32 / 255.0;
                }
            } else {
                let luma = 0.299 * rgb[0] as f32 + 0.587 * rgb[1] as f32 + 0.114 * rgb[2] as f32;
                data[y * w + x] = luma / 255.0;
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Every item of a manifest decoded and masked once, held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    input_shape: [usize; 3],
    index: HashMap<String, usize>,
    images: Vec<Tensor>,
}

impl Dataset {
    /// Decodes all items in parallel; results are independent of thread count.
    pub fn load(manifest: Manifest, input_shape: [usize; 3]) -> Result<Self> {
        let images = manifest
            .records
            .par_iter()
            .map(|r| load_item(&manifest, r, input_shape))
            .collect::<Result<Vec<_>>>()?;
        let index = manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.item_id.clone(), i))
            .collect();
        Ok(Self {
            manifest,
            input_shape,
            index,
            images,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn records(&self) -> &[ItemRecord] {
        &self.manifest.records
    }

    pub fn image(&self, item_id: &str) -> Result<&Tensor> {
        self.index
            .get(item_id)
            .map(|&i| &self.images[i])
            .ok_or_else(|| Error::Lookup(format!("unknown item_id {item_id:?}")))
    }

    pub fn record(&self, item_id: &str) -> Result<&ItemRecord> {
        self.index
            .get(item_id)
            .map(|&i| &self.manifest.records[i])
            .ok_or_else(|| Error::Lookup(format!("unknown item_id {item_id:?}")))
    }

    /// Stacks the named items into `[B,C,H,W]`.
    pub fn batch<S: AsRef<str>>(&self, ids: &[S]) -> Result<Tensor> {
        let [c, h, w] = self.input_shape;
        let mut data = Vec::with_capacity(ids.len() * c * h * w);
        for id in ids {
            data.extend_from_slice(self.image(id.as_ref())?.data());
        }
        Tensor::new(vec![ids.len(), c, h, w], data)
    }

    pub fn outfits(&self) -> BTreeMap<String, OutfitItems> {
        self.manifest.outfits()
    }
}
