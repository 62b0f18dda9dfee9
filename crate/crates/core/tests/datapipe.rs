use std::collections::{BTreeMap, BTreeSet};

use hssn_core::datapipe::{
    apply_mask, build_triplets, family_of, generate_synthetic, kfold_split, pnm, Category,
    ItemRecord, StyleKind, SynthFamily,
};
use hssn_core::{Manifest, Tensor};
use proptest::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("o{i:03}")).collect()
}

proptest! {
    #[test]
    fn kfold_is_a_partition(n in 2usize..60, k_raw in 2usize..10, seed in any::<u64>()) {
        let k = k_raw.min(n);
        let all: BTreeSet<String> = ids(n).into_iter().collect();
        let folds = kfold_split(&ids(n), k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut seen = BTreeSet::new();
        for (i, f) in folds.iter().enumerate() {
            prop_assert_eq!(f.fold_index, i);
            prop_assert!(f.test_outfits.len() == n / k || f.test_outfits.len() == n / k + 1);
            prop_assert!(f.test_outfits.is_disjoint(&f.train_outfits));
            let union: BTreeSet<String> = f.test_outfits.union(&f.train_outfits).cloned().collect();
            prop_assert_eq!(&union, &all);
            for id in &f.test_outfits {
                prop_assert!(seen.insert(id.clone()), "{} tested twice", id);
            }
        }
        prop_assert_eq!(seen, all);
    }

    #[test]
    fn binary_masking_is_idempotent(
        c in 1usize..4,
        h in 1usize..6,
        w in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn([c, h, w], |_| rng.gen_range(-2.0..2.0));
        let mask = Tensor::from_fn([1, h, w], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let once = apply_mask(&img, &mask).unwrap();
        let twice = apply_mask(&once, &mask).unwrap();
        prop_assert_eq!(once.data(), twice.data());
    }
}

#[test]
fn kfold_rejects_too_few_outfits() {
    assert!(kfold_split(&ids(3), 4, 0).is_err());
    assert!(kfold_split(&ids(3), 1, 0).is_err());
}

fn pool_records(n: usize) -> Vec<ItemRecord> {
    let mut out = Vec::new();
    for o in 0..n {
        for (c, tag) in [(Category::TypeA, "A"), (Category::TypeB, "B")] {
            out.push(ItemRecord {
                item_id: format!("o{o}-{tag}"),
                outfit_id: format!("o{o}"),
                category: c,
                image_path: String::new(),
                mask_path: String::new(),
            });
        }
    }
    out
}

#[test]
fn negatives_are_uniform_over_other_outfits() {
    let n = 6;
    let recs = pool_records(n);
    let pool: BTreeSet<String> = (0..n).map(|o| format!("o{o}")).collect();
    let outfit_of: BTreeMap<&str, &str> =
        recs.iter().map(|r| (r.item_id.as_str(), r.outfit_id.as_str())).collect();
    let triplets = build_triplets(&recs, &pool, 6000, 11).unwrap();
    // counts[anchor outfit][negative outfit]
    let mut counts = vec![vec![0usize; n]; n];
    for t in &triplets {
        let a = outfit_of[t.anchor.as_str()];
        assert_eq!(a, outfit_of[t.positive.as_str()]);
        let neg = outfit_of[t.negative.as_str()];
        assert_ne!(a, neg);
        let (ra, pa) = (
            recs.iter().find(|r| r.item_id == t.anchor).unwrap(),
            recs.iter().find(|r| r.item_id == t.positive).unwrap(),
        );
        assert_eq!(pa.category, ra.category.complement());
        let rn = recs.iter().find(|r| r.item_id == t.negative).unwrap();
        assert_eq!(rn.category, pa.category);
        let idx = |s: &str| s[1..].parse::<usize>().unwrap();
        counts[idx(a)][idx(neg)] += 1;
    }
    // every anchor outfit is used equally, so each row has 1000 draws spread
    // over 5 negatives; pooled chi-squared with 6 * 4 = 24 degrees of freedom
    let mut chi2 = 0.0;
    for (a, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        assert_eq!(total, 1000);
        let expected = total as f64 / (n - 1) as f64;
        for (b, &c) in row.iter().enumerate() {
            if a != b {
                chi2 += (c as f64 - expected).powi(2) / expected;
            }
        }
    }
    // 0.999 quantile of chi-squared(24)
    assert!(chi2 < 51.18, "chi-squared {chi2:.2} rejects uniform negatives");
}

#[test]
fn synthetic_generation_is_a_function_of_its_arguments() {
    let read_all = |dir: &std::path::Path| -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for sub in ["images", "masks"] {
            for e in std::fs::read_dir(dir.join(sub)).unwrap() {
                let p = e.unwrap().path();
                out.insert(format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), std::fs::read(&p).unwrap());
            }
        }
        out.insert("manifest".into(), std::fs::read(dir.join("manifest.jsonl")).unwrap());
        out
    };
    let (d1, d2, d3) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(d1.path(), 5, 32, 3, 9).unwrap();
    generate_synthetic(d2.path(), 5, 32, 3, 9).unwrap();
    generate_synthetic(d3.path(), 5, 32, 3, 10).unwrap();
    let (a, b, c) = (read_all(d1.path()), read_all(d2.path()), read_all(d3.path()));
    assert_eq!(a.len(), 2 * 5 * 2 + 1);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

/// Radial frequency (cycles per image side) of the strongest non-DC peak of
/// the masked, mean-removed luma.
fn dominant_frequency(raster: &pnm::Raster, mask: &pnm::Raster) -> f64 {
    let n = raster.width;
    let inside: Vec<bool> = mask.samples.iter().map(|&m| m >= 128).collect();
    let luma: Vec<f64> = raster
        .samples
        .chunks(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect();
    let count = inside.iter().filter(|b| **b).count() as f64;
    let mean = luma.iter().zip(&inside).filter(|(_, i)| **i).map(|(v, _)| v).sum::<f64>() / count;
    let mut grid: Vec<Complex<f64>> = luma
        .iter()
        .zip(&inside)
        .map(|(v, i)| Complex::new(if *i { v - mean } else { 0.0 }, 0.0))
        .collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    for row in grid.chunks_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for x in 0..n {
        for y in 0..n {
            col[y] = grid[y * n + x];
        }
        fft.process(&mut col);
        for y in 0..n {
            grid[y * n + x] = col[y];
        }
    }
    let signed = |k: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    let mut best = (0.0, 0.0);
    for ky in 0..n {
        for kx in 0..n {
            let r = signed(kx).hypot(signed(ky));
            // the silhouette window itself carries the lowest frequencies
            if r < 2.0 {
                continue;
            }
            let p = grid[ky * n + kx].norm_sqr();
            if p > best.0 {
                best = (p, r);
            }
        }
    }
    best.1
}

#[test]
fn stripe_items_peak_inside_their_family_band() {
    let dir = tempfile::tempdir().unwrap();
    let (size, families) = (64, 4);
    let path = generate_synthetic(dir.path(), 24, size, families, 3).unwrap();
    let m = Manifest::load(&path).unwrap();
    let mut checked = 0;
    for (outfit, items) in m.outfits() {
        let fam = family_of(&outfit).unwrap();
        let family = SynthFamily::new(fam, families, size);
        if family.kind != StyleKind::Stripes {
            continue;
        }
        let mut peaks = Vec::new();
        for c in [Category::TypeA, Category::TypeB] {
            let rec = m.record(items.get(c).unwrap()).unwrap();
            let img = pnm::read_ppm(m.resolve(&rec.image_path)).unwrap();
            let mask = pnm::read_pgm(m.resolve(&rec.mask_path)).unwrap();
            peaks.push(dominant_frequency(&img, &mask));
        }
        let (lo, hi) = family.band;
        for &f in &peaks {
            // one bin of slack for windowing and bin quantization
            assert!(f >= lo - 1.0 && f <= hi + 1.0, "{outfit}: peak {f:.2} outside band {lo:.2}..{hi:.2}");
        }
        assert!((peaks[0] - peaks[1]).abs() <= 1.5, "{outfit}: items disagree {peaks:?}");
        checked += 1;
    }
    assert!(checked >= 3, "only {checked} stripe outfits generated");
}
