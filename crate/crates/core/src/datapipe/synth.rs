//! Procedural outfit dataset where compatibility is a matter of texture.
//!
//! Every outfit belongs to a style family. A family fixes the texture kind
//! (stripes, checkerboard or dots) and a band of spatial frequencies. The two
//! items of an outfit share the frequency and orientation drawn for that
//! outfit; colours, phase, silhouette and background are drawn per item.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{write_manifest, Category, ItemRecord};
use super::pnm::{self, Raster};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StyleKind {
    Stripes,
    Checker,
    Dots,
}

/// Texture kind and frequency band (cycles per image side) of one family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthFamily {
    pub kind: StyleKind,
    pub band: (f64, f64),
}

impl SynthFamily {
    /// Family `index` out of `n_families` for images of side `image_size`.
    ///
    /// Kinds cycle through stripes, checker, dots. Families sharing a kind
    /// split the frequency range `[3, image_size/6]` into equal bands.
    pub fn new(index: usize, n_families: usize, image_size: usize) -> Self {
        let kind = [StyleKind::Stripes, StyleKind::Checker, StyleKind::Dots][index % 3];
        let same_kind = (n_families - index % 3).div_ceil(3);
        let (lo, hi) = (3.0, image_size as f64 / 6.0);
        let width = (hi - lo) / same_kind as f64;
        let level = (index / 3) as f64;
        Self {
            kind,
            band: (lo + level * width, lo + (level + 1.0) * width),
        }
    }
}

/// Recovers the family index from a generated outfit id.
pub fn family_of(outfit_id: &str) -> Option<usize> {
    outfit_id.rsplit_once("-fam")?.1.parse().ok()
}

struct OutfitStyle {
    family: SynthFamily,
    freq: f64,
    theta: f64,
}

fn texture(style: &OutfitStyle, phase: (f64, f64), u: f64, v: f64) -> f64 {
    let (c, s) = (style.theta.cos(), style.theta.sin());
    let (ru, rv) = (u * c + v * s, -u * s + v * c);
    let tau = 2.0 * PI * style.freq;
    match style.family.kind {
        StyleKind::Stripes => 0.5 + 0.5 * (tau * ru + phase.0).sin(),
        StyleKind::Checker => {
            let p = (tau * ru + phase.0).sin() * (tau * rv + phase.1).sin();
            if p >= 0.0 { 1.0 } else { 0.0 }
        }
        StyleKind::Dots => {
            let cell = |t: f64, ph: f64| {
                let x = t * style.freq + ph / (2.0 * PI);
                x - x.floor() - 0.5
            };
            let (du, dv) = (cell(ru, phase.0), cell(rv, phase.1));
            if du * du + dv * dv < 0.09 { 1.0 } else { 0.0 }
        }
    }
}

/// Garment silhouette in unit coordinates. Skirts (typeA) are trapezoids
/// widening toward the hem; t-shirts (typeB) are a torso with two sleeves.
fn silhouette(category: Category, jitter: [f64; 4], u: f64, v: f64) -> bool {
    let [dx, dy, sw, sh] = jitter;
    let (u, v) = (u - dx, v - dy);
    match category {
        Category::TypeA => {
            let (top, bottom) = (0.2 * sh, 1.0 - 0.15 * sh);
            if v < top || v > bottom {
                return false;
            }
            let t = (v - top) / (bottom - top);
            let half = sw * (0.18 + 0.22 * t);
            (u - 0.5).abs() <= half
        }
        Category::TypeB => {
            let (top, bottom) = (0.15 * sh, 1.0 - 0.1 * sh);
            if v < top || v > bottom {
                return false;
            }
            let torso = (u - 0.5).abs() <= 0.22 * sw;
            let sleeve_depth = top + 0.25;
            let sleeves = v <= sleeve_depth && (u - 0.5).abs() <= 0.22 * sw + 0.2 * (sleeve_depth - v) / 0.25 + 0.04;
            torso || sleeves
        }
    }
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn render(
    rng: &mut ChaCha8Rng,
    style: &OutfitStyle,
    category: Category,
    size: usize,
) -> (Raster, Raster) {
    // a dark and a light garment colour keep every texture visible
    let fg = [color(rng, 0.0, 0.4), color(rng, 0.6, 1.0)];
    let bg = [color(rng, 0.0, 1.0), color(rng, 0.0, 1.0)];
    let phase = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let jitter = [
        rng.gen_range(-0.05..0.05),
        rng.gen_range(-0.05..0.05),
        rng.gen_range(0.85..1.15),
        rng.gen_range(0.8..1.2),
    ];
    let mut image = Vec::with_capacity(size * size * 3);
    let mut mask = Vec::with_capacity(size * size);
    for y in 0..size {
        let v = (y as f64 + 0.5) / size as f64;
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let inside = silhouette(category, jitter, u, v);
            // background: smooth diagonal gradient, standing in for scene clutter
            let (t, pair) = if inside {
                (texture(style, phase, u, v), &fg)
            } else {
                (0.5 * (u + v), &bg)
            };
            for (lo, hi) in pair[0].iter().zip(&pair[1]) {
                let val = lo + (hi - lo) * t;
                image.push((val * 255.0).round().clamp(0.0, 255.0) as u8);
            }
            mask.push(if inside { 255 } else { 0 });
        }
    }
    let raster = |channels, samples| Raster {
        width: size,
        height: size,
        channels,
        samples,
    };
    (raster(3, image), raster(1, mask))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::DataIo {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `images/`, `masks/` and `manifest.jsonl` under `out_dir` and
/// returns the manifest path. Output is a pure function of the arguments.
pub fn generate_synthetic(
    out_dir: impl AsRef<Path>,
    n_outfits: usize,
    image_size: usize,
    n_families: usize,
    seed: u64,
) -> Result<PathBuf> {
    if n_outfits == 0 {
        return Err(Error::Config("outfits: must be positive".into()));
    }
    if image_size < 32 {
        return Err(Error::Config(format!("size: must be at least 32, got {image_size}")));
    }
    if n_families < 2 {
        return Err(Error::Config(format!("families: must be at least 2, got {n_families}")));
    }
    let out_dir = out_dir.as_ref();
    let (img_dir, mask_dir) = (out_dir.join("images"), out_dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(2 * n_outfits);
    for o in 0..n_outfits {
        let fam = rng.gen_range(0..n_families);
        let family = SynthFamily::new(fam, n_families, image_size);
        let style = OutfitStyle {
            family,
            freq: rng.gen_range(family.band.0..family.band.1),
            theta: rng.gen_range(0..4) as f64 * PI / 4.0,
        };
        let outfit_id = format!("outfit{o:05}-fam{fam}");
        for (category, tag) in [(Category::TypeA, "A"), (Category::TypeB, "B")] {
            let item_id = format!("{outfit_id}-{tag}");
            let (image, mask) = render(&mut rng, &style, category, image_size);
            let image_path = format!("images/{item_id}.ppm");
            let mask_path = format!("masks/{item_id}.pgm");
            for (rel, r) in [(&image_path, &image), (&mask_path, &mask)] {
                let p = out_dir.join(rel);
                std::fs::write(&p, pnm::encode(r)).map_err(io_err(&p))?;
            }
            records.push(ItemRecord {
                item_id,
                outfit_id: outfit_id.clone(),
                category,
                image_path,
                mask_path,
            });
        }
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_bands_partition_the_range() {
        let fams: Vec<_> = (0..7).map(|i| SynthFamily::new(i, 7, 64)).collect();
        assert_eq!(fams[0].kind, StyleKind::Stripes);
        assert_eq!(fams[4].kind, StyleKind::Checker);
        let stripes: Vec<_> = [0, 3, 6].iter().map(|&i| fams[i].band).collect();
        assert_eq!(stripes[0].0, 3.0);
        assert!((stripes[2].1 - 64.0 / 6.0).abs() < 1e-12);
        assert_eq!(stripes[0].1, stripes[1].0);
        // a kind with a single family spans the whole range
        assert_eq!(SynthFamily::new(1, 4, 64).band, (3.0, 64.0 / 6.0));
    }

    #[test]
    fn family_round_trips_through_ids() {
        assert_eq!(family_of("outfit00013-fam2"), Some(2));
        assert_eq!(family_of("outfit00013"), None);
    }

    #[test]
    fn single_outfit_and_bad_arguments() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(dir.path(), 1, 32, 2, 0).unwrap();
        let recs = super::super::load_manifest(&m).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].category, Category::TypeA);
        assert_eq!(recs[1].category, Category::TypeB);
        assert!(generate_synthetic(dir.path(), 1, 31, 2, 0).is_err());
        assert!(generate_synthetic(dir.path(), 1, 32, 1, 0).is_err());
    }
}
