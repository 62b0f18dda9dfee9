use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "typeA")]
    TypeA,
    #[serde(rename = "typeB")]
    TypeB,
}

impl Category {
    pub fn complement(self) -> Self {
        match self {
            Category::TypeA => Category::TypeB,
            Category::TypeB => Category::TypeA,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::TypeA => "typeA",
            Category::TypeB => "typeB",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRecord {
    pub item_id: String,
    pub outfit_id: String,
    pub category: Category,
    /// Relative paths resolve against the manifest's directory.
    pub image_path: String,
    pub mask_path: String,
}

/// Validated manifest records plus the directory relative paths refer to.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub records: Vec<ItemRecord>,
}

/// The typeA and typeB item of one outfit, when present.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OutfitItems {
    pub type_a: Option<String>,
    pub type_b: Option<String>,
}

impl OutfitItems {
    pub fn get(&self, c: Category) -> Option<&str> {
        match c {
            Category::TypeA => self.type_a.as_deref(),
            Category::TypeB => self.type_b.as_deref(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.type_a.is_some() && self.type_b.is_some()
    }
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::DataIo {
            path: path.to_path_buf(),
            source,
        })?;
        let records = parse_manifest(&text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, records })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Outfits keyed (and therefore ordered) by outfit id.
    pub fn outfits(&self) -> BTreeMap<String, OutfitItems> {
        outfits(&self.records)
    }

    /// Ids of outfits that have both an A and a B item, sorted.
    pub fn complete_outfit_ids(&self) -> Vec<String> {
        self.outfits()
            .into_iter()
            .filter(|(_, o)| o.is_complete())
            .map(|(id, _)| id)
            .collect()
    }

    pub fn record(&self, item_id: &str) -> Option<&ItemRecord> {
        self.records.iter().find(|r| r.item_id == item_id)
    }
}

pub fn outfits(records: &[ItemRecord]) -> BTreeMap<String, OutfitItems> {
    let mut map: BTreeMap<String, OutfitItems> = BTreeMap::new();
    for r in records {
        let slot = map.entry(r.outfit_id.clone()).or_default();
        let field = match r.category {
            Category::TypeA => &mut slot.type_a,
            Category::TypeB => &mut slot.type_b,
        };
        *field = Some(r.item_id.clone());
    }
    map
}

/// Parses and validates JSON-lines manifest text. Blank lines are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ItemRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    let mut slots: BTreeMap<&str, [bool; 2]> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ItemRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !ids.insert(rec.item_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate item_id {:?} on line {}",
                rec.item_id,
                i + 1
            )));
        }
        records.push(rec);
    }
    for r in &records {
        let slot = slots.entry(&r.outfit_id).or_default();
        let k = r.category as usize;
        if slot[k] {
            return Err(Error::Validation(format!(
                "outfit {:?} has more than one {} item",
                r.outfit_id,
                r.category.as_str()
            )));
        }
        slot[k] = true;
    }
    Ok(records)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ItemRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Convenience wrapper returning only the records.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ItemRecord>> {
    Ok(Manifest::load(path)?.records)
}
