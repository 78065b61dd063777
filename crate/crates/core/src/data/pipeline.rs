//! End-to-end corpus generation and curation on disk.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::caption::{clean_caption, MockRewriter};
use super::content::{generate_content, ContentImage};
use super::derive_seed;
use super::judge::{content_filter_prompt, filter_triplets, FilterOutcome, ItemDescriptor, Judge, JudgeRequest};
use super::manifest::{base_dir, split_styles, Manifest, ManifestRecord, Split};
use super::reference::{cosine_similarity, select_all_references};
use super::styles::{apply_style, StyleFamily, Stylized, FAMILY_IDS};
use crate::dit::{PatchGeometry, StylizerExample};
use crate::encoder::{extract_features, ExtractorSpec, StyleEncoder};
use crate::error::{Error, Result};
use crate::numeric::Array;
use crate::raster::{Mask, Raster};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CURATED_FILE: &str = "curated.jsonl";
pub const REJECTIONS_FILE: &str = "rejections.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Family ids; see [`FAMILY_IDS`]. `identity` is also accepted.
    pub families: Vec<String>,
    /// Content scenes, each stylized by every family.
    pub contents: usize,
    pub categories: usize,
    pub image_size: usize,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            families: FAMILY_IDS.iter().map(|s| s.to_string()).collect(),
            contents: 40,
            categories: 6,
            image_size: 16,
            test_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("data.families must not be empty".into()));
        }
        if self.contents < 2 {
            return Err(Error::Config("data.contents must be at least 2 so every style set has a reference".into()));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!("data.image_size must be a multiple of 4 and at least 8, got {}", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("data.test_fraction must be in [0, 1], got {}", self.test_fraction)));
        }
        let mut seen = std::collections::HashSet::new();
        for f in &self.families {
            if !seen.insert(f) {
                return Err(Error::Config(format!("data.families lists {f:?} twice")));
            }
        }
        Ok(())
    }

    pub fn resolve_families(&self) -> Result<Vec<StyleFamily>> {
        self.families.iter().map(|id| StyleFamily::builtin(id)).collect()
    }
}

/// Runs `f` over `items` on up to `available_parallelism` threads; output
/// order follows input order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let per = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(per)
            .enumerate()
            .map(|(c, chunk)| s.spawn(move || chunk.iter().enumerate().map(|(j, t)| f(c * per + j, t)).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::invalid("generation worker panicked"))??);
        }
        Ok(out)
    })
}

fn save_pair(dir: &Path, stem: &str, raster: &Raster, mask: &Mask) -> Result<()> {
    raster.save_png(&dir.join(format!("{stem}.png")))?;
    mask.to_raster().save_png(&dir.join(format!("{stem}.mask.png")))
}

/// Writes content scenes, every family's stylization of every scene, and a
/// manifest with one record per (family, scene). The style reference of
/// each record is the most similar other image of its family, measured by
/// `encoder` embeddings when given and surrogate features otherwise.
pub fn gen_data(cfg: &DataConfig, out_dir: &Path, seed: u64, encoder: Option<&StyleEncoder>) -> Result<Manifest> {
    cfg.validate()?;
    let families = cfg.resolve_families()?;
    let contents = generate_content(cfg.contents, cfg.categories, cfg.image_size, derive_seed(seed, &[10]))?;
    fs::create_dir_all(out_dir.join("content"))?;
    for (j, c) in contents.iter().enumerate() {
        save_pair(&out_dir.join("content"), &format!("{j:04}"), &c.raster, &c.mask)?;
    }
    let spec = ExtractorSpec { size: cfg.image_size };
    let splits = split_styles(families.iter().map(|f| f.style_id.as_str()), cfg.test_fraction)?;
    let split_of = |id: &str| splits.iter().find(|(s, _)| s == id).map(|(_, s)| *s).unwrap_or(Split::Train);

    let per_family = par_map(&families, |fi, family| {
        let dir = out_dir.join("stylized").join(&family.style_id);
        fs::create_dir_all(&dir)?;
        let mut outputs: Vec<(u64, Stylized)> = Vec::with_capacity(contents.len());
        for (j, c) in contents.iter().enumerate() {
            let s = derive_seed(seed, &[20, fi as u64, j as u64]);
            let out = apply_style(&c.raster, &c.mask, family, s)?;
            save_pair(&dir, &format!("{j:04}"), &out.raster, &out.mask)?;
            outputs.push((s, out));
        }
        let vectors: Vec<Vec<f64>> = match encoder {
            Some(enc) => outputs
                .iter()
                .map(|(_, o)| enc.embed_image(&o.raster).map(|e| e.0))
                .collect::<Result<_>>()?,
            None => outputs
                .iter()
                .map(|(_, o)| extract_features(&o.raster, &spec).map(|f| f.concat()))
                .collect::<Result<_>>()?,
        };
        let refs = select_all_references(&vectors, |a, b| cosine_similarity(a, b))?;
        Ok(outputs
            .iter()
            .zip(refs)
            .enumerate()
            .map(|(j, ((s, _), r))| (j, r, *s))
            .collect::<Vec<_>>())
    })?;

    let mut records = Vec::with_capacity(families.len() * contents.len());
    for (family, rows) in families.iter().zip(per_family) {
        let id = &family.style_id;
        for (j, r, s) in rows {
            let c: &ContentImage = &contents[j];
            records.push(ManifestRecord {
                id: format!("{id}-{j:04}"),
                content_path: format!("content/{j:04}.png"),
                style_path: format!("stylized/{id}/{r:04}.png"),
                stylized_path: format!("stylized/{id}/{j:04}.png"),
                style_id: id.clone(),
                split: split_of(id),
                seed: s,
                category: c.category,
                content_index: j,
                caption: clean_caption(&c.caption, &MockRewriter).text,
                content_mask_path: format!("content/{j:04}.mask.png"),
                stylized_mask_path: format!("stylized/{id}/{j:04}.mask.png"),
            });
        }
    }
    let manifest = Manifest::new(records)?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    info!("wrote {} triplets for {} styles to {}", manifest.records.len(), families.len(), out_dir.display());
    Ok(manifest)
}

/// A manifest record with its images decoded.
#[derive(Clone, Debug)]
pub struct LoadedTriplet {
    pub record: ManifestRecord,
    pub content: Raster,
    pub content_mask: Mask,
    pub style: Raster,
    pub stylized: Raster,
    pub stylized_mask: Mask,
}

impl LoadedTriplet {
    /// Flow-training example: target is the stylized image, control is the
    /// content, the style signal is the reference's surrogate features.
    pub fn to_stylizer_example(&self, geometry: &PatchGeometry) -> Result<StylizerExample> {
        let spec = ExtractorSpec { size: self.style.width() };
        let f = extract_features(&self.style, &spec)?.concat();
        Ok(StylizerExample {
            content: geometry.raster_to_patches(&self.content)?,
            target: geometry.raster_to_patches(&self.stylized)?,
            style_features: Array::new(vec![1, f.len()], f)?,
            category: self.record.category,
            style_id: self.record.style_id.clone(),
        })
    }
}

fn load_one(base: &Path, record: &ManifestRecord) -> Result<LoadedTriplet> {
    let load = |p: &str| Raster::load_png(&base.join(p));
    Ok(LoadedTriplet {
        content: load(&record.content_path)?,
        content_mask: Mask::from_raster(&load(&record.content_mask_path)?),
        style: load(&record.style_path)?,
        stylized: load(&record.stylized_path)?,
        stylized_mask: Mask::from_raster(&load(&record.stylized_mask_path)?),
        record: record.clone(),
    })
}

/// Loads a manifest and decodes its images, optionally keeping one split.
pub fn load_triplets(manifest_path: &Path, split: Option<Split>) -> Result<Vec<LoadedTriplet>> {
    let manifest = Manifest::load(manifest_path)?;
    let base = base_dir(manifest_path);
    manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| load_one(&base, r))
        .collect()
}

/// What the filter judge is told about one triplet.
pub fn describe(t: &LoadedTriplet) -> Result<ItemDescriptor> {
    let spec = ExtractorSpec { size: t.stylized.width() };
    let a = extract_features(&t.stylized, &spec)?.concat();
    let b = extract_features(&t.style, &spec)?.concat();
    Ok(ItemDescriptor {
        category: t.record.category,
        content_objects: t.content_mask.components(),
        stylized_objects: t.stylized_mask.components(),
        mask_iou: t.content_mask.iou(&t.stylized_mask),
        style_distance: 1.0 - cosine_similarity(&a, &b),
    })
}

#[derive(Serialize)]
struct LogLine<'a> {
    id: &'a str,
    status: &'a str,
    reason: &'a str,
}

/// Judges every triplet, writes the kept records as a curated manifest and
/// the rejected and held items as a log, both next to the input manifest.
pub fn curate(manifest_path: &Path, judge: &(dyn Judge + Sync), max_in_flight: usize) -> Result<(FilterOutcome, PathBuf)> {
    let manifest = Manifest::load(manifest_path)?;
    let base = base_dir(manifest_path);
    let items = manifest
        .records
        .iter()
        .map(|r| {
            let t = load_one(&base, r)?;
            let request = JudgeRequest {
                prompt: content_filter_prompt(&r.caption),
                images: vec![t.content.clone(), t.stylized.clone(), t.style.clone()],
                descriptor: Some(describe(&t)?),
            };
            Ok((r.id.clone(), request))
        })
        .collect::<Result<Vec<_>>>()?;
    let outcome = filter_triplets(&items, judge, max_in_flight);
    let kept: std::collections::HashSet<&str> = outcome.kept.iter().map(String::as_str).collect();
    let curated = Manifest::new(manifest.records.iter().filter(|r| kept.contains(r.id.as_str())).cloned().collect())?;
    let out = base.join(CURATED_FILE);
    curated.write(&out)?;
    let mut log = Vec::new();
    for r in &outcome.rejected {
        serde_json::to_writer(&mut log, &LogLine { id: &r.id, status: "rejected", reason: &r.reason })?;
        log.push(b'\n');
    }
    for h in &outcome.held {
        serde_json::to_writer(&mut log, &LogLine { id: &h.id, status: "held", reason: &h.error })?;
        log.push(b'\n');
    }
    fs::write(base.join(REJECTIONS_FILE), log)?;
    info!(
        "curated {}: kept {}, rejected {}, held {}",
        manifest_path.display(),
        outcome.kept.len(),
        outcome.rejected.len(),
        outcome.held.len()
    );
    Ok((outcome, out))
}
