//! Multi-section dataset assembly and its on-disk layout.
//!
//! ```text
//! <root>/dataset.json                  config and region names
//! <root>/section_NNN/section.png       full section
//! <root>/section_NNN/labels.png        region index per pixel, 255 = background
//! <root>/section_NNN/geometry.json     SectionGeometry
//! <root>/section_NNN/index.jsonl       one IndexEntry per patch file
//! <root>/section_NNN/patches/*.png     patches; artifact masks end in `_mask.png`
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    adjust_gamma, extract_patches, generate_section, is_training_section, simulate_blackdot,
    simulate_jpeg, simulate_tear, PatchRecord, RegionSpec, SyntheticSection,
    SyntheticSectionSpec,
};
use crate::error::{Error, Result};
use crate::geometry::{estimate_alignment_angle, PatchPosition, SectionGeometry};
use crate::imageio::{load_mask, load_png, save_mask, save_png};

pub const CLEAN: &str = "clean";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub sections: usize,
    pub size: usize,
    pub radius: f64,
    /// Section 0 is the unrotated reference; others draw from `[0, max_rotation]`.
    pub max_rotation: f64,
    pub patch: usize,
    pub stride: usize,
    /// Replace the generator's ground-truth angle by registration to section 0.
    pub estimate_alignment: bool,
    pub alignment_step: f64,
    pub regions: Vec<RegionSpec>,
    /// Artifact variants, written for validation sections only.
    pub jpeg_qf: Vec<u8>,
    pub gamma: Vec<f64>,
    /// Tear area fraction per patch; 0 disables.
    pub tear_fraction: f64,
    pub blackdot_count: usize,
    pub blackdot_radius: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sections: 20,
            size: 512,
            radius: 240.0,
            max_rotation: 10.0,
            patch: 32,
            stride: 8,
            estimate_alignment: true,
            alignment_step: 1.0,
            regions: RegionSpec::default_bands(),
            jpeg_qf: Vec::new(),
            gamma: Vec::new(),
            tear_fraction: 0.0,
            blackdot_count: 0,
            blackdot_radius: 2.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sections == 0 {
            return Err(Error::config("sections", "must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        if self.patch == 0 || self.patch > self.size {
            return Err(Error::config("patch", "must lie in [1, size]"));
        }
        if !(0.0..=360.0).contains(&self.max_rotation) {
            return Err(Error::config("max_rotation", "must lie in [0, 360]"));
        }
        if !(self.alignment_step > 0.0) {
            return Err(Error::config("alignment_step", "must be positive"));
        }
        if let Some(q) = self.jpeg_qf.iter().find(|q| !(1..=100).contains(*q)) {
            return Err(Error::config("jpeg_qf", format!("{q} outside [1, 100]")));
        }
        if self.gamma.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::config("gamma", "levels must be positive"));
        }
        if !(0.0..1.0).contains(&self.tear_fraction) {
            return Err(Error::config("tear_fraction", "must lie in [0, 1)"));
        }
        self.section_spec(0, 0, 0.0).validate()
    }

    fn section_spec(&self, id: u32, seed: u64, rotation: f64) -> SyntheticSectionSpec {
        SyntheticSectionSpec {
            size: (self.size, self.size),
            radius: self.radius,
            regions: self.regions.clone(),
            seed,
            rotation,
            section_id: id,
        }
    }

    pub fn region_names(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.label.clone()).collect()
    }
}

/// One line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    /// Path relative to the section directory.
    pub file: String,
    pub x_p: usize,
    pub y_p: usize,
    pub r0: f64,
    /// Degrees in `[0, 360)`.
    pub theta0: f64,
    pub region: usize,
    pub section_id: u32,
    pub artifact_kind: String,
    pub seed: u64,
}

/// A generated section plus its kept patches.
#[derive(Clone, Debug)]
pub struct SectionData {
    pub seed: u64,
    pub section: SyntheticSection,
    pub records: Vec<PatchRecord>,
    pub tiled: usize,
}

/// Generates all sections, aligns them to section 0 and extracts patches.
pub fn build_sections(cfg: &DatasetConfig) -> Result<Vec<SectionData>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out: Vec<SectionData> = Vec::with_capacity(cfg.sections);
    for id in 0..cfg.sections as u32 {
        let seed: u64 = master.random();
        let rotation = if id == 0 {
            0.0
        } else {
            master.random_range(0.0..=cfg.max_rotation)
        };
        let mut section = generate_section(&cfg.section_spec(id, seed, rotation))?;
        if cfg.estimate_alignment && id > 0 {
            section.geometry.alignment_angle = estimate_alignment_angle(
                &out[0].section.image,
                &section.image,
                cfg.max_rotation,
                cfg.alignment_step,
            )?;
        }
        let ex = extract_patches(
            &section.image,
            &section.labels,
            &section.geometry,
            (cfg.patch, cfg.patch),
            cfg.stride,
        )?;
        out.push(SectionData {
            seed,
            section,
            records: ex.records,
            tiled: ex.tiled,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub regions: Vec<String>,
    pub sections: Vec<SectionSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionSummary {
    pub section_id: u32,
    pub dir: String,
    pub seed: u64,
    pub rotation: f64,
    pub train: bool,
    pub patches: usize,
    pub tiled: usize,
}

fn section_dir(id: u32) -> String {
    format!("section_{id:03}")
}

/// Kind name, artifact image and optional mask.
type Variant = (String, Array3<f32>, Option<Array2<bool>>);

/// Artifact variants of one clean patch.
fn artifact_variants(
    cfg: &DatasetConfig,
    img: &Array3<f32>,
    seed: u64,
) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for &qf in &cfg.jpeg_qf {
        out.push((format!("jpeg_q{qf}"), simulate_jpeg(img, qf)?, None));
    }
    for &g in &cfg.gamma {
        out.push((format!("gamma_{g}"), adjust_gamma(img, g)?, None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if cfg.tear_fraction > 0.0 {
        let (a, m) = simulate_tear(img, cfg.tear_fraction, &mut rng)?;
        out.push(("tear".to_string(), a, Some(m)));
    }
    if cfg.blackdot_count > 0 {
        let (a, m) = simulate_blackdot(img, cfg.blackdot_count, cfg.blackdot_radius, &mut rng)?;
        out.push(("blackdot".to_string(), a, Some(m)));
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Generates the dataset and writes it under `root`.
pub fn write_dataset(cfg: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    let sections = build_sections(cfg)?;
    fs::create_dir_all(root)?;
    let mut summaries = Vec::new();
    for sd in &sections {
        let g = &sd.section.geometry;
        let dir_name = section_dir(g.section_id);
        let dir = root.join(&dir_name);
        fs::create_dir_all(dir.join("patches"))?;
        save_png(&dir.join("section.png"), &sd.section.image)?;
        let (h, w) = sd.section.labels.dim();
        GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([sd.section.labels[[y as usize, x as usize]]])
        })
        .save_with_format(dir.join("labels.png"), image::ImageFormat::Png)?;
        write_json(&dir.join("geometry.json"), g)?;

        let train = is_training_section(g.section_id);
        let mut index = BufWriter::new(fs::File::create(dir.join("index.jsonl"))?);
        let mut art_rng = ChaCha8Rng::seed_from_u64(sd.seed ^ 0x5DEE_CE66_D1CE_4E5B);
        for (i, rec) in sd.records.iter().enumerate() {
            let stem = format!("patches/p{i:05}");
            let entry = |file: String, kind: &str, seed: u64| IndexEntry {
                file,
                x_p: rec.position.corner.0,
                y_p: rec.position.corner.1,
                r0: rec.position.r0,
                theta0: rec.position.theta0,
                region: rec.region,
                section_id: rec.section_id,
                artifact_kind: kind.to_string(),
                seed,
            };
            let file = format!("{stem}.png");
            save_png(&dir.join(&file), &rec.image)?;
            serde_json::to_writer(&mut index, &entry(file, CLEAN, sd.seed))?;
            index.write_all(b"\n")?;
            if train {
                continue;
            }
            let seed: u64 = art_rng.random();
            for (kind, img, mask) in artifact_variants(cfg, &rec.image, seed)? {
                let file = format!("{stem}_{kind}.png");
                save_png(&dir.join(&file), &img)?;
                if let Some(m) = mask {
                    save_mask(&dir.join(format!("{stem}_{kind}_mask.png")), &m)?;
                }
                serde_json::to_writer(&mut index, &entry(file, &kind, seed))?;
                index.write_all(b"\n")?;
            }
        }
        index.flush()?;
        summaries.push(SectionSummary {
            section_id: g.section_id,
            dir: dir_name,
            seed: sd.seed,
            rotation: sd.section.rotation,
            train,
            patches: sd.records.len(),
            tiled: sd.tiled,
        });
    }
    let manifest = DatasetManifest {
        config: cfg.clone(),
        regions: cfg.region_names(),
        sections: summaries,
    };
    write_json(&root.join("dataset.json"), &manifest)?;
    Ok(manifest)
}

/// Dataset read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub geometries: Vec<SectionGeometry>,
    pub entries: Vec<(IndexEntry, PatchRecord)>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        Self::load_filtered(root, |_| true)
    }

    /// Loads only entries accepted by `keep`.
    pub fn load_filtered(root: &Path, keep: impl Fn(&IndexEntry) -> bool) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_slice(&fs::read(root.join("dataset.json"))?)?;
        let mut geometries = Vec::new();
        let mut entries = Vec::new();
        for s in &manifest.sections {
            let dir = root.join(&s.dir);
            let g: SectionGeometry = serde_json::from_slice(&fs::read(dir.join("geometry.json"))?)?;
            let reader = BufReader::new(fs::File::open(dir.join("index.jsonl"))?);
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let e: IndexEntry = serde_json::from_str(&line)?;
                if !keep(&e) {
                    continue;
                }
                let image = load_png(&dir.join(&e.file))?;
                let record = PatchRecord {
                    image,
                    position: PatchPosition {
                        corner: (e.x_p, e.y_p),
                        r0: e.r0,
                        theta0: e.theta0,
                    },
                    region: e.region,
                    section_id: e.section_id,
                };
                entries.push((e, record));
            }
            geometries.push(g);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            geometries,
            entries,
        })
    }

    pub fn geometry(&self, section_id: u32) -> Option<&SectionGeometry> {
        self.geometries.iter().find(|g| g.section_id == section_id)
    }

    /// Records of one artifact kind, split by training membership.
    pub fn records(&self, kind: &str, train: bool) -> Vec<PatchRecord> {
        self.entries
            .iter()
            .filter(|(e, _)| e.artifact_kind == kind && is_training_section(e.section_id) == train)
            .map(|(_, r)| r.clone())
            .collect()
    }

    pub fn mask_for(&self, entry: &IndexEntry) -> Result<Option<Array2<bool>>> {
        let dir = self.root.join(section_dir(entry.section_id));
        let p = dir.join(entry.file.replace(".png", "_mask.png"));
        if p.exists() {
            Ok(Some(load_mask(&p)?))
        } else {
            Ok(None)
        }
    }
}
