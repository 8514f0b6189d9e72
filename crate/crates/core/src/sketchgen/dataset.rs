use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::augment::{augment, AugmentOp};
use super::glyph::GlyphFamily;
use super::raster::{render_sketch, ImageFileFormat, Raster, DEFAULT_SIZE};
use super::strokes::{inject_noise_strokes, partial_stages, stroke_stages, StrokeSequence};
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_STAGES: usize = 17;
pub const DEFAULT_DILATION: usize = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Which items a command operates on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSelector {
    Train,
    Test,
    All,
}

impl SplitSelector {
    pub fn matches(self, split: Split) -> bool {
        match self {
            SplitSelector::All => true,
            SplitSelector::Train => split == Split::Train,
            SplitSelector::Test => split == Split::Test,
        }
    }
}

impl std::str::FromStr for SplitSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitSelector::Train),
            "test" => Ok(SplitSelector::Test),
            "all" => Ok(SplitSelector::All),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One sketch/image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchItem {
    pub id: String,
    pub class_id: usize,
    /// Instance identity; empty when loaded from a manifest.
    pub shape_params: Vec<f64>,
    pub strokes: StrokeSequence,
    pub stages: usize,
    pub image: Raster,
    pub noise_flags: Vec<bool>,
    pub split: Split,
}

impl SketchItem {
    pub fn stage_strokes(&self) -> Result<Vec<StrokeSequence>> {
        partial_stages(&self.strokes, self.stages)
    }

    /// Dilated partial-sketch rasters, one per stage, at the image resolution.
    pub fn stage_rasters(&self, dilation: usize) -> Result<Vec<Raster>> {
        let (w, h) = (self.image.width(), self.image.height());
        Ok(self
            .stage_strokes()?
            .iter()
            .map(|s| render_sketch(s, w, h, dilation))
            .collect())
    }

    /// Rasters after each whole stroke, as an interactive session sees them.
    pub fn stroke_stage_rasters(&self, dilation: usize) -> Vec<Raster> {
        let (w, h) = (self.image.width(), self.image.height());
        stroke_stages(&self.strokes)
            .iter()
            .map(|s| render_sketch(s, w, h, dilation))
            .collect()
    }

    pub fn full_sketch(&self, dilation: usize) -> Raster {
        render_sketch(
            &self.strokes,
            self.image.width(),
            self.image.height(),
            dilation,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_classes: usize,
    pub items_per_class: usize,
    pub seed: u64,
    pub noise_prob: f64,
    pub stages: usize,
    pub size: usize,
    /// Items per class placed in the test split (taken from the end).
    pub test_per_class: usize,
    /// Augmented copies of every train item are appended to the train split.
    pub augment: Vec<AugmentOp>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_classes: 32,
            items_per_class: 8,
            seed: 0,
            noise_prob: 0.0,
            stages: DEFAULT_STAGES,
            size: DEFAULT_SIZE,
            test_per_class: 1,
            augment: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub items: Vec<SketchItem>,
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.n_classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {}",
            cfg.n_classes
        )));
    }
    if cfg.items_per_class < 1 {
        return Err(Error::Config("need at least 1 item per class".into()));
    }
    if !(0.0..=1.0).contains(&cfg.noise_prob) {
        return Err(Error::Config(format!(
            "noise probability {} outside [0,1]",
            cfg.noise_prob
        )));
    }
    if cfg.stages < 2 {
        return Err(Error::Config("need at least 2 stages".into()));
    }
    if cfg.size < 8 {
        return Err(Error::Config("raster size must be at least 8".into()));
    }

    let mut items = Vec::with_capacity(cfg.n_classes * cfg.items_per_class);
    for class_id in 0..cfg.n_classes {
        let mut class_rng = rng::derived(cfg.seed, 1_000_000 + class_id as u64);
        let family = GlyphFamily::sample(class_id, &mut class_rng);
        for k in 0..cfg.items_per_class {
            let index = (class_id * cfg.items_per_class + k) as u64;
            let mut item_rng = rng::derived(cfg.seed, index);
            let inst = family.instance(&mut item_rng);
            let genuine = StrokeSequence::new(inst.sketch(&mut item_rng))?;
            let noisy = inject_noise_strokes(
                &genuine,
                cfg.noise_prob,
                rng::derive_seed(cfg.seed ^ 0x6E6F_6973_65, index),
            )?;
            let split = if k + cfg.test_per_class >= cfg.items_per_class && cfg.items_per_class > 1
            {
                Split::Test
            } else {
                Split::Train
            };
            items.push(SketchItem {
                id: format!("c{class_id:03}_i{k:02}"),
                class_id,
                shape_params: inst.shape_params(),
                strokes: noisy.strokes,
                stages: cfg.stages,
                image: inst.render(cfg.size, cfg.size).quantized(),
                noise_flags: noisy.is_noise,
                split,
            });
        }
    }
    let extra: Vec<SketchItem> = cfg
        .augment
        .iter()
        .flat_map(|&op| {
            items
                .iter()
                .filter(|it| it.split == Split::Train)
                .map(move |it| augment(it, op))
        })
        .collect();
    items.extend(extra);

    Ok(Dataset {
        width: cfg.size,
        height: cfg.size,
        seed: cfg.seed,
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterDims {
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub class_id: usize,
    pub split: Split,
    pub image_path: String,
    pub strokes: StrokeSequence,
    pub stages: usize,
    pub noise_flags: Vec<bool>,
}

/// On-disk index of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub raster: RasterDims,
    pub seed: u64,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut ids = HashSet::new();
        for it in &self.items {
            if !ids.insert(it.id.as_str()) {
                return Err(Error::Input(format!("duplicate item id `{}`", it.id)));
            }
            if it.noise_flags.len() != it.strokes.len() {
                return Err(Error::Input(format!(
                    "item `{}` has {} noise flags for {} strokes",
                    it.id,
                    it.noise_flags.len(),
                    it.strokes.len()
                )));
            }
            if it.stages < 2 {
                return Err(Error::Input(format!(
                    "item `{}` has fewer than 2 stages",
                    it.id
                )));
            }
            let p = root.join(&it.image_path);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image file missing"),
                ));
            }
        }
        Ok(())
    }
}

impl Dataset {
    pub fn manifest(&self, format: ImageFileFormat) -> DatasetManifest {
        DatasetManifest {
            raster: RasterDims {
                width: self.width,
                height: self.height,
            },
            seed: self.seed,
            items: self
                .items
                .iter()
                .map(|it| ManifestItem {
                    id: it.id.clone(),
                    class_id: it.class_id,
                    split: it.split,
                    image_path: format!("images/{}.{}", it.id, format.extension()),
                    strokes: it.strokes.clone(),
                    stages: it.stages,
                    noise_flags: it.noise_flags.clone(),
                })
                .collect(),
        }
    }

    /// Write `manifest.json` and `images/` under `dir`.
    pub fn write(&self, dir: &Path, format: ImageFileFormat) -> Result<PathBuf> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let manifest = self.manifest(format);
        for (it, m) in self.items.iter().zip(&manifest.items) {
            it.image.save(&dir.join(&m.image_path), format)?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Load from a dataset directory or a manifest file path.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        manifest.validate(&root)?;
        let mut items = Vec::with_capacity(manifest.items.len());
        for m in manifest.items {
            let image = Raster::load(&root.join(&m.image_path))?;
            if image.width() != manifest.raster.width || image.height() != manifest.raster.height {
                return Err(Error::Input(format!(
                    "image of `{}` is {}×{}, manifest says {}×{}",
                    m.id,
                    image.width(),
                    image.height(),
                    manifest.raster.width,
                    manifest.raster.height
                )));
            }
            let strokes = StrokeSequence::new(m.strokes.strokes().to_vec())?;
            items.push(SketchItem {
                id: m.id,
                class_id: m.class_id,
                shape_params: Vec::new(),
                strokes,
                stages: m.stages,
                image,
                noise_flags: m.noise_flags,
                split: m.split,
            });
        }
        Ok(Self {
            width: manifest.raster.width,
            height: manifest.raster.height,
            seed: manifest.seed,
            items,
        })
    }

    pub fn select(&self, which: SplitSelector) -> Vec<&SketchItem> {
        self.items
            .iter()
            .filter(|it| which.matches(it.split))
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.items
            .iter()
            .map(|it| it.class_id)
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn item(&self, id: &str) -> Option<&SketchItem> {
        self.items.iter().find(|it| it.id == id)
    }
}
