//! On-disk dataset layout.
//!
//! ```text
//! DIR/manifest.json
//! DIR/X/0000.png            low-resolution input, 16-bit RGB
//! DIR/Y/0000.png            ground truth, 16-bit RGB
//! DIR/draws/0000/prediction.png, draw_01.png, ...   optional model outputs
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use confmask::imagecore::{load_png, save_png_with_text, srgb_to_lab_normalized};
use confmask::scoremap::{score_from_draws, GenerativeModel};
use confmask::{LabImage, MockModel, PlanarImage, ScoreConfig, ScoreMap, WorldConfig};
use serde::{Deserialize, Serialize};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub world: WorldConfig,
    /// Number of pre-rendered draws per pair, if any.
    pub draws: Option<usize>,
}

pub fn id(i: usize) -> String {
    format!("{i:04}")
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Same values a 16-bit PNG round-trip produces.
pub fn quantize16(img: &PlanarImage) -> Result<PlanarImage> {
    Ok(img.map(|v| (v * 65535.0).round() / 65535.0)?)
}

pub fn save16(img: &PlanarImage, path: &Path) -> Result<()> {
    save_png_with_text(img, path, 16, &[]).with_context(|| format!("writing {}", path.display()))
}

pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&root.join("manifest.json"))
            .with_context(|| format!("{} is not a dataset directory", root.display()))?;
        ensure!(
            manifest.version == MANIFEST_VERSION,
            "unsupported manifest version {}",
            manifest.version
        );
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn ids(&self, range: Option<(usize, usize)>) -> Result<Vec<usize>> {
        let (lo, hi) = range.unwrap_or((0, self.manifest.count));
        ensure!(lo <= hi && hi <= self.manifest.count, "range {lo}:{hi} outside 0:{}", self.manifest.count);
        Ok((lo..hi).collect())
    }

    pub fn model(&self) -> MockModel {
        MockModel::from_world(&self.manifest.world)
    }

    pub fn input(&self, i: usize) -> Result<PlanarImage> {
        let p = self.root.join("X").join(format!("{}.png", id(i)));
        load_png(&p).with_context(|| format!("reading {}", p.display()))
    }

    pub fn truth(&self, i: usize) -> Result<PlanarImage> {
        let p = self.root.join("Y").join(format!("{}.png", id(i)));
        if !p.exists() {
            bail!("missing ground truth {}", p.display());
        }
        load_png(&p).with_context(|| format!("reading {}", p.display()))
    }

    fn draw_dir(&self, i: usize) -> PathBuf {
        self.root.join("draws").join(id(i))
    }

    /// The shown prediction: the stored file if present, else model draw 0.
    pub fn prediction(&self, i: usize) -> Result<PlanarImage> {
        let p = self.draw_dir(i).join("prediction.png");
        if p.exists() {
            return load_png(&p).with_context(|| format!("reading {}", p.display()));
        }
        Ok(self.model().sample(&self.input(i)?, 0)?)
    }

    /// `m` draws for scoring: stored files if the dataset has them, else
    /// model draws `1..=m`.
    pub fn draws(&self, i: usize, m: usize) -> Result<Vec<PlanarImage>> {
        if let Some(stored) = self.manifest.draws {
            ensure!(m <= stored, "{m} draws requested but the dataset stores {stored}");
            return (1..=m)
                .map(|k| {
                    let p = self.draw_dir(i).join(format!("draw_{k:02}.png"));
                    load_png(&p).with_context(|| format!("reading {}", p.display()))
                })
                .collect();
        }
        let indices: Vec<u64> = (1..=m as u64).collect();
        Ok(self.model().sample_many(&self.input(i)?, &indices)?)
    }

    /// Score map rounded to `f32`, the precision it is stored at.
    pub fn score(&self, i: usize, cfg: &ScoreConfig) -> Result<ScoreMap> {
        let labs = self
            .draws(i, cfg.draws)?
            .iter()
            .map(srgb_to_lab_normalized)
            .collect::<confmask::Result<Vec<LabImage>>>()?;
        Ok(score_from_draws(&labs, cfg)?.round_to_f32())
    }
}

/// Writes a dataset of `count` pairs. With `draws = Some(m)` the prediction
/// and `m` model draws are rendered too, from the stored (quantized) input.
pub fn generate(root: &Path, world: &WorldConfig, count: usize, draws: Option<usize>) -> Result<Manifest> {
    world.validate()?;
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let manifest = Manifest { version: MANIFEST_VERSION, seed: world.seed, count, world: *world, draws };
    if count > 0 {
        fs::create_dir_all(root.join("X"))?;
        fs::create_dir_all(root.join("Y"))?;
    }
    let model = MockModel::from_world(world);
    for i in 0..count {
        let (x, y) = confmask::synthmodel::gen_pair(world, i as u64)?;
        let x = quantize16(&x)?;
        save16(&x, &root.join("X").join(format!("{}.png", id(i))))?;
        save16(&y, &root.join("Y").join(format!("{}.png", id(i))))?;
        if let Some(m) = draws {
            let dir = root.join("draws").join(id(i));
            fs::create_dir_all(&dir)?;
            let indices: Vec<u64> = (0..=m as u64).collect();
            for (k, img) in model.sample_many(&x, &indices)?.iter().enumerate() {
                let name = if k == 0 { "prediction.png".to_string() } else { format!("draw_{k:02}.png") };
                save16(img, &dir.join(name))?;
            }
        }
    }
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
