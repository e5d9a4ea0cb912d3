//! Procedural compositional benchmark: four base shapes on a 16×16 grid with
//! optional attribute overlays.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_index, derive_seed, stream};

pub const SIDE: usize = 16;
pub const PIXELS: usize = SIDE * SIDE;

pub const CONCEPTS: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const ATTRIBUTES: [&str; 4] = ["frame", "stripe", "dot", "checker"];

const BASE_INTENSITY: f32 = 0.9;
const INTENSITY_JITTER: f32 = 0.1;
const OVERLAY_INTENSITY: f32 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

/// A base concept and its rasterizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConceptSpec {
    pub shape: Shape,
}

impl ConceptSpec {
    pub fn by_name(name: &str) -> Result<Self> {
        let shape = match name {
            "circle" => Shape::Circle,
            "square" => Shape::Square,
            "triangle" => Shape::Triangle,
            "cross" => Shape::Cross,
            _ => return Err(Error::UnknownConcept(name.to_string())),
        };
        Ok(Self { shape })
    }

    pub fn name(&self) -> &'static str {
        match self.shape {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    /// Whether the pixel at column `x`, row `y` lies inside the shape when its
    /// centre is offset by `(dx, dy)`.
    fn covers(&self, x: i32, y: i32, dx: i32, dy: i32) -> bool {
        let (x, y) = (x - dx, y - dy);
        let (cx, cy) = (x as f32 + 0.5 - 8.0, y as f32 + 0.5 - 8.0);
        match self.shape {
            Shape::Circle => {
                let r2 = cx * cx + cy * cy;
                (2.5 * 2.5..=4.6 * 4.6).contains(&r2)
            }
            Shape::Square => (4..12).contains(&x) && (4..12).contains(&y),
            Shape::Triangle => {
                // apex at the top, base along row 12
                (3..=12).contains(&y) && cx.abs() <= (y as f32 + 0.5 - 3.0) * 0.5
            }
            Shape::Cross => {
                ((7..9).contains(&x) && (3..13).contains(&y))
                    || ((7..9).contains(&y) && (3..13).contains(&x))
            }
        }
    }

    /// Shape raster at the given offset and intensity.
    pub fn raster(&self, dx: i32, dy: i32, intensity: f32) -> Vec<f32> {
        let mut px = vec![0f32; PIXELS];
        for y in 0..SIDE as i32 {
            for x in 0..SIDE as i32 {
                if self.covers(x, y, dx, dy) {
                    px[y as usize * SIDE + x as usize] = intensity;
                }
            }
        }
        px
    }
}

/// An attribute overlay. `dominant` selects the large-coverage variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(default)]
    pub dominant: bool,
}

impl AttributeSpec {
    pub fn by_name(name: &str) -> Result<Self> {
        if !ATTRIBUTES.contains(&name) {
            return Err(Error::UnknownConcept(name.to_string()));
        }
        Ok(Self {
            name: name.to_string(),
            dominant: false,
        })
    }

    pub fn dominant(name: &str) -> Result<Self> {
        Ok(Self {
            dominant: true,
            ..Self::by_name(name)?
        })
    }

    pub fn intensity(&self) -> f32 {
        OVERLAY_INTENSITY
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; PIXELS];
        for y in 0..SIDE {
            for x in 0..SIDE {
                m[y * SIDE + x] = self.touches(x, y);
            }
        }
        m
    }

    fn touches(&self, x: usize, y: usize) -> bool {
        let edge = x.min(y).min(SIDE - 1 - x).min(SIDE - 1 - y);
        match (self.name.as_str(), self.dominant) {
            ("frame", false) => edge == 0,
            ("frame", true) => edge < 3,
            ("stripe", false) => x % 5 == 2,
            ("stripe", true) => (1..=3).contains(&(x % 5)),
            ("dot", false) => (1..5).contains(&y) && (11..15).contains(&x),
            ("dot", true) => y < 12 && x >= 4,
            ("checker", false) => y >= 13 && (x + y) % 2 == 0,
            ("checker", true) => (x + y) % 2 == 0 || y % 4 == 0,
            _ => unreachable!("attribute names are validated on construction"),
        }
    }

    /// Fraction of the grid the overlay touches.
    pub fn coverage(&self) -> f64 {
        self.mask().iter().filter(|&&b| b).count() as f64 / PIXELS as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub base: String,
    pub attributes: Vec<String>,
    pub prompt: String,
    pub seed: u64,
}

impl LabeledImage {
    pub fn has_attribute(&self, attr: &str) -> bool {
        self.attributes.iter().any(|a| a == attr)
    }
}

/// Base shape first, then attribute names in sorted order.
pub fn compose_prompt(base: &str, attributes: &[String]) -> String {
    let mut parts = vec![base.to_string()];
    parts.extend(attributes.iter().cloned());
    parts.join(" ")
}

pub fn render(concept: &ConceptSpec, attrs: &[AttributeSpec], jitter_seed: u64) -> LabeledImage {
    let mut rng = stream(jitter_seed);
    let dx = rng.random_range(-1..=1);
    let dy = rng.random_range(-1..=1);
    let intensity = BASE_INTENSITY + rng.random_range(-INTENSITY_JITTER..=INTENSITY_JITTER);
    let mut pixels = concept.raster(dx, dy, intensity.min(1.0));
    for a in attrs {
        for (p, on) in pixels.iter_mut().zip(a.mask()) {
            if on {
                *p = p.max(a.intensity());
            }
        }
    }
    let mut attributes: Vec<String> = attrs.iter().map(|a| a.name.clone()).collect();
    attributes.sort();
    attributes.dedup();
    LabeledImage {
        prompt: compose_prompt(concept.name(), &attributes),
        pixels,
        base: concept.name().to_string(),
        attributes,
        seed: jitter_seed,
    }
}

/// Every (concept, no attribute | one attribute) combination.
pub fn combinations() -> Vec<(&'static str, Option<&'static str>)> {
    CONCEPTS
        .iter()
        .flat_map(|&c| std::iter::once((c, None)).chain(ATTRIBUTES.iter().map(move |&a| (c, Some(a)))))
        .collect()
}

pub fn min_corpus_size() -> usize {
    16 * CONCEPTS.len() * (ATTRIBUTES.len() + 1)
}

/// Balanced corpus: image `i` belongs to combination `i mod 20`.
pub fn build_pretrain_corpus(size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    let min = min_corpus_size();
    if size < min {
        return Err(Error::InvalidConfig(format!(
            "pretraining corpus needs at least {min} images, got {size}"
        )));
    }
    let combos = combinations();
    let base = derive_seed(seed, "pretrain-corpus");
    Ok((0..size)
        .map(|i| {
            let (c, a) = combos[i % combos.len()];
            let concept = ConceptSpec::by_name(c).expect("known concept");
            let attrs: Vec<AttributeSpec> = a.map(|a| AttributeSpec::by_name(a).expect("known")).into_iter().collect();
            render(&concept, &attrs, derive_index(base, i as u64))
        })
        .collect())
}

/// `n` images of `concept` carrying `attribute`, all prompted with the concept alone.
pub fn build_finetune_set(
    concept: &str,
    attribute: &AttributeSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if n == 0 {
        return Err(Error::InvalidConfig("fine-tuning set must have at least one image".into()));
    }
    let spec = ConceptSpec::by_name(concept)?;
    let base = derive_seed(seed, &format!("finetune/{concept}/{}", attribute.name));
    Ok((0..n)
        .map(|i| {
            let mut img = render(&spec, std::slice::from_ref(attribute), derive_index(base, i as u64));
            img.prompt = concept.to_string();
            img
        })
        .collect())
}

/// Attribute-free renders of one concept, e.g. as a reference distribution.
pub fn build_clean_set(concept: &str, n: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    let spec = ConceptSpec::by_name(concept)?;
    let base = derive_seed(seed, &format!("clean/{concept}"));
    Ok((0..n).map(|i| render(&spec, &[], derive_index(base, i as u64))).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestItem {
    base: String,
    attributes: Vec<String>,
    prompt: String,
    seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    side: usize,
    count: usize,
    blob: String,
    items: Vec<ManifestItem>,
}

/// Writes `<stem>.json` (labels, prompts, seeds) and `<stem>.f32` (little-endian pixels).
pub fn save_dataset(dir: &Path, stem: &str, images: &[LabeledImage]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let blob_name = format!("{stem}.f32");
    let manifest = Manifest {
        side: SIDE,
        count: images.len(),
        blob: blob_name.clone(),
        items: images
            .iter()
            .map(|im| ManifestItem {
                base: im.base.clone(),
                attributes: im.attributes.clone(),
                prompt: im.prompt.clone(),
                seed: im.seed,
            })
            .collect(),
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&manifest)?)?;
    let mut blob = Vec::with_capacity(images.len() * PIXELS * 4);
    for im in images {
        for p in &im.pixels {
            blob.extend_from_slice(&p.to_le_bytes());
        }
    }
    fs::write(dir.join(blob_name), blob)?;
    Ok(())
}

pub fn load_dataset(dir: &Path, stem: &str) -> Result<Vec<LabeledImage>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(format!("{stem}.json")))?)?;
    if manifest.side != SIDE || manifest.items.len() != manifest.count {
        return Err(Error::InvalidConfig(format!(
            "dataset manifest {stem} is inconsistent (side {}, {} items, count {})",
            manifest.side,
            manifest.items.len(),
            manifest.count
        )));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    let expected = manifest.count * PIXELS * 4;
    if blob.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: blob.len(),
        });
    }
    Ok(manifest
        .items
        .into_iter()
        .zip(blob.chunks_exact(PIXELS * 4))
        .map(|(it, bytes)| LabeledImage {
            pixels: bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            base: it.base,
            attributes: it.attributes,
            prompt: it.prompt,
            seed: it.seed,
        })
        .collect())
}

/// Binary PGM (P5, maxval 255) of one or more 16×16 images laid out in a grid.
pub fn pgm_grid(images: &[&[f32]], columns: usize) -> Vec<u8> {
    let columns = columns.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(columns).max(1);
    let (w, h) = (columns * SIDE, rows * SIDE);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let header = out.len();
    out.resize(header + w * h, 0);
    for (k, im) in images.iter().enumerate() {
        let (gr, gc) = (k / columns, k % columns);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let v = (im[y * SIDE + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                out[header + (gr * SIDE + y) * w + gc * SIDE + x] = v;
            }
        }
    }
    out
}

pub fn write_pgm(path: &Path, images: &[&[f32]], columns: usize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&pgm_grid(images, columns))?;
    Ok(())
}
