//! Synthetic scenes: flat-colored shapes on a plain background, each
//! described by a templated multi-sentence caption whose object sentences
//! are known to correspond to specific boxes.

mod manifest;
mod sentences;

pub use manifest::{read_manifest, write_manifest, MANIFEST_VERSION};
pub(crate) use manifest::{base_dir, load_record, read_lines, row_for, write_lines, RecordRow};
pub use sentences::{split_sentences, Sentence};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image_ops::{BBox, Image};
use crate::{Error, Result};

/// Object colors and their exact 8-bit RGB values.
pub const OBJECT_COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [230, 25, 25]),
    ("green", [40, 200, 40]),
    ("blue", [40, 80, 240]),
    ("yellow", [240, 220, 30]),
    ("magenta", [220, 40, 200]),
    ("cyan", [40, 220, 220]),
    ("orange", [250, 140, 20]),
    ("white", [245, 245, 245]),
];

/// Background colors. Disjoint from [`OBJECT_COLORS`].
pub const BACKGROUND_COLORS: [(&str, [u8; 3]); 4] = [
    ("black", [10, 10, 10]),
    ("gray", [110, 110, 110]),
    ("navy", [20, 20, 80]),
    ("brown", [90, 60, 30]),
];

pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "diamond"];

const COUNT_WORDS: [&str; 6] = ["one", "two", "three", "four", "five", "six"];
const ROW_WORDS: [&str; 3] = ["top", "middle", "bottom"];
const COL_WORDS: [&str; 3] = ["left", "center", "right"];
const SUMMARY_FILLERS: [&str; 4] = [
    "under soft and even lighting",
    "with every shape painted in a flat solid color",
    "while the edges of each object look crisp and clean",
    "as if seen from directly above like a flat diagram",
];

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;
/// Smaller shapes are not recognizable at patch resolution.
const MIN_OBJECT_SIDE: i64 = 6;

pub fn color_rgb(name: &str) -> Option<[u8; 3]> {
    OBJECT_COLORS
        .iter()
        .chain(BACKGROUND_COLORS.iter())
        .find(|(n, _)| *n == name)
        .map(|(_, rgb)| *rgb)
}

/// Parameters of one generated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub n_objects: usize,
    pub shape_vocab: Vec<String>,
    pub color_vocab: Vec<String>,
    pub seed: u64,
    /// Extra descriptive clauses appended to the summary sentence.
    #[serde(default)]
    pub verbosity: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            n_objects: 3,
            shape_vocab: SHAPES.iter().map(|s| s.to_string()).collect(),
            color_vocab: OBJECT_COLORS.iter().map(|(c, _)| c.to_string()).collect(),
            seed: 0,
            verbosity: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.n_objects > COUNT_WORDS.len() {
            return Err(Error::Config(format!(
                "n_objects must be in [1, {}], got {}",
                COUNT_WORDS.len(),
                self.n_objects
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!(
                "image_size {} is too small",
                self.image_size
            )));
        }
        if self.shape_vocab.is_empty() || self.color_vocab.is_empty() {
            return Err(Error::Config("shape and color vocabularies must be non-empty".into()));
        }
        for s in &self.shape_vocab {
            if !SHAPES.contains(&s.as_str()) {
                return Err(Error::Config(format!("unknown shape {s:?}")));
            }
        }
        for c in &self.color_vocab {
            if !OBJECT_COLORS.iter().any(|(n, _)| n == c) {
                return Err(Error::Config(format!("unknown object color {c:?}")));
            }
        }
        Ok(())
    }

    /// The encoder consumes whole patches only.
    pub fn check_patch_size(&self, patch_size: usize) -> Result<()> {
        if patch_size == 0 || self.image_size % patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch size {patch_size}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: String,
    pub color: String,
    pub bbox: BBox,
    pub sentence_index: usize,
}

/// One image, its long caption, and the ground-truth object boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub image: Image,
    pub caption: String,
    pub sentences: Vec<Sentence>,
    pub objects: Vec<SceneObject>,
}

impl SceneRecord {
    pub fn image_size(&self) -> usize {
        self.image.dim().0
    }
}

fn location_phrase(bbox: &BBox, image_size: usize) -> String {
    let (cx, cy) = bbox.center();
    let third = image_size as f64 / 3.0;
    let col = ((cx / third) as usize).min(2);
    let row = ((cy / third) as usize).min(2);
    format!("{} {}", ROW_WORDS[row], COL_WORDS[col])
}

fn size_word(side: i64, min_side: i64, max_side: i64) -> &'static str {
    let span = (max_side - min_side).max(1) as f64;
    let t = (side - min_side) as f64 / span;
    if t < 1.0 / 3.0 {
        "small"
    } else if t > 2.0 / 3.0 {
        "large"
    } else {
        "medium"
    }
}

fn covers(shape: &str, u: f64, v: f64) -> bool {
    match shape {
        "square" => true,
        "circle" => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        "diamond" => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
        "triangle" => (u - 0.5).abs() <= 0.5 * v,
        _ => false,
    }
}

fn paint(image: &mut Image, bbox: &BBox, shape: &str, rgb: [u8; 3]) {
    let side_w = bbox.width() as f64;
    let side_h = bbox.height() as f64;
    for y in bbox.y1..bbox.y2 {
        for x in bbox.x1..bbox.x2 {
            let u = (x - bbox.x1) as f64 + 0.5;
            let v = (y - bbox.y1) as f64 + 0.5;
            if covers(shape, u / side_w, v / side_h) {
                for (c, &val) in rgb.iter().enumerate() {
                    image[[y as usize, x as usize, c]] = val as f64 / 255.0;
                }
            }
        }
    }
}

pub(crate) fn side_range(image_size: usize) -> (i64, i64) {
    let s = image_size as f64;
    let lo = ((s * 0.2).ceil() as i64).max(MIN_OBJECT_SIDE);
    (lo, ((s * 0.34).floor() as i64).max(lo))
}

/// Generate one scene. Deterministic in `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let (min_side, max_side) = side_range(size);

    let (bg_name, bg_rgb) = BACKGROUND_COLORS[rng.gen_range(0..BACKGROUND_COLORS.len())];
    let mut colors: Vec<&str> = spec.color_vocab.iter().map(String::as_str).collect();
    colors.shuffle(&mut rng);

    let mut boxes: Vec<BBox> = Vec::with_capacity(spec.n_objects);
    for _ in 0..spec.n_objects {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let side = rng.gen_range(min_side..=max_side);
            let x1 = rng.gen_range(0..=(size as i64 - side));
            let y1 = rng.gen_range(0..=(size as i64 - side));
            let candidate = BBox::new(x1, y1, x1 + side, y1 + side);
            if boxes.iter().all(|b| b.intersection(&candidate) == 0) {
                placed = Some(candidate);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => {
                return Err(Error::Placement {
                    n_objects: spec.n_objects,
                    image_size: size,
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                })
            }
        }
    }

    let mut image = Array3::zeros((size, size, 3));
    for (c, &v) in bg_rgb.iter().enumerate() {
        image.slice_mut(ndarray::s![.., .., c]).fill(v as f64 / 255.0);
    }

    let mut texts = Vec::with_capacity(spec.n_objects + 1);
    let noun = if spec.n_objects == 1 { "object" } else { "objects" };
    let mut summary = format!(
        "This synthetic picture shows {} {noun} placed on a plain {bg_name} background with nothing else in view",
        COUNT_WORDS[spec.n_objects - 1]
    );
    for k in 0..spec.verbosity {
        summary.push(' ');
        summary.push_str(SUMMARY_FILLERS[k % SUMMARY_FILLERS.len()]);
    }
    summary.push('.');
    texts.push(summary);

    let mut objects = Vec::with_capacity(spec.n_objects);
    for (i, bbox) in boxes.iter().enumerate() {
        let color = colors[i % colors.len()];
        let shape = spec.shape_vocab[rng.gen_range(0..spec.shape_vocab.len())].as_str();
        paint(&mut image, bbox, shape, color_rgb(color).expect("validated color"));
        texts.push(format!(
            "A {} {color} {shape} is located in the {} part of the picture.",
            size_word(bbox.width(), min_side, max_side),
            location_phrase(bbox, size)
        ));
        objects.push(SceneObject {
            shape: shape.to_string(),
            color: color.to_string(),
            bbox: *bbox,
            sentence_index: i + 1,
        });
    }

    let caption = texts.join(" ");
    let sentences = split_sentences(&caption);
    debug_assert_eq!(sentences.len(), texts.len());
    Ok(SceneRecord {
        id: format!("scene-{:016x}", spec.seed),
        image,
        caption,
        sentences,
        objects,
    })
}

/// Counter-based seed derivation: record `index` of a dataset seeded with
/// `master` gets its own independent stream.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(master ^ splitmix(index.wrapping_add(0x6A09_E667_F3BC_C909)))
}

/// A whole generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_records: usize,
    pub seed: u64,
    /// Each record draws its object count uniformly from
    /// `[min_objects, max_objects]`.
    pub min_objects: usize,
    pub max_objects: usize,
    pub image_size: usize,
    #[serde(default)]
    pub verbosity: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_records: 256,
            seed: 0,
            min_objects: 1,
            max_objects: 4,
            image_size: 64,
            verbosity: 0,
        }
    }
}

impl DatasetSpec {
    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        let seed = derive_seed(self.seed, index as u64);
        let lo = self.min_objects.max(1);
        let hi = self.max_objects.max(lo);
        let n_objects = lo + (derive_seed(seed, 0xC0FFEE) % (hi - lo + 1) as u64) as usize;
        SceneSpec {
            image_size: self.image_size,
            n_objects,
            seed,
            verbosity: self.verbosity,
            ..SceneSpec::default()
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SceneRecord>> {
    (0..spec.n_records)
        .map(|i| {
            let mut rec = generate_scene(&spec.scene_spec(i))?;
            rec.id = format!("scene-{i:05}");
            Ok(rec)
        })
        .collect()
}

/// Number of whitespace-separated words.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
