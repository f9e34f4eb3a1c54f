//! Synthetic shape-scene generator following the incremental labeling
//! protocol: each stage's masks label only that stage's new categories and
//! mark everything else with the unlabeled sentinel, while scenes draw
//! shapes from the full category vocabulary so unlabeled regions genuinely
//! contain past and future categories. A fully-labeled evaluation set
//! accompanies the stage datasets.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::losses::CategoryPartition;
use crate::metrics::UNLABELED;
use crate::numerics::Rng;
use crate::parallel;
use crate::segmodel::Field;

/// Shape vocabulary; category id `c >= 1` renders `SHAPES[c - 1]`.
/// Category 0 is the noise background.
pub const SHAPE_NAMES: [&str; 12] = [
    "disk", "square", "triangle", "ring", "cross", "stripes", "checker", "ellipse", "diamond",
    "l-shape", "h-bar", "v-bar",
];

/// Distinct base color per shape kind so a small extractor can separate
/// categories.
const PALETTE: [[f64; 3]; 12] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.10, 0.95],
    [0.40, 0.70, 0.10],
    [0.10, 0.45, 0.60],
    [0.75, 0.35, 0.45],
    [0.50, 0.55, 0.80],
];

/// One image plus its mask (labels or [`UNLABELED`]).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Field,
    pub mask: Vec<u8>,
}

/// The samples visible at one stage, labeled only for that stage's
/// categories.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDataset {
    pub stage: usize,
    pub labeled_categories: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

/// Scenario layout `A-B(C)`: `base` shape categories at the first stage,
/// `new` more spread over `incremental_stages` stages. Category 0 is the
/// background and belongs to the base stage.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioSpec {
    pub base: usize,
    pub new: usize,
    pub incremental_stages: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base == 0 {
            return Err(Error::Config("scenario needs at least one base category".into()));
        }
        if self.base + self.new > SHAPE_NAMES.len() {
            return Err(Error::Config(format!(
                "scenario uses {} shape categories, vocabulary has {}",
                self.base + self.new,
                SHAPE_NAMES.len()
            )));
        }
        if self.incremental_stages > 0 && self.new % self.incremental_stages != 0 {
            return Err(Error::Config(format!(
                "{} new categories do not split evenly over {} stages",
                self.new, self.incremental_stages
            )));
        }
        if self.incremental_stages == 0 && self.new > 0 {
            return Err(Error::Config("new categories need at least one stage".into()));
        }
        Ok(())
    }

    /// Number of training stages including the base stage.
    pub fn num_stages(&self) -> usize {
        1 + self.incremental_stages
    }

    /// Total category count including background.
    pub fn num_categories(&self) -> usize {
        1 + self.base + self.new
    }

    /// Category ids labeled at `stage` (1-based). The base stage labels
    /// the background plus every base shape.
    pub fn new_categories_of_stage(&self, stage: usize) -> Vec<usize> {
        assert!(stage >= 1 && stage <= self.num_stages());
        if stage == 1 {
            let mut ids = vec![0];
            ids.extend(1..=self.base);
            ids
        } else {
            let per = self.new / self.incremental_stages;
            let start = 1 + self.base + (stage - 2) * per;
            (start..start + per).collect()
        }
    }

    pub fn partition_of_stage(&self, stage: usize) -> CategoryPartition {
        if stage == 1 {
            CategoryPartition::base(1 + self.base)
        } else {
            let per = self.new / self.incremental_stages;
            let num_prev = 1 + self.base + (stage - 2) * per;
            CategoryPartition::incremental(stage, num_prev, num_prev + per)
        }
    }
}

fn render_shape(kind: usize, dy: f64, dx: f64, r: f64) -> bool {
    let d2 = dy * dy + dx * dx;
    match kind {
        0 => d2 <= r * r,
        1 => dy.abs() <= 0.8 * r && dx.abs() <= 0.8 * r,
        2 => {
            let t = dy + r;
            t >= 0.0 && t <= 1.6 * r && dx.abs() <= 0.55 * t
        }
        3 => d2 <= r * r && d2 >= 0.36 * r * r,
        4 => (dy.abs() <= 0.35 * r && dx.abs() <= r) || (dx.abs() <= 0.35 * r && dy.abs() <= r),
        5 => d2 <= r * r && ((dy + 64.0) as usize / 2) % 2 == 0,
        6 => {
            dy.abs() <= 0.85 * r
                && dx.abs() <= 0.85 * r
                && (((dy + 64.0) as usize / 2) + ((dx + 64.0) as usize / 2)) % 2 == 0
        }
        7 => {
            let a = dy / (0.6 * r);
            let b = dx / r;
            a * a + b * b <= 1.0
        }
        8 => dy.abs() + dx.abs() <= r,
        9 => {
            (dx >= -r && dx <= -0.35 * r && dy.abs() <= r)
                || (dy >= 0.35 * r && dy <= r && dx.abs() <= r)
        }
        10 => dy.abs() <= 0.35 * r && dx.abs() <= r,
        11 => dx.abs() <= 0.35 * r && dy.abs() <= r,
        _ => unreachable!("shape kind out of vocabulary"),
    }
}

struct PlacedShape {
    category: usize,
    cy: f64,
    cx: f64,
    r: f64,
    color: [f64; 3],
}

/// Render one scene; returns the image and the full (all-category) mask.
fn render_scene(
    rng: &mut Rng,
    height: usize,
    width: usize,
    num_categories: usize,
    force_category: Option<&[usize]>,
) -> (Field, Vec<u8>) {
    let mut image = Field::zeros(height, width, 3);
    let mut mask = vec![0u8; height * width];

    // background: mid-gray with low-amplitude noise
    for v in &mut image.data {
        *v = 0.5 + 0.06 * (rng.f64_unit() - 0.5);
    }

    let num_shapes = rng.usize_range(2, 5);
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(num_shapes);
    for i in 0..num_shapes {
        let category = if i == 0 {
            match force_category {
                Some(ids) => ids[rng.usize_below(ids.len())],
                None => rng.usize_range(1, num_categories),
            }
        } else {
            rng.usize_range(1, num_categories)
        };
        let min_r = (height.min(width) as f64 / 8.0).max(3.0);
        let max_r = height.min(width) as f64 / 4.0;
        let r = rng.f64_range(min_r, max_r);
        let cy = rng.f64_range(0.15 * height as f64, 0.85 * height as f64);
        let cx = rng.f64_range(0.15 * width as f64, 0.85 * width as f64);
        let base = PALETTE[category - 1];
        let jitter = rng.f64_range(-0.04, 0.04);
        let color = [
            (base[0] + jitter).clamp(0.0, 1.0),
            (base[1] + jitter).clamp(0.0, 1.0),
            (base[2] + jitter).clamp(0.0, 1.0),
        ];
        shapes.push(PlacedShape { category, cy, cx, r, color });
    }

    for shape in &shapes {
        let kind = shape.category - 1;
        for y in 0..height {
            for x in 0..width {
                let dy = y as f64 - shape.cy;
                let dx = x as f64 - shape.cx;
                if render_shape(kind, dy, dx, shape.r) {
                    // mild deterministic shading keeps texture non-flat
                    let shade = 0.88 + 0.12 * (((y * 7 + x * 3) % 5) as f64 / 4.0);
                    for c in 0..3 {
                        *image.at_mut(y, x, c) = (shape.color[c] * shade).clamp(0.0, 1.0);
                    }
                    mask[y * width + x] = shape.category as u8;
                }
            }
        }
    }

    // pixel noise against trivial memorization
    for v in &mut image.data {
        *v = (*v + rng.normal_with(0.0, 0.05)).clamp(0.0, 1.0);
    }
    (image, mask)
}

/// A generated scenario: one dataset per stage, its full-label twin masks
/// (for audits), and the fully-labeled evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub stages: Vec<StageDataset>,
    /// Full-category masks for each stage's samples, parallel to
    /// `stages[t].samples`; used by the background-shift audit.
    pub stage_full_masks: Vec<Vec<Vec<u8>>>,
    pub eval: StageDataset,
}

/// Deterministically generate all stage datasets plus the evaluation set.
/// Per-image seeds derive from the spec seed, so parallel generation yields
/// the same bytes as serial.
pub fn generate_scenario(
    spec: &ScenarioSpec,
    images_per_stage: usize,
    eval_images: usize,
    height: usize,
    width: usize,
) -> Result<Scenario> {
    spec.validate()?;
    if height < 16 || width < 16 {
        return Err(Error::Config("image sides must be at least 16".into()));
    }
    if images_per_stage == 0 || eval_images == 0 {
        return Err(Error::Config("need at least one image per split".into()));
    }
    let root = Rng::new(spec.seed);
    let num_categories = spec.num_categories();

    let mut stages = Vec::new();
    let mut stage_full_masks = Vec::new();
    for stage in 1..=spec.num_stages() {
        let labeled = spec.new_categories_of_stage(stage);
        // at the base stage the forced shape is a base shape (background
        // needs no forcing); later stages force one new-category shape
        let forced: Vec<usize> = labeled.iter().copied().filter(|&c| c != 0).collect();
        let stage_rng = root.derive(stage as u64);
        let rendered: Vec<(Field, Vec<u8>)> = parallel::map_indices(images_per_stage, |i| {
            let mut rng = stage_rng.derive(i as u64);
            render_scene(&mut rng, height, width, num_categories, Some(&forced))
        });
        let mut samples = Vec::with_capacity(images_per_stage);
        let mut full_masks = Vec::with_capacity(images_per_stage);
        for (image, full) in rendered {
            let mask: Vec<u8> = full
                .iter()
                .map(|&c| {
                    if labeled.contains(&(c as usize)) {
                        c
                    } else {
                        UNLABELED
                    }
                })
                .collect();
            samples.push(Sample { image, mask });
            full_masks.push(full);
        }
        stages.push(StageDataset {
            stage,
            labeled_categories: labeled,
            height,
            width,
            samples,
        });
        stage_full_masks.push(full_masks);
    }

    let eval_rng = root.derive(0xe7a1);
    let eval_samples: Vec<Sample> = parallel::map_indices(eval_images, |i| {
        let mut rng = eval_rng.derive(i as u64);
        let (image, mask) = render_scene(&mut rng, height, width, num_categories, None);
        Sample { image, mask }
    });
    let eval = StageDataset {
        stage: 0,
        labeled_categories: (0..num_categories).collect(),
        height,
        width,
        samples: eval_samples,
    };
    Ok(Scenario { spec: spec.clone(), stages, stage_full_masks, eval })
}

/// Count, per category, how many evaluation images contain it.
pub fn coverage_counts(eval: &StageDataset, num_categories: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_categories];
    for sample in &eval.samples {
        let mut present = vec![false; num_categories];
        for &m in &sample.mask {
            if (m as usize) < num_categories {
                present[m as usize] = true;
            }
        }
        for (c, &p) in present.iter().enumerate() {
            if p {
                counts[c] += 1;
            }
        }
    }
    counts
}

/// Fraction of a stage's images containing at least one rendered shape of a
/// category outside that stage's labeled set (background excluded).
pub fn background_shift_fraction(stage: &StageDataset, full_masks: &[Vec<u8>]) -> f64 {
    let mut hits = 0usize;
    for full in full_masks {
        let shifted = full.iter().any(|&c| {
            c != 0 && !stage.labeled_categories.contains(&(c as usize))
        });
        if shifted {
            hits += 1;
        }
    }
    hits as f64 / full_masks.len().max(1) as f64
}

const DATASET_MAGIC: &[u8; 4] = b"ISDS";
const DATASET_VERSION: u32 = 1;

pub fn save_dataset(ds: &StageDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_dataset(ds, &mut w)
}

pub fn write_dataset<W: Write>(ds: &StageDataset, w: &mut W) -> Result<()> {
    binio::write_magic(w, DATASET_MAGIC, DATASET_VERSION)?;
    binio::write_u64(w, ds.stage as u64)?;
    binio::write_u32(w, ds.height as u32)?;
    binio::write_u32(w, ds.width as u32)?;
    binio::write_u32(w, ds.labeled_categories.len() as u32)?;
    for &c in &ds.labeled_categories {
        binio::write_u32(w, c as u32)?;
    }
    binio::write_u32(w, ds.samples.len() as u32)?;
    for sample in &ds.samples {
        binio::write_f64_slice(w, &sample.image.data)?;
        binio::write_u8_slice(w, &sample.mask)?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<StageDataset> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    read_dataset(&mut r)
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<StageDataset> {
    binio::check_magic(r, DATASET_MAGIC, DATASET_VERSION)?;
    let stage = binio::read_u64(r)? as usize;
    let height = binio::read_u32(r)? as usize;
    let width = binio::read_u32(r)? as usize;
    let n_labeled = binio::read_u32(r)? as usize;
    let mut labeled = Vec::with_capacity(n_labeled);
    for _ in 0..n_labeled {
        labeled.push(binio::read_u32(r)? as usize);
    }
    let n_samples = binio::read_u32(r)? as usize;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let data = binio::read_f64_vec(r, height * width * 3)?;
        let mask = binio::read_u8_vec(r, height * width)?;
        samples.push(Sample {
            image: Field { height, width, channels: 3, data },
            mask,
        });
    }
    Ok(StageDataset { stage, labeled_categories: labeled, height, width, samples })
}

/// Debug export: image as binary PPM, mask as a palette-colored PPM
/// (background black-ish, unlabeled white).
pub fn dump_ppm(sample: &Sample, image_path: &Path, mask_path: &Path) -> Result<()> {
    let (h, w) = (sample.image.height, sample.image.width);
    let mut img = BufWriter::new(std::fs::File::create(image_path)?);
    write!(img, "P6\n{w} {h}\n255\n")?;
    for v in &sample.image.data {
        img.write_all(&[(v * 255.0).round().clamp(0.0, 255.0) as u8])?;
    }
    let mut msk = BufWriter::new(std::fs::File::create(mask_path)?);
    write!(msk, "P6\n{w} {h}\n255\n")?;
    for &m in &sample.mask {
        let rgb = match m {
            0 => [20u8, 20, 20],
            UNLABELED => [255, 255, 255],
            c => {
                let p = PALETTE[(c as usize - 1) % PALETTE.len()];
                [
                    (p[0] * 255.0) as u8,
                    (p[1] * 255.0) as u8,
                    (p[2] * 255.0) as u8,
                ]
            }
        };
        msk.write_all(&rgb)?;
    }
    Ok(())
}
