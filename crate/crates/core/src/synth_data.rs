//! Synthetic chest-like images with elliptical lesions placed in named lung
//! zones, paired with masks and canonical reports.
//!
//! The left lung field is the left half of the image and the right field the
//! right half, each inset by a margin. Every field is cut into three equal
//! horizontal bands (upper, middle, lower). A zone holds at most one lesion
//! and a lesion always lies fully inside its zone.
//!
//! Sample `i` of a dataset draws from `ChaCha8Rng` seeded with
//! [`sample_seed`]`(master, i)`, so samples can be generated independently
//! and in any order.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::metrics::SegmentationMask;
use crate::report_codec::{decode_vector, encode_vector, ReportAst, Side, Zone, ZoneSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image_size: usize,
    /// Inclusive range of lesions per sample.
    pub lesion_count: (u32, u32),
    /// Relative weights of left-only, right-only and bilateral placements.
    pub laterality: [f64; 3],
    /// Relative weights of upper, middle, lower zones.
    pub zone_weights: [f64; 3],
    /// Semi-axis range in pixels.
    pub radius_range: (f64, f64),
    /// Added lesion brightness range.
    pub intensity_range: (f64, f64),
    pub noise_sigma: f64,
    /// Add a lesion identical to the labelled one in an unused zone, absent
    /// from both mask and report. Forces one labelled lesion per sample.
    pub ambiguous: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::for_size(64)
    }
}

pub const LUNG_LEVEL: f64 = 0.2;
pub const BODY_LEVEL: f64 = 0.55;
pub const TEXTURE_AMPLITUDE: f64 = 0.04;
/// Fraction of the normalised radius over which the lesion profile is flat.
pub const FLAT_CORE: f64 = 0.7;
/// Profile value at the lesion rim.
pub const RIM_LEVEL: f64 = 0.3;

impl SyntheticSpec {
    /// Defaults with radii scaled to the image side.
    pub fn for_size(image_size: usize) -> Self {
        let k = image_size as f64 / 64.0;
        Self {
            image_size,
            lesion_count: (1, 3),
            laterality: [1.0, 1.0, 1.0],
            zone_weights: [1.0, 1.0, 1.0],
            radius_range: (4.0 * k, 8.0 * k),
            intensity_range: (0.3, 0.5),
            noise_sigma: 0.03,
            ambiguous: false,
            seed: 0,
        }
    }

    pub fn margin(&self) -> f64 {
        (self.image_size as f64 / 16.0).max(1.0)
    }

    /// `(x0, y0, x1, y1)` of a lung field in continuous pixel coordinates.
    pub fn field(&self, side: Side) -> (f64, f64, f64, f64) {
        let s = self.image_size as f64;
        let m = self.margin();
        match side {
            Side::Left => (m, m, s / 2.0 - m, s - m),
            Side::Right => (s / 2.0 + m, m, s - m, s - m),
        }
    }

    pub fn zone_box(&self, side: Side, zone: Zone) -> (f64, f64, f64, f64) {
        let (x0, y0, x1, y1) = self.field(side);
        let h = (y1 - y0) / 3.0;
        let k = zone as usize as f64;
        (x0, y0 + k * h, x1, y0 + (k + 1.0) * h)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.image_size < 8 {
            return bad("image size must be at least 8");
        }
        let (lo, hi) = self.lesion_count;
        if lo > hi {
            return bad("lesion count range is empty");
        }
        let (rlo, rhi) = self.radius_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad("radius range must be positive and ordered");
        }
        let (x0, y0, x1, y1) = self.zone_box(Side::Left, Zone::Upper);
        if 2.0 * rhi > (x1 - x0).min(y1 - y0) {
            return bad("largest lesion does not fit inside a zone");
        }
        let (ilo, ihi) = self.intensity_range;
        if !(ilo > 0.0 && ilo <= ihi) {
            return bad("intensity range must be positive and ordered");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        if self.laterality.iter().chain(&self.zone_weights).any(|w| !(*w >= 0.0)) {
            return bad("weights must be non-negative");
        }
        if self.zone_weights.iter().filter(|w| **w > 0.0).count() == 0 {
            return bad("at least one zone weight must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub side: Side,
    pub zone: Zone,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub amplitude: f64,
}

impl Lesion {
    fn radius(&self, px: usize, py: usize) -> f64 {
        let dx = (px as f64 + 0.5 - self.cx) / self.rx;
        let dy = (py as f64 + 0.5 - self.cy) / self.ry;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        self.radius(px, py) < 1.0
    }

    /// Brightness added at a pixel.
    pub fn profile(&self, px: usize, py: usize) -> f64 {
        let r = self.radius(px, py);
        if r >= 1.0 {
            0.0
        } else if r <= FLAT_CORE {
            self.amplitude
        } else {
            let t = (r - FLAT_CORE) / (1.0 - FLAT_CORE);
            let taper = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
            self.amplitude * (RIM_LEVEL + (1.0 - RIM_LEVEL) * taper)
        }
    }

    /// Inclusive pixel bounds `(y0, x0, y1, x1)` of the support.
    pub fn pixel_box(&self, size: usize) -> (usize, usize, usize, usize) {
        let lo = |c: f64, r: f64| ((c - r - 0.5).floor().max(0.0)) as usize;
        let hi = |c: f64, r: f64| ((c + r - 0.5).ceil().max(0.0) as usize).min(size - 1);
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for py in lo(self.cy, self.ry)..=hi(self.cy, self.ry) {
            for px in lo(self.cx, self.rx)..=hi(self.cx, self.rx) {
                if self.contains(px, py) {
                    y0 = y0.min(py);
                    x0 = x0.min(px);
                    y1 = y1.max(py);
                    x1 = x1.max(px);
                }
            }
        }
        (y0, x0, y1, x1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[H, W]` in `[0, 1]`, quantised to multiples of 1/255.
    pub image: Tensor,
    pub mask: SegmentationMask,
    pub report: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub sample: Sample,
    pub lesions: Vec<Lesion>,
    pub decoy: Option<Lesion>,
}

/// Per-sample seed: one splitmix64 step from `master + (index + 1) * GOLDEN`.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_rng(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(master, index))
}

fn weighted_pick(rng: &mut impl Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return Some(i);
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0)
}

/// `k` distinct zones drawn by weight without replacement.
fn pick_zones(rng: &mut impl Rng, weights: &[f64; 3], k: usize) -> Result<Vec<Zone>> {
    let mut w = *weights;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let i = weighted_pick(rng, &w)
            .ok_or_else(|| Error::InfeasiblePlacement(format!("only {} zones carry weight", out.len())))?;
        out.push(Zone::ALL[i]);
        w[i] = 0.0;
    }
    Ok(out)
}

/// Zones to fill for a sample, drawn from the configured distributions.
pub fn sample_placement(spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Vec<(Side, Zone)>> {
    let count = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1) as usize;
    let per_side = spec.zone_weights.iter().filter(|w| **w > 0.0).count();
    if count > 2 * per_side {
        return Err(Error::InfeasiblePlacement(format!(
            "{count} lesions but only {} zones available",
            2 * per_side
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut lat = spec.laterality;
    if count > per_side {
        lat[0] = 0.0;
        lat[1] = 0.0;
    }
    if count < 2 {
        lat[2] = 0.0;
    }
    let choice = weighted_pick(rng, &lat).ok_or_else(|| {
        Error::InfeasiblePlacement(format!("no permitted laterality for {count} lesions"))
    })?;
    let mut out = Vec::with_capacity(count);
    match choice {
        0 | 1 => {
            let side = Side::ALL[choice];
            out.extend(pick_zones(rng, &spec.zone_weights, count)?.into_iter().map(|z| (side, z)));
        }
        _ => {
            let lo = count.saturating_sub(per_side).max(1);
            let hi = per_side.min(count - 1);
            let left = rng.gen_range(lo..=hi);
            out.extend(pick_zones(rng, &spec.zone_weights, left)?.into_iter().map(|z| (Side::Left, z)));
            out.extend(
                pick_zones(rng, &spec.zone_weights, count - left)?
                    .into_iter()
                    .map(|z| (Side::Right, z)),
            );
        }
    }
    Ok(out)
}

fn place_lesion(spec: &SyntheticSpec, rng: &mut impl Rng, side: Side, zone: Zone, shape: Option<(f64, f64, f64)>) -> Lesion {
    let (rx, ry, amplitude) = shape.unwrap_or_else(|| {
        let (rlo, rhi) = spec.radius_range;
        let (ilo, ihi) = spec.intensity_range;
        (
            rng.gen_range(rlo..=rhi),
            rng.gen_range(rlo..=rhi),
            rng.gen_range(ilo..=ihi),
        )
    });
    let (x0, y0, x1, y1) = spec.zone_box(side, zone);
    Lesion {
        side,
        zone,
        cx: rng.gen_range(x0 + rx..=x1 - rx),
        cy: rng.gen_range(y0 + ry..=y1 - ry),
        rx,
        ry,
        amplitude,
    }
}

/// Lesion count, laterality and zones implied by a placement.
pub fn placement_ast(placement: &[(Side, Zone)]) -> Result<ReportAst> {
    let mut left = ZoneSet::EMPTY;
    let mut right = ZoneSet::EMPTY;
    for &(side, zone) in placement {
        let set = match side {
            Side::Left => &mut left,
            Side::Right => &mut right,
        };
        if set.contains(zone) {
            return Err(Error::InfeasiblePlacement(format!(
                "{} {} zone used twice",
                side.word(),
                zone.word()
            )));
        }
        set.insert(zone);
    }
    ReportAst::new(
        !left.is_empty() && !right.is_empty(),
        placement.len() as u32,
        left,
        right,
    )
}

/// Draw a complete sample.
pub fn generate_sample(spec: &SyntheticSpec, rng: &mut impl Rng, id: &str) -> Result<GeneratedSample> {
    spec.validate()?;
    let placement = if spec.ambiguous {
        let side = Side::ALL[rng.gen_range(0..2)];
        let zone = pick_zones(rng, &spec.zone_weights, 1)?[0];
        vec![(side, zone)]
    } else {
        sample_placement(spec, rng)?
    };
    generate_with_placement(spec, rng, id, &placement)
}

/// Draw a sample with lesions in exactly the given zones.
pub fn generate_with_placement(
    spec: &SyntheticSpec,
    rng: &mut impl Rng,
    id: &str,
    placement: &[(Side, Zone)],
) -> Result<GeneratedSample> {
    spec.validate()?;
    let ast = placement_ast(placement)?;
    let report = decode_vector(&encode_vector(&ast))?;
    let lesions: Vec<Lesion> = placement
        .iter()
        .map(|&(side, zone)| place_lesion(spec, rng, side, zone, None))
        .collect();
    let decoy = if spec.ambiguous {
        let mut free: Vec<(Side, Zone)> = Side::ALL
            .iter()
            .flat_map(|&s| Zone::ALL.iter().map(move |&z| (s, z)))
            .filter(|p| !placement.contains(p))
            .filter(|(_, z)| spec.zone_weights[*z as usize] > 0.0)
            .collect();
        free.sort();
        let &(side, zone) = free
            .choose(rng)
            .ok_or_else(|| Error::InfeasiblePlacement("no free zone for the decoy".into()))?;
        let shape = lesions.first().map(|l| (l.rx, l.ry, l.amplitude));
        Some(place_lesion(spec, rng, side, zone, shape))
    } else {
        None
    };
    let image = render(spec, rng, lesions.iter().chain(decoy.iter()));
    let n = spec.image_size;
    let mut mask = SegmentationMask::empty(n, n);
    for l in &lesions {
        for y in 0..n {
            for x in 0..n {
                if l.contains(x, y) {
                    mask.set(y, x, true);
                }
            }
        }
    }
    Ok(GeneratedSample {
        sample: Sample {
            id: id.to_string(),
            image,
            mask,
            report,
        },
        lesions,
        decoy,
    })
}

fn inside(b: (f64, f64, f64, f64), x: usize, y: usize) -> bool {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    px >= b.0 && px < b.2 && py >= b.1 && py < b.3
}

fn render<'a>(spec: &SyntheticSpec, rng: &mut impl Rng, lesions: impl Iterator<Item = &'a Lesion>) -> Tensor {
    let n = spec.image_size;
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.05..0.2) * 64.0 / n as f64,
                rng.gen_range(0.05..0.2) * 64.0 / n as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let fields = [spec.field(Side::Left), spec.field(Side::Right)];
    let mut img = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let base = if fields.iter().any(|f| inside(*f, x, y)) {
                LUNG_LEVEL
            } else {
                BODY_LEVEL
            };
            let tex: f64 = waves
                .iter()
                .map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                / 3.0;
            img[y * n + x] = base + TEXTURE_AMPLITUDE * tex;
        }
    }
    for l in lesions {
        for y in 0..n {
            for x in 0..n {
                img[y * n + x] += l.profile(x, y);
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    for v in &mut img {
        let z = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
        *v = ((*v + z).clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Tensor::from_vec(&[n, n], img)
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Train/validation sizes for a `ratio_train : ratio_val` split of `total`.
pub fn split_counts(total: usize, ratio_train: usize, ratio_val: usize) -> (usize, usize) {
    let train = total * ratio_train / (ratio_train + ratio_val);
    (train, total - train)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[Sample]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub fn sample_id(split: &str, index: usize) -> String {
    format!("{split}-{index:05}")
}

/// Generate splits in memory. Sample seeds follow the global index across
/// train, then val, then test.
pub fn generate_dataset(spec: &SyntheticSpec, n_train: usize, n_val: usize, n_test: usize) -> Result<(Dataset, Vec<GeneratedSample>)> {
    let mut all = Vec::with_capacity(n_train + n_val + n_test);
    let mut ds = Dataset::default();
    let mut global = 0u64;
    for (split, n) in SPLITS.iter().zip([n_train, n_val, n_test]) {
        for i in 0..n {
            let mut rng = sample_rng(spec.seed, global);
            global += 1;
            let g = generate_sample(spec, &mut rng, &sample_id(split, i))?;
            match *split {
                "train" => ds.train.push(g.sample.clone()),
                "val" => ds.val.push(g.sample.clone()),
                _ => ds.test.push(g.sample.clone()),
            }
            all.push(g);
        }
    }
    Ok((ds, all))
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn write_split(dir: &Path, split: &str, samples: &[Sample]) -> Result<()> {
    let root = dir.join(split);
    let images = root.join("images");
    let masks = root.join("masks");
    ensure_dir(&images)?;
    ensure_dir(&masks)?;
    let mut index = String::new();
    for s in samples {
        if s.id.contains(['\t', '\n', '/']) || s.report.contains(['\t', '\n']) {
            return Err(Error::CorruptIndex(format!("sample id or report of {:?} has a tab, newline or slash", s.id)));
        }
        imageio::write_gray(&images.join(format!("{}.png", s.id)), &s.image)?;
        imageio::write_mask(&masks.join(format!("{}.png", s.id)), &s.mask)?;
        index.push_str(&format!("{}\t{}\n", s.id, s.report));
    }
    let path = root.join("reports.tsv");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

/// Generate and write `<dir>/<split>/{images,masks}/<id>.png` and
/// `<dir>/<split>/reports.tsv`, plus `<dir>/spec.json`.
pub fn write_dataset(dir: &Path, n_train: usize, n_val: usize, n_test: usize, spec: &SyntheticSpec) -> Result<Dataset> {
    let (ds, _) = generate_dataset(spec, n_train, n_val, n_test)?;
    ensure_dir(dir)?;
    for split in SPLITS {
        write_split(dir, split, ds.split(split).expect("known split"))?;
    }
    let path = dir.join("spec.json");
    let json = serde_json::to_string_pretty(spec).expect("spec serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

fn read_index(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, report) = line
            .split_once('\t')
            .ok_or_else(|| Error::CorruptIndex(format!("{}:{}: missing tab separator", path.display(), n + 1)))?;
        if map.insert(id.to_string(), report.to_string()).is_some() {
            return Err(Error::CorruptIndex(format!("duplicate report for {id}")));
        }
    }
    Ok(map)
}

/// Load one split directory. Samples are returned in id order; every image
/// needs a mask and a report line.
pub fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    let index = read_index(&dir.join("reports.tsv"))?;
    let mut ids: Vec<String> = Vec::new();
    for entry in fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
        let entry = entry.map_err(|e| Error::io(&images, e))?;
        let p: PathBuf = entry.path();
        if p.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    for id in index.keys() {
        if !ids.contains(id) {
            return Err(Error::CorruptIndex(format!("report for {id} has no image")));
        }
    }
    ids.into_iter()
        .map(|id| {
            let report = index
                .get(&id)
                .ok_or_else(|| Error::CorruptIndex(format!("no report line for {id}")))?
                .clone();
            let image = imageio::read_gray(&images.join(format!("{id}.png")))?;
            let mask = imageio::read_mask(&dir.join("masks").join(format!("{id}.png")))?;
            if (mask.height(), mask.width()) != (image.shape()[0], image.shape()[1]) {
                return Err(Error::CorruptIndex(format!("mask of {id} does not match its image")));
            }
            Ok(Sample { id, image, mask, report })
        })
        .collect()
}

/// Load every split present under `dir`; absent splits are empty.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    let mut ds = Dataset::default();
    for split in SPLITS {
        let p = dir.join(split);
        if !p.exists() {
            continue;
        }
        let samples = load_split(&p)?;
        match split {
            "train" => ds.train = samples,
            "val" => ds.val = samples,
            _ => ds.test = samples,
        }
    }
    Ok(ds)
}
