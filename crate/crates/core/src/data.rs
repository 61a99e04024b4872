//! Datasets: a procedural pedestrian generator, directory ingestion, PK
//! batch sampling and training-time augmentation.
//!
//! Images are `[H, W, 3]` tensors of `f32` in `[0, 1]`. Generated pixels are
//! multiples of 1/255, so writing them as 8-bit PNG and reading them back is
//! lossless.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Deterministic generator for `(seed, stream)`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

impl Sample {
    pub fn hw(&self) -> [usize; 2] {
        [self.image.shape()[0], self.image.shape()[1]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub image_hw: [usize; 2],
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Dataset("dataset is empty".into()))?;
        let image_hw = first.hw();
        for s in &samples {
            if s.image.shape() != [image_hw[0], image_hw[1], 3] {
                return Err(Error::Dataset(format!(
                    "mixed image shapes {:?} and {:?}",
                    first.image.shape(),
                    s.image.shape()
                )));
            }
        }
        Ok(Self { samples, image_hw })
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Training samples, cloned in dataset order.
    pub fn train(&self) -> Vec<Sample> {
        self.split(Split::Train).into_iter().cloned().collect()
    }

    /// Loads a directory written by [`write_dataset`] (it has a
    /// `manifest.json`) or laid out with `bounding_box_train`, `query` and
    /// `bounding_box_test` subdirectories.
    pub fn load(dir: &Path, image_hw: [usize; 2]) -> Result<(Self, IngestStats)> {
        if dir.join(MANIFEST).is_file() {
            let ds = read_dataset(dir)?;
            if ds.image_hw != image_hw {
                return Err(Error::Dataset(format!(
                    "{} holds {:?} images, model expects {:?}",
                    dir.display(),
                    ds.image_hw,
                    image_hw
                )));
            }
            return Ok((ds, IngestStats::default()));
        }
        let layout = [
            ("bounding_box_train", Split::Train),
            ("query", Split::Query),
            ("bounding_box_test", Split::Gallery),
        ];
        if !layout.iter().all(|(d, _)| dir.join(d).is_dir()) {
            return Err(Error::Dataset(format!(
                "{}: expected manifest.json or bounding_box_train/, query/, bounding_box_test/",
                dir.display()
            )));
        }
        let mut samples = Vec::new();
        let mut stats = IngestStats::default();
        for (sub, split) in layout {
            let (mut s, st) = ingest_directory(&dir.join(sub), image_hw, split)?;
            samples.append(&mut s);
            stats.skipped_names += st.skipped_names;
            stats.skipped_unreadable += st.skipped_unreadable;
        }
        Ok((Self::new(samples)?, stats))
    }
}

// ---------------------------------------------------------------------------
// Synthetic pedestrians

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub images_per_id: usize,
    pub image_hw: [usize; 2],
    pub seed: u64,
    /// Identities kept out of training for query/gallery; `None` means a
    /// third of them.
    pub heldout_ids: Option<usize>,
    /// Minimum mean per-band color distance between two identities.
    pub separation: f32,
    /// Probability of an occluding bar over the left or right side.
    pub occlusion_p: f32,
    /// Bar width range as a fraction of the image width.
    pub occlusion_width: [f32; 2],
    /// Relative brightness jitter, `scale ~ U(1 - j, 1 + j)`.
    pub brightness_jitter: f32,
    /// Maximum horizontal shift of the figure, in pixels.
    pub max_shift: i32,
    /// Amplitude of uniform pixel noise.
    pub noise: f32,
    /// Strength of the color cast applied to camera 1.
    pub camera_tint: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 24,
            images_per_id: 16,
            image_hw: [64, 32],
            seed: 0,
            heldout_ids: None,
            separation: 0.2,
            occlusion_p: 0.5,
            occlusion_width: [0.15, 0.3],
            brightness_jitter: 0.1,
            max_shift: 2,
            noise: 0.02,
            camera_tint: 0.04,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::invalid("synth: num_ids must be at least 2"));
        }
        if self.images_per_id < 4 {
            return Err(Error::invalid("synth: images_per_id must be at least 4"));
        }
        let [h, w] = self.image_hw;
        if h < 16 || w < 8 {
            return Err(Error::invalid("synth: image must be at least 16x8"));
        }
        let held = self.num_heldout();
        if held == 0 || held >= self.num_ids {
            return Err(Error::invalid(format!(
                "synth: held-out ids must be in 1..{}, got {held}",
                self.num_ids
            )));
        }
        for (name, p) in [("occlusion_p", self.occlusion_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("synth: {name} must be in [0, 1]")));
            }
        }
        let [lo, hi] = self.occlusion_width;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("synth: occlusion_width must satisfy 0 < lo <= hi <= 1"));
        }
        if self.separation < 0.0 || self.noise < 0.0 || self.brightness_jitter < 0.0 {
            return Err(Error::invalid("synth: separation, noise and jitter must be >= 0"));
        }
        Ok(())
    }

    pub fn num_heldout(&self) -> usize {
        self.heldout_ids.unwrap_or((self.num_ids / 3).max(1))
    }

    /// Same structure with every nuisance turned off.
    pub fn clean(&self) -> Self {
        Self {
            occlusion_p: 0.0,
            brightness_jitter: 0.0,
            max_shift: 0,
            noise: 0.0,
            camera_tint: 0.0,
            ..self.clone()
        }
    }

    /// Same structure with a side occluder in every image, covering 25 to
    /// 40 percent of the width.
    pub fn occluded(&self) -> Self {
        Self {
            occlusion_p: 1.0,
            occlusion_width: [0.25, 0.4],
            ..self.clone()
        }
    }
}

/// Appearance of one synthetic identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    /// Head, torso left, torso right, legs left, legs right.
    pub bands: [[f32; 3]; 5],
    /// Fraction of the height where the torso ends.
    pub waist: f32,
}

pub const BAND_NAMES: [&str; 5] = ["head", "torso_left", "torso_right", "legs_left", "legs_right"];

fn color_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Mean over bands of the RGB distance between two palettes.
pub fn palette_distance(a: &Palette, b: &Palette) -> f32 {
    a.bands.iter().zip(&b.bands).map(|(x, y)| color_dist(*x, *y)).sum::<f32>() / 5.0
}

/// Base clothing hues; identity colors are jittered copies of these.
const HUES: [[f32; 3]; 10] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.2],
    [0.15, 0.25, 0.85],
    [0.9, 0.85, 0.2],
    [0.92, 0.92, 0.92],
    [0.08, 0.08, 0.1],
    [0.9, 0.5, 0.1],
    [0.55, 0.2, 0.7],
    [0.15, 0.75, 0.8],
    [0.5, 0.32, 0.18],
];

const HUE_JITTER: f32 = 0.06;

fn clothing_color(rng: &mut impl Rng) -> [f32; 3] {
    let base = HUES[rng.gen_range(0..HUES.len())];
    base.map(|c| (c + rng.gen_range(-HUE_JITTER..=HUE_JITTER)).clamp(0.0, 1.0))
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

/// Identity palettes; each is redrawn until it sits at least
/// `cfg.separation` from all earlier ones.
pub fn synth_palettes(cfg: &SynthConfig) -> Vec<Palette> {
    let mut rng = seeded_rng(cfg.seed, 0);
    let mut out: Vec<Palette> = Vec::with_capacity(cfg.num_ids);
    for _ in 0..cfg.num_ids {
        let mut best: Option<(f32, Palette)> = None;
        for _ in 0..1000 {
            let mut bands = [[0.0; 3]; 5];
            for b in bands.iter_mut() {
                *b = clothing_color(&mut rng);
            }
            // left and right halves must differ visibly
            for (l, r) in [(1, 2), (3, 4)] {
                while color_dist(bands[l], bands[r]) < 0.25 {
                    bands[r] = clothing_color(&mut rng);
                }
            }
            let cand = Palette {
                bands,
                waist: rng.gen_range(0.48..0.62),
            };
            let nearest = out
                .iter()
                .map(|p| palette_distance(p, &cand))
                .fold(f32::INFINITY, f32::min);
            if nearest > cfg.separation {
                best = Some((nearest, cand));
                break;
            }
            if best.as_ref().is_none_or(|(d, _)| nearest > *d) {
                best = Some((nearest, cand));
            }
        }
        out.push(best.expect("at least one attempt").1);
    }
    out
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Per-image nuisance draws.
struct Nuisance {
    brightness: f32,
    shift: i32,
    background: [f32; 3],
    /// `(is_left, width)` of the occluding bar.
    occluder: Option<(bool, usize, [f32; 3])>,
}

fn render(cfg: &SynthConfig, pal: &Palette, camera: u32, nz: &Nuisance, rng: &mut impl Rng) -> Tensor<f32> {
    let [h, w] = cfg.image_hw;
    let (hf, wf) = (h as f32, w as f32);
    let center = wf / 2.0 + nz.shift as f32;
    let half = wf * 0.32;
    let head_half = wf * 0.16;
    let (head_top, neck) = (0.04 * hf, 0.2 * hf);
    let waist = pal.waist * hf;
    let feet = 0.97 * hf;
    let tint = if camera == 1 {
        [cfg.camera_tint, -0.5 * cfg.camera_tint, 0.75 * cfg.camera_tint]
    } else {
        [0.0; 3]
    };
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let yc = y as f32 + 0.5;
        for x in 0..w {
            let xc = x as f32 + 0.5;
            let dx = xc - center;
            let mut c = nz.background;
            if (head_top..neck).contains(&yc) && dx.abs() < head_half {
                c = pal.bands[0];
            } else if (neck..waist).contains(&yc) && dx.abs() < half {
                c = if dx < 0.0 { pal.bands[1] } else { pal.bands[2] };
            } else if (waist..feet).contains(&yc) && dx.abs() < half * 0.85 && dx.abs() > 0.6 {
                c = if dx < 0.0 { pal.bands[3] } else { pal.bands[4] };
            }
            if let Some((left, width, color)) = nz.occluder {
                if (left && x < width) || (!left && x >= w - width) {
                    c = color;
                }
            }
            for ch in 0..3 {
                let n = if cfg.noise > 0.0 {
                    rng.gen_range(-cfg.noise..=cfg.noise)
                } else {
                    0.0
                };
                data.push(quantize(c[ch] * nz.brightness + tint[ch] + n));
            }
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("render shape")
}

/// Generates the full dataset. Cameras alternate with the image index. For
/// held-out identities (the last `num_heldout` ids) the first two images, one
/// per camera, are queries and the rest are gallery.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let palettes = synth_palettes(cfg);
    let first_heldout = cfg.num_ids - cfg.num_heldout();
    let mut samples = Vec::with_capacity(cfg.num_ids * cfg.images_per_id);
    let w = cfg.image_hw[1];
    for (id, pal) in palettes.iter().enumerate() {
        let mut rng = seeded_rng(cfg.seed, 1 + id as u64);
        for img in 0..cfg.images_per_id {
            let camera = (img % 2) as u32;
            let j = cfg.brightness_jitter;
            let nz = Nuisance {
                brightness: if j > 0.0 { rng.gen_range(1.0 - j..=1.0 + j) } else { 1.0 },
                shift: if cfg.max_shift > 0 {
                    rng.gen_range(-cfg.max_shift..=cfg.max_shift)
                } else {
                    0
                },
                background: {
                    let g = rng.gen_range(0.25..0.55);
                    [g, g, g]
                },
                occluder: if rng.gen::<f32>() < cfg.occlusion_p {
                    let width = ((w as f32) * rng.gen_range(cfg.occlusion_width[0]..=cfg.occlusion_width[1])).round() as usize;
                    Some((rng.gen_bool(0.5), width.max(1), random_color(&mut rng)))
                } else {
                    None
                },
            };
            let image = render(cfg, pal, camera, &nz, &mut rng);
            let split = if id < first_heldout {
                Split::Train
            } else if img < 2 {
                Split::Query
            } else {
                Split::Gallery
            };
            samples.push(Sample {
                image,
                identity: id as u32,
                camera,
                split,
            });
        }
    }
    Dataset::new(samples)
}

/// `synth_dataset` with default nuisance settings.
pub fn synth_generate(num_ids: usize, images_per_id: usize, image_hw: [usize; 2], seed: u64) -> Result<Vec<Sample>> {
    let cfg = SynthConfig {
        num_ids,
        images_per_id,
        image_hw,
        seed,
        ..Default::default()
    };
    Ok(synth_dataset(&cfg)?.samples)
}

// ---------------------------------------------------------------------------
// Disk formats

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub id: u32,
    pub cam: u32,
    pub split: Split,
}

fn to_rgb8(image: &Tensor<f32>) -> Result<image::RgbImage> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape(format!("expected [H, W, 3] image, got {s:?}")));
    }
    let bytes = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::RgbImage::from_raw(s[1] as u32, s[0] as u32, bytes)
        .ok_or_else(|| Error::shape("image buffer size"))
}

fn from_rgb8(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("decoded image shape")
}

/// Writes PNG files under `dir/{split}/` and a `manifest.json` listing them
/// in dataset order.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mut counters: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut entries = Vec::with_capacity(ds.samples.len());
    for split in Split::ALL {
        let sub = dir.join(split.as_str());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    }
    for s in &ds.samples {
        let n = counters.entry((s.identity, s.camera)).or_default();
        let file = format!("{}/{:04}_c{}_{:04}.png", s.split.as_str(), s.identity, s.camera, *n);
        *n += 1;
        let path = dir.join(&file);
        to_rgb8(&s.image)?.save_with_format(&path, image::ImageFormat::Png)?;
        entries.push(ManifestEntry {
            file,
            id: s.identity,
            cam: s.camera,
            split: s.split,
        });
    }
    let path = dir.join(MANIFEST);
    let body = serde_json::to_string_pretty(&entries)?;
    fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let entries = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(entries.len());
    for e in entries {
        let img = image::open(dir.join(&e.file))?.to_rgb8();
        samples.push(Sample {
            image: from_rgb8(&img),
            identity: e.id,
            camera: e.cam,
            split: e.split,
        });
    }
    Dataset::new(samples)
}

/// Parses `{pid}_c{cam}{rest}.{ext}`. Returns `None` for names outside the
/// grammar and for negative (distractor) identities.
pub fn parse_name(name: &str) -> Option<(u32, u32)> {
    let (stem, ext) = name.rsplit_once('.')?;
    if !matches!(ext.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg") {
        return None;
    }
    let (pid, rest) = stem.split_once("_c")?;
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || pid.is_empty() || !pid.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((pid.parse().ok()?, rest[..digits].parse().ok()?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    /// Files whose name is outside the grammar or marks a distractor.
    pub skipped_names: usize,
    pub skipped_unreadable: usize,
}

/// One sample per parsable image file in `dir`, resized to `image_hw`.
pub fn ingest_directory(dir: &Path, image_hw: [usize; 2], split: Split) -> Result<(Vec<Sample>, IngestStats)> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut stats = IngestStats::default();
    let mut samples = Vec::new();
    for path in names {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some((identity, camera)) = parse_name(name) else {
            stats.skipped_names += 1;
            continue;
        };
        let img = match image::open(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                stats.skipped_unreadable += 1;
                continue;
            }
        };
        let img = image::imageops::resize(
            &img.to_rgb8(),
            image_hw[1] as u32,
            image_hw[0] as u32,
            image::imageops::FilterType::Triangle,
        );
        samples.push(Sample {
            image: from_rgb8(&img),
            identity,
            camera,
            split,
        });
    }
    if stats.skipped_names > 0 {
        log::warn!("{}: skipped {} unparsable or distractor names", dir.display(), stats.skipped_names);
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{}: no parsable image files", dir.display())));
    }
    Ok((samples, stats))
}

// ---------------------------------------------------------------------------
// PK sampling

/// Sample indices grouped by identity, in ascending identity order.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityIndex {
    pub ids: Vec<u32>,
    pub members: Vec<Vec<usize>>,
}

impl IdentityIndex {
    pub fn new(samples: &[Sample]) -> Self {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            map.entry(s.identity).or_default().push(i);
        }
        let (ids, members) = map.into_iter().unzip();
        Self { ids, members }
    }

    pub fn num_ids(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PkBatch {
    /// Indices into the sampled set, grouped by identity.
    pub indices: Vec<usize>,
    pub identities: Vec<u32>,
    pub p: usize,
    pub k: usize,
}

/// `p` identities without replacement, then `k` images of each (without
/// replacement when the identity has at least `k`, with replacement
/// otherwise).
pub fn pk_sample(index: &IdentityIndex, p: usize, k: usize, rng: &mut impl Rng) -> Result<PkBatch> {
    if p == 0 || k == 0 {
        return Err(Error::invalid("p and k must be positive"));
    }
    if index.num_ids() < p {
        return Err(Error::invalid(format!(
            "pk_sample: need {p} identities, dataset has {}",
            index.num_ids()
        )));
    }
    let chosen = rand::seq::index::sample(rng, index.num_ids(), p).into_vec();
    let mut indices = Vec::with_capacity(p * k);
    let mut identities = Vec::with_capacity(p * k);
    for c in chosen {
        let pool = &index.members[c];
        if pool.len() >= k {
            indices.extend(pool.choose_multiple(rng, k).copied());
        } else {
            indices.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())]));
        }
        identities.extend(std::iter::repeat_n(index.ids[c], k));
    }
    Ok(PkBatch {
        indices,
        identities,
        p,
        k,
    })
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub erase_p: f64,
    pub erase_area: [f64; 2],
    pub erase_aspect: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            erase_p: 0.5,
            erase_area: [0.02, 0.4],
            erase_aspect: [0.3, 3.33],
        }
    }
}

impl AugmentConfig {
    pub const NONE: Self = Self {
        flip_p: 0.0,
        erase_p: 0.0,
        erase_area: [0.02, 0.4],
        erase_aspect: [0.3, 3.33],
    };

    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.erase_area;
        let [r0, r1] = self.erase_aspect;
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.flip_p) || !prob(self.erase_p) {
            return Err(Error::invalid("augment: probabilities must be in [0, 1]"));
        }
        if !(0.0 < a0 && a0 <= a1 && a1 < 1.0) || !(0.0 < r0 && r0 <= r1) {
            return Err(Error::invalid("augment: bad erase area or aspect range"));
        }
        Ok(())
    }
}

/// `(top, left, height, width)` of an erased rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentInfo {
    pub flipped: bool,
    pub erased: Option<Rect>,
}

pub fn flip_horizontal(image: &mut Tensor<f32>) {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let d = image.data_mut();
    for y in 0..h {
        for x in 0..w / 2 {
            for c in 0..3 {
                d.swap((y * w + x) * 3 + c, (y * w + (w - 1 - x)) * 3 + c);
            }
        }
    }
}

/// Random horizontal flip followed by random erasing, in place.
pub fn augment_in_place(image: &mut Tensor<f32>, cfg: &AugmentConfig, rng: &mut impl Rng) -> AugmentInfo {
    let mut info = AugmentInfo::default();
    if cfg.flip_p > 0.0 && rng.gen_bool(cfg.flip_p) {
        flip_horizontal(image);
        info.flipped = true;
    }
    if cfg.erase_p > 0.0 && rng.gen_bool(cfg.erase_p) {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let total = (h * w) as f64;
        for _ in 0..100 {
            let area = rng.gen_range(cfg.erase_area[0]..=cfg.erase_area[1]) * total;
            let aspect = rng.gen_range(cfg.erase_aspect[0]..=cfg.erase_aspect[1]);
            let eh = (area * aspect).sqrt().round() as usize;
            let ew = (area / aspect).sqrt().round() as usize;
            let frac = (eh * ew) as f64 / total;
            if eh == 0 || ew == 0 || eh >= h || ew >= w || frac < cfg.erase_area[0] || frac > cfg.erase_area[1] {
                continue;
            }
            let top = rng.gen_range(0..=h - eh);
            let left = rng.gen_range(0..=w - ew);
            let d = image.data_mut();
            for y in top..top + eh {
                for x in left..left + ew {
                    for c in 0..3 {
                        d[(y * w + x) * 3 + c] = rng.gen::<f32>();
                    }
                }
            }
            info.erased = Some(Rect {
                top,
                left,
                height: eh,
                width: ew,
            });
            break;
        }
    }
    info
}

pub fn augment_with_info(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> (Sample, AugmentInfo) {
    let mut out = sample.clone();
    let info = augment_in_place(&mut out.image, cfg, rng);
    (out, info)
}

pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    augment_with_info(sample, cfg, rng).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_examples() {
        assert_eq!(parse_name("0002_c1s1_000451_03.jpg"), Some((2, 1)));
        assert_eq!(parse_name("-1_c3s2_000000_00.jpg"), None);
        assert_eq!(parse_name("0042_c5_whatever.png"), Some((42, 5)));
        assert_eq!(parse_name("Thumbs.db"), None);
        assert_eq!(parse_name("0042_c5.bmp"), None);
        assert_eq!(parse_name("0042_cx.png"), None);
    }

    #[test]
    fn synth_shapes_and_splits() {
        let ds = synth_dataset(&SynthConfig::default()).unwrap();
        assert_eq!(ds.samples.len(), 24 * 16);
        assert_eq!(ds.count(Split::Query), 16);
        assert_eq!(ds.count(Split::Gallery), 8 * 14);
        assert_eq!(IdentityIndex::new(&ds.train()).num_ids(), 16);
        assert!(ds.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn synth_validation() {
        let bad = |f: fn(&mut SynthConfig)| {
            let mut c = SynthConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.num_ids = 1));
        assert!(bad(|c| c.images_per_id = 3));
        assert!(bad(|c| c.heldout_ids = Some(24)));
        assert!(bad(|c| c.occlusion_p = 1.5));
    }

    #[test]
    fn pk_rejects_too_few_identities() {
        let samples = synth_generate(3, 4, [64, 32], 1).unwrap();
        let idx = IdentityIndex::new(&samples);
        let mut rng = seeded_rng(0, 0);
        assert!(pk_sample(&idx, 4, 2, &mut rng).is_err());
        assert!(pk_sample(&idx, 3, 2, &mut rng).is_ok());
    }

    #[test]
    fn identity_augment() {
        let s = &synth_generate(2, 4, [64, 32], 3).unwrap()[0];
        let mut rng = seeded_rng(0, 0);
        let (out, info) = augment_with_info(s, &AugmentConfig::NONE, &mut rng);
        assert_eq!(&out, s);
        assert_eq!(info, AugmentInfo::default());
    }
}
