//! Synthetic fine-grained images with planted global parts and local textures,
//! plus a loader for directory-per-class NetPBM trees.
//!
//! A class is a pair (global arrangement, local texture). The arrangement
//! fixes which two quadrants hold the large "global parts"; the texture
//! fills a small patch inside each part. Classes that share an arrangement
//! differ only inside those patches. Distractor patches with random
//! textures are scattered over the background, so a texture only counts as
//! evidence when it sits inside a global part.
//!
//! Every texture has the same mean colour as the part it sits in, which
//! makes the patches invisible to pooled colour statistics.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Shape, Tensor4};

/// Quadrant pairs available as global arrangements (TL=0, TR=1, BL=2, BR=3).
const ARRANGEMENTS: [[usize; 2]; 6] = [[0, 3], [1, 2], [0, 1], [2, 3], [0, 2], [1, 3]];

/// Number of texture patterns [`texture_value`] knows.
pub const MAX_TEXTURES: usize = 4;

const BACKGROUND: [f32; 3] = [0.45, 0.5, 0.55];
const PART_COLOR: [f32; 3] = [0.55, 0.35, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Number of distinct global arrangements (2..=6).
    pub global_vocab: usize,
    /// Number of distinct local textures (2..=4).
    pub local_vocab: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Background patches with random textures per image.
    pub distractors: usize,
    /// Half the brightness difference between the two phases of a texture.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            train_per_class: 100,
            test_per_class: 50,
            image_size: 64,
            global_vocab: 4,
            local_vocab: 2,
            noise: 0.25,
            distractors: 2,
            contrast: 0.08,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |r: String| Err(Error::contract("generate", r));
        if self.global_vocab < 2 || self.local_vocab < 2 {
            return fail("vocabulary sizes must be at least 2".into());
        }
        if self.global_vocab > ARRANGEMENTS.len() || self.local_vocab > MAX_TEXTURES {
            return fail(format!(
                "at most {} arrangements and {MAX_TEXTURES} textures are available",
                ARRANGEMENTS.len()
            ));
        }
        if self.num_classes > self.global_vocab * self.local_vocab {
            return fail(format!(
                "{} classes exceed {}×{} vocabulary combinations",
                self.num_classes, self.global_vocab, self.local_vocab
            ));
        }
        if self.num_classes < 2 || self.num_classes % self.local_vocab == 1 {
            return fail(format!(
                "every arrangement must be shared by at least two classes ({} classes, {} textures)",
                self.num_classes, self.local_vocab
            ));
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(8) {
            return fail(format!("image size must be a multiple of 8 and at least 16, got {}", self.image_size));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be finite and non-negative, got {}", self.noise));
        }
        if !(self.contrast > 0.0 && self.contrast <= 0.25) {
            return fail(format!("texture contrast must lie in (0, 0.25], got {}", self.contrast));
        }
        Ok(())
    }

    /// (arrangement, texture) of class `c`.
    pub fn class_code(&self, c: usize) -> (usize, usize) {
        (c / self.local_vocab, c % self.local_vocab)
    }

    pub fn class_name(&self, c: usize) -> String {
        let (a, t) = self.class_code(c);
        format!("class{c:02}_g{a}_t{t}")
    }

    fn part_size(&self) -> usize {
        self.image_size * 7 / 16
    }

    fn patch_size(&self) -> usize {
        self.part_size() / 2
    }
}

/// Axis-aligned rectangle `[y, y + h) × [x, x + w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.y < o.y + o.h && o.y < self.y + self.h && self.x < o.x + o.w && o.x < self.x + self.w
    }

    fn grow(&self, m: usize) -> Rect {
        Rect {
            y: self.y.saturating_sub(m),
            x: self.x.saturating_sub(m),
            h: self.h + 2 * m,
            w: self.w + 2 * m,
        }
    }
}

/// Everything random about one image, fixed before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLayout {
    pub label: usize,
    pub texture: usize,
    pub parts: Vec<Rect>,
    pub patches: Vec<Rect>,
    pub distractors: Vec<(Rect, usize)>,
    pub noise_seed: u64,
}

/// Colour of texture `t` at offset (dy, dx) inside its patch.
pub fn texture_value(t: usize, contrast: f64, dy: usize, dx: usize) -> [f32; 3] {
    let on = match t {
        0 => (dy / 2).is_multiple_of(2),
        1 => (dx / 2).is_multiple_of(2),
        2 => (dy / 2 + dx / 2).is_multiple_of(2),
        _ => ((dy + dx) / 2).is_multiple_of(2),
    };
    let s = if on { contrast as f32 } else { -contrast as f32 };
    [PART_COLOR[0] + s, PART_COLOR[1] + s, PART_COLOR[2] - s]
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-sample seed.
pub fn sample_seed(seed: u64, split: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ split) ^ index)
}

/// Draws the layout of one image of class `label`.
pub fn sample_layout<R: Rng + ?Sized>(spec: &SyntheticSpec, label: usize, rng: &mut R) -> SampleLayout {
    let n = spec.image_size;
    let half = n / 2;
    let ps = spec.part_size();
    let pp = spec.patch_size();
    let (arrangement, texture) = spec.class_code(label);
    let slack = half - ps; // free room inside a quadrant
    let parts: Vec<Rect> = ARRANGEMENTS[arrangement]
        .iter()
        .map(|&q| {
            let (qy, qx) = ((q / 2) * half, (q % 2) * half);
            Rect {
                y: qy + rng.gen_range(0..=slack),
                x: qx + rng.gen_range(0..=slack),
                h: ps,
                w: ps,
            }
        })
        .collect();
    let patches = parts
        .iter()
        .map(|p| {
            let room = ps - pp - 2; // one pixel margin on both sides
            Rect {
                y: p.y + 1 + rng.gen_range(0..=room),
                x: p.x + 1 + rng.gen_range(0..=room),
                h: pp,
                w: pp,
            }
        })
        .collect();
    let mut distractors = Vec::new();
    let mut free: Vec<usize> = (0..4)
        .filter(|q| !ARRANGEMENTS[arrangement].contains(q))
        .collect();
    free.shuffle(rng);
    for i in 0..spec.distractors {
        let q = free[i % free.len()];
        let (qy, qx) = ((q / 2) * half, (q % 2) * half);
        let room = half - pp - 1;
        let r = Rect {
            y: qy + rng.gen_range(0..=room),
            x: qx + rng.gen_range(0..=room),
            h: pp,
            w: pp,
        };
        let keep_out = parts.iter().any(|p| p.grow(1).overlaps(&r))
            || distractors.iter().any(|(d, _): &(Rect, usize)| d.overlaps(&r));
        let t = rng.gen_range(0..spec.local_vocab);
        if !keep_out {
            distractors.push((r, t));
        }
    }
    SampleLayout {
        label,
        texture,
        parts,
        patches,
        distractors,
        noise_seed: rng.gen(),
    }
}

/// One rendered sample with its ground-truth masks.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// 3×n×n values in [0, 1], channel-major.
    pub image: Vec<f32>,
    pub label: usize,
    /// n×n, 1 inside any global part.
    pub region_mask: Vec<u8>,
    /// One n×n mask per local discriminative patch.
    pub part_masks: Vec<Vec<u8>>,
}

pub fn render(spec: &SyntheticSpec, layout: &SampleLayout) -> SyntheticSample {
    let n = spec.image_size;
    let plane = n * n;
    let mut image = vec![0.0f32; 3 * plane];
    let mut region_mask = vec![0u8; plane];
    let mut part_masks = vec![vec![0u8; plane]; layout.patches.len()];
    for y in 0..n {
        for x in 0..n {
            let mut rgb = BACKGROUND;
            if let Some((r, t)) = layout.distractors.iter().find(|(r, _)| r.contains(y, x)) {
                rgb = texture_value(*t, spec.contrast, y - r.y, x - r.x);
            }
            if layout.parts.iter().any(|p| p.contains(y, x)) {
                region_mask[y * n + x] = 1;
                rgb = PART_COLOR;
            }
            for (k, p) in layout.patches.iter().enumerate() {
                if p.contains(y, x) {
                    part_masks[k][y * n + x] = 1;
                    rgb = texture_value(layout.texture, spec.contrast, y - p.y, x - p.x);
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                image[c * plane + y * n + x] = *v;
            }
        }
    }
    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(layout.noise_seed);
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        for v in image.iter_mut() {
            *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }
    SyntheticSample {
        image,
        label: layout.label,
        region_mask,
        part_masks,
    }
}

/// Images, labels and optional ground-truth masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Per-sample h×w region masks, when known.
    pub region_masks: Option<Vec<Vec<u8>>>,
    /// Per-sample local patch masks, when known.
    pub part_masks: Option<Vec<Vec<Vec<u8>>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn from_samples(samples: Vec<SyntheticSample>, class_names: Vec<String>, size: usize) -> Self {
        let shape = Shape::new(samples.len(), 3, size, size);
        let mut data = Vec::with_capacity(shape.numel());
        let mut labels = Vec::with_capacity(samples.len());
        let mut regions = Vec::with_capacity(samples.len());
        let mut parts = Vec::with_capacity(samples.len());
        for s in samples {
            data.extend_from_slice(&s.image);
            labels.push(s.label);
            regions.push(s.region_mask);
            parts.push(s.part_masks);
        }
        Dataset {
            images: Tensor4::from_vec(shape, data).expect("sample sizes agree"),
            labels,
            class_names,
            region_masks: Some(regions),
            part_masks: Some(parts),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
}

fn generate_split(spec: &SyntheticSpec, split: u64, per_class: usize) -> Dataset {
    let count = spec.num_classes * per_class;
    let samples = par::map_range(count, |i| {
        let label = i % spec.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split, i as u64));
        render(spec, &sample_layout(spec, label, &mut rng))
    });
    let names = (0..spec.num_classes).map(|c| spec.class_name(c)).collect();
    Dataset::from_samples(samples, names, spec.image_size)
}

/// Class-balanced train and test splits, deterministic per seed.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    Ok(SyntheticData {
        train: generate_split(spec, 0, spec.train_per_class),
        test: generate_split(spec, 1, spec.test_per_class),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_pnm(data: &[u8], w: usize, h: usize, rgb: bool) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let (subtype, color) = if rgb {
        (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
    } else {
        (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
    };
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(data, w as u32, h as u32, color)
        .map_err(|e| Error::Format {
            what: "NetPBM image",
            reason: e.to_string(),
        })?;
    Ok(out)
}

/// 8-bit binary PGM (P5) of `values` in [0, 255].
pub fn encode_pgm(values: &[u8], w: usize, h: usize) -> Result<Vec<u8>> {
    encode_pnm(values, w, h, false)
}

/// 8-bit binary PPM (P6) of a channel-major 3×h×w image in [0, 1].
pub fn encode_ppm(image: &[f32], w: usize, h: usize) -> Result<Vec<u8>> {
    let plane = w * h;
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((image[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    encode_pnm(&rgb, w, h, true)
}

fn mask_pgm(mask: &[u8], n: usize) -> Result<Vec<u8>> {
    let v: Vec<u8> = mask.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect();
    encode_pgm(&v, n, n)
}

/// Writes `root/<split>/<class>/<id>.ppm` with `.region.pgm` and `.part<k>.pgm` siblings.
pub fn write_dataset(data: &SyntheticData, root: &Path) -> Result<()> {
    for (split, ds) in [("train", &data.train), ("test", &data.test)] {
        let s = ds.images.shape();
        let (regions, parts) = (ds.region_masks.as_ref(), ds.part_masks.as_ref());
        for name in &ds.class_names {
            let dir = root.join(split).join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for i in 0..ds.len() {
            let dir = root.join(split).join(&ds.class_names[ds.labels[i]]);
            let id = format!("{i:05}");
            let img = &ds.images.data()[i * s.item()..(i + 1) * s.item()];
            write_file(&dir.join(format!("{id}.ppm")), &encode_ppm(img, s.w, s.h)?)?;
            if let Some(r) = regions {
                write_file(&dir.join(format!("{id}.region.pgm")), &mask_pgm(&r[i], s.h)?)?;
            }
            if let Some(p) = parts {
                for (k, m) in p[i].iter().enumerate() {
                    write_file(&dir.join(format!("{id}.part{k}.pgm")), &mask_pgm(m, s.h)?)?;
                }
            }
        }
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

fn load_rgb(path: &Path, size: usize) -> std::result::Result<Vec<f32>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => other.to_rgb8(),
    };
    let rgb = if rgb.width() as usize != size || rgb.height() as usize != size {
        image::imageops::resize(&rgb, size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        rgb
    };
    let plane = size * size;
    let mut out = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = f32::from(px[c]) / 255.0;
        }
    }
    Ok(out)
}

fn load_mask(path: &Path, size: usize) -> Option<Vec<u8>> {
    let img = image::open(path).ok()?.to_luma8();
    if img.width() as usize != size || img.height() as usize != size {
        return None;
    }
    Some(img.pixels().map(|p| u8::from(p[0] >= 128)).collect())
}

/// Loads `root/<class>/*.ppm`. Labels follow sorted directory names; images
/// are resized to `size × size` with bilinear filtering. Region masks are
/// attached when every image has a same-sized `.region.pgm` sibling.
pub fn load_dir(root: &Path, size: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::contract("load_dir", format!("no class directories under {}", root.display())));
    }
    let mut class_names = Vec::new();
    let mut files = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let images: Vec<PathBuf> = sorted_entries(dir)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
            .collect();
        if images.is_empty() {
            return Err(Error::contract("load_dir", format!("class directory {} has no .ppm images", dir.display())));
        }
        class_names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        files.extend(images.into_iter().map(|p| (p, label)));
    }
    let decoded = par::map_slice(&files, |(p, _)| load_rgb(p, size));
    let mut failures = Vec::new();
    let mut data = Vec::with_capacity(files.len() * 3 * size * size);
    for ((path, _), res) in files.iter().zip(decoded) {
        match res {
            Ok(v) => data.extend(v),
            Err(why) => failures.push((path.clone(), why)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Images(failures));
    }
    let regions: Option<Vec<Vec<u8>>> = files
        .iter()
        .map(|(p, _)| load_mask(&p.with_extension("region.pgm"), size))
        .collect();
    Ok(Dataset {
        images: Tensor4::from_vec(Shape::new(files.len(), 3, size, size), data)?,
        labels: files.iter().map(|(_, l)| *l).collect(),
        class_names,
        region_masks: regions,
        part_masks: None,
    })
}
