//! Synthetic weakly-supervised dataset (shapes over textured backgrounds),
//! binary PPM/PGM image I/O, and CSV annotation manifests.

use crate::locmap::{BBox, Image, LocMap, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One image with its weak and full annotations. The mask exists for every
/// synthetic sample but is only consulted by mask metrics at test time.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub gt_box: BBox,
    pub gt_mask: Option<Mask>,
    pub split: Split,
}

/// Shape family drawn for a class; classes cycle through the four families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Triangle,
    Bar,
    Ring,
}

impl ShapeKind {
    pub fn for_class(class: usize) -> Self {
        match class % 4 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Triangle,
            2 => ShapeKind::Bar,
            _ => ShapeKind::Ring,
        }
    }
}

/// Generator parameters. Deterministic given `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Shape extent as a fraction of the image side.
    pub scale_min: f32,
    pub scale_max: f32,
    /// Additive uniform pixel noise amplitude.
    pub noise_level: f32,
    /// Accepted mask area fraction band (resampled outside it), bracketing
    /// the area prior so the prior is meaningful.
    pub area_min: f32,
    pub area_max: f32,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            train_per_class: 250,
            test_per_class: 50,
            image_size: 64,
            scale_min: 0.2,
            scale_max: 0.6,
            noise_level: 0.02,
            area_min: 0.04,
            area_max: 0.36,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DataError::Invalid("class and per-class counts must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(DataError::Invalid("image size must be at least 8".into()));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(DataError::Invalid(format!(
                "scale range {}..{} invalid",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn sample_seed(base: u64, split: Split, class: usize, index: usize) -> u64 {
    let s = match split {
        Split::Train => 1u64,
        Split::Test => 2u64,
    };
    splitmix(base ^ splitmix(s ^ splitmix((class as u64) << 32 | index as u64)))
}

fn class_color(class: usize, num_classes: usize) -> [f32; 3] {
    // Evenly spaced hues, moderately saturated so the textured background
    // stays visible.
    let hue = class as f32 / num_classes.max(1) as f32 * 6.0;
    let sat = 0.65f32;
    let val = 0.85f32;
    let c = val * sat;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

fn draw_shape(kind: ShapeKind, size: usize, rng: &mut ChaCha8Rng, spec: &DatasetSpec) -> Mask {
    let n = size as f32;
    for _ in 0..200 {
        let extent = rng.gen_range(spec.scale_min..=spec.scale_max) * n;
        let half = extent / 2.0;
        let lo = half + 1.0;
        let hi = n - half - 1.0;
        if lo >= hi {
            continue;
        }
        let cx = rng.gen_range(lo..hi);
        let cy = rng.gen_range(lo..hi);
        // Per-kind extras drawn unconditionally to keep the stream aligned.
        let aspect = rng.gen_range(0.25f32..0.45);
        let vertical = rng.gen_bool(0.5);
        let inner_frac = rng.gen_range(0.45f32..0.65);

        let mut data = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let (dx, dy) = (px - cx, py - cy);
                let inside = match kind {
                    ShapeKind::Disk => dx * dx + dy * dy <= half * half,
                    ShapeKind::Triangle => {
                        // Upward isoceles triangle inscribed in the extent.
                        let top = (cx, cy - half);
                        let left = (cx - half, cy + half);
                        let right = (cx + half, cy + half);
                        let sign = |a: (f32, f32), b: (f32, f32)| {
                            (px - b.0) * (a.1 - b.1) - (a.0 - b.0) * (py - b.1)
                        };
                        let d1 = sign(top, left);
                        let d2 = sign(left, right);
                        let d3 = sign(right, top);
                        let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                        let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                        !(has_neg && has_pos)
                    }
                    ShapeKind::Bar => {
                        let (hw, hh) = if vertical {
                            (half * aspect, half)
                        } else {
                            (half, half * aspect)
                        };
                        dx.abs() <= hw && dy.abs() <= hh
                    }
                    ShapeKind::Ring => {
                        let r2 = dx * dx + dy * dy;
                        let inner = half * inner_frac;
                        r2 <= half * half && r2 >= inner * inner
                    }
                };
                if inside {
                    data[y * size + x] = true;
                }
            }
        }
        let mask = Mask::new(size, size, data);
        let frac = mask.count() as f32 / (size * size) as f32;
        if frac >= spec.area_min && frac <= spec.area_max {
            return mask;
        }
    }
    // The area band is generous; reaching this means the spec is degenerate.
    panic!("could not draw a shape inside the area band; check DatasetSpec");
}

fn generate_sample(spec: &DatasetSpec, split: Split, class: usize, index: usize) -> Sample {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, split, class, index));

    // Textured background: gray base + low-amplitude sinusoid grid.
    let base: [f32; 3] = [
        rng.gen_range(0.3f32..0.55),
        rng.gen_range(0.3f32..0.55),
        rng.gen_range(0.3f32..0.55),
    ];
    let fx = rng.gen_range(2.0f32..5.0);
    let fy = rng.gen_range(2.0f32..5.0);
    let phx = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let phy = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let amp = 0.07f32;

    let mask = draw_shape(ShapeKind::for_class(class), size, &mut rng, spec);
    let color = class_color(class, spec.num_classes);
    let jitter: [f32; 3] = [
        rng.gen_range(-0.08f32..0.08),
        rng.gen_range(-0.08f32..0.08),
        rng.gen_range(-0.08f32..0.08),
    ];

    let mut data = vec![0.0f32; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let tex = amp
                * (std::f32::consts::TAU * fx * x as f32 / size as f32 + phx).sin()
                * (std::f32::consts::TAU * fy * y as f32 / size as f32 + phy).sin();
            let fg = mask.at(y, x);
            for c in 0..3 {
                let v = if fg {
                    color[c] + jitter[c]
                } else {
                    base[c] + tex
                };
                let noise = rng.gen_range(-spec.noise_level..=spec.noise_level);
                data[(y * size + x) * 3 + c] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    let gt_box = mask.tight_bbox().expect("area band guarantees a nonempty mask");
    Sample {
        image: Image::new(size, size, data),
        label: class,
        gt_box,
        gt_mask: Some(mask),
        split,
    }
}

/// Generates the full train + test dataset. Bit-identical for equal specs;
/// parallel over samples.
pub fn synth_generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut plan = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for class in 0..spec.num_classes {
            for index in 0..per_class {
                plan.push((split, class, index));
            }
        }
    }
    Ok(plan
        .into_par_iter()
        .map(|(split, class, index)| generate_sample(spec, split, class, index))
        .collect())
}

/// Uniformly keeps `k` training samples per class; the test split passes
/// through untouched.
pub fn few_shot_subsample(samples: &[Sample], k: usize, seed: u64) -> Result<Vec<Sample>> {
    let classes = samples.iter().map(|s| s.label).max().map(|m| m + 1).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x6b8b4567));
    let mut keep: Vec<usize> = Vec::new();
    for class in 0..classes {
        let mut idx: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Split::Train && s.label == class)
            .map(|(i, _)| i)
            .collect();
        if k > idx.len() {
            return Err(DataError::Invalid(format!(
                "requested {k} shots but class {class} has only {} training samples",
                idx.len()
            )));
        }
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        keep.extend_from_slice(&idx[..k]);
    }
    keep.sort_unstable();
    let mut out: Vec<Sample> = keep.into_iter().map(|i| samples[i].clone()).collect();
    out.extend(samples.iter().filter(|s| s.split == Split::Test).cloned());
    Ok(out)
}

// ---- binary PPM (P6) / PGM (P5) ----

fn write_pnm_header(out: &mut Vec<u8>, magic: &str, w: usize, h: usize) {
    out.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
}

/// Reads PNM header tokens (handling `#` comments), returning
/// (width, height, payload offset) and validating the magic.
fn parse_pnm_header(path: &Path, bytes: &[u8], magic: &str) -> Result<(usize, usize, usize)> {
    let mut pos = 0usize;
    let mut line = 1usize;
    let mut tokens: Vec<(String, usize)> = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        let b = bytes[pos];
        if b == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        if b.is_ascii_whitespace() {
            if b == b'\n' {
                line += 1;
            }
            pos += 1;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push((String::from_utf8_lossy(&bytes[start..pos]).into_owned(), line));
    }
    if tokens.len() < 4 {
        let line = tokens.last().map(|t| t.1).unwrap_or(line);
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line,
            msg: "truncated header".into(),
        });
    }
    if tokens[0].0 != magic {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: tokens[0].1,
            msg: format!("expected magic {magic}, found {}", tokens[0].0),
        });
    }
    let dim = |i: usize| -> Result<usize> {
        tokens[i].0.parse().map_err(|_| DataError::Parse {
            path: path.to_path_buf(),
            line: tokens[i].1,
            msg: format!("bad integer {:?}", tokens[i].0),
        })
    };
    let (w, h, maxval) = (dim(1)?, dim(2)?, dim(3)?);
    if maxval != 255 {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: tokens[3].1,
            msg: format!("only maxval 255 supported, found {maxval}"),
        });
    }
    if w == 0 || h == 0 {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: tokens[1].1,
            msg: "zero dimension".into(),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    Ok((w, h, pos + 1))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut buf)
        .map_err(io_err(path))?;
    Ok(buf)
}

fn payload<'a>(path: &Path, bytes: &'a [u8], offset: usize, expected: usize) -> Result<&'a [u8]> {
    if bytes.len() < offset + expected {
        return Err(DataError::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!(
                "payload truncated: expected {expected} bytes, found {}",
                bytes.len().saturating_sub(offset)
            ),
        });
    }
    Ok(&bytes[offset..offset + expected])
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_image_ppm(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.data.len() + 32);
    write_pnm_header(&mut out, "P6", image.w, image.h);
    out.extend(image.data.iter().map(|&v| quantize(v)));
    out
}

pub fn save_image_ppm(path: &Path, image: &Image) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_image_ppm(image)).map_err(io_err(path))
}

pub fn load_image_ppm(path: &Path) -> Result<Image> {
    let bytes = read_file(path)?;
    let (w, h, offset) = parse_pnm_header(path, &bytes, "P6")?;
    let body = payload(path, &bytes, offset, w * h * 3)?;
    Ok(Image::new(h, w, body.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn save_mask_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut out = Vec::with_capacity(mask.data.len() + 32);
    write_pnm_header(&mut out, "P5", mask.w, mask.h);
    out.extend(mask.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

pub fn load_mask_pgm(path: &Path) -> Result<Mask> {
    let bytes = read_file(path)?;
    let (w, h, offset) = parse_pnm_header(path, &bytes, "P5")?;
    let body = payload(path, &bytes, offset, w * h)?;
    Ok(Mask::new(h, w, body.iter().map(|&b| b >= 128).collect()))
}

/// 8-bit grayscale heatmap.
pub fn save_map_pgm(path: &Path, map: &LocMap) -> Result<()> {
    let mut out = Vec::with_capacity(map.values.len() + 32);
    write_pnm_header(&mut out, "P5", map.w, map.h);
    out.extend(map.values.iter().map(|&v| quantize(v)));
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

// ---- annotation manifests ----

pub const MANIFEST_HEADER: &str = "path,label,x0,y0,x1,y1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub path: String,
    pub label: usize,
    pub bbox: BBox,
}

pub fn save_annotations_csv(path: &Path, rows: &[Annotation]) -> Result<()> {
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.path, r.label, r.bbox.x0, r.bbox.y0, r.bbox.x1, r.bbox.y1
        ));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn load_annotations_csv(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if i == 0 {
            if trimmed != MANIFEST_HEADER {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("expected header {MANIFEST_HEADER:?}"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 6 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let num = |j: usize| -> Result<usize> {
            fields[j].trim().parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("bad integer {:?}", fields[j]),
            })
        };
        let (label, x0, y0, x1, y1) = (num(1)?, num(2)?, num(3)?, num(4)?, num(5)?);
        if x1 <= x0 || y1 <= y0 {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("degenerate box {x0},{y0},{x1},{y1}"),
            });
        }
        rows.push(Annotation {
            path: fields[0].to_string(),
            label,
            bbox: BBox::new(x0, y0, x1, y1),
        });
    }
    Ok(rows)
}

// ---- dataset directory layout ----

fn image_rel_path(split: Split, index: usize) -> String {
    format!("images/{}_{index:05}.ppm", split.name())
}

fn mask_rel_path(split: Split, index: usize) -> String {
    format!("masks/{}_{index:05}.pgm", split.name())
}

/// Writes images, masks, and the two split manifests under `root`.
/// Returns the number of files written per split.
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<(usize, usize)> {
    fs::create_dir_all(root.join("images")).map_err(io_err(root))?;
    fs::create_dir_all(root.join("masks")).map_err(io_err(root))?;
    let mut manifests = [Vec::new(), Vec::new()];
    let mut counters = [0usize, 0usize];
    for s in samples {
        let slot = match s.split {
            Split::Train => 0,
            Split::Test => 1,
        };
        let index = counters[slot];
        counters[slot] += 1;
        let img_rel = image_rel_path(s.split, index);
        save_image_ppm(&root.join(&img_rel), &s.image)?;
        if let Some(mask) = &s.gt_mask {
            save_mask_pgm(&root.join(mask_rel_path(s.split, index)), mask)?;
        }
        manifests[slot].push(Annotation {
            path: img_rel,
            label: s.label,
            bbox: s.gt_box,
        });
    }
    save_annotations_csv(&root.join("train.csv"), &manifests[0])?;
    save_annotations_csv(&root.join("test.csv"), &manifests[1])?;
    Ok((counters[0], counters[1]))
}

/// Loads both splits back from a dataset directory; masks attach when the
/// sibling `masks/` file exists.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for split in [Split::Train, Split::Test] {
        let manifest = root.join(format!("{}.csv", split.name()));
        for ann in load_annotations_csv(&manifest)? {
            let image = load_image_ppm(&root.join(&ann.path))?;
            let mask_path = root.join(ann.path.replace("images/", "masks/").replace(".ppm", ".pgm"));
            let gt_mask = if mask_path.exists() {
                Some(load_mask_pgm(&mask_path)?)
            } else {
                None
            };
            samples.push(Sample {
                image,
                label: ann.label,
                gt_box: ann.bbox,
                gt_mask,
                split,
            });
        }
    }
    Ok(samples)
}
