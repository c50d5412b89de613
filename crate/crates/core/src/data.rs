//! Datasets: directory loading, stratified splits, augmentation, batching and
//! a synthetic fine-grained benchmark.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::field::resize_image;
use crate::pnm;
use crate::rng::{mix, stream, stream_rng};

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    /// True when the rectangles overlap or are closer than `gap` pixels.
    pub fn near(&self, other: &Rect, gap: usize) -> bool {
        self.y < other.y + other.h + gap
            && other.y < self.y + self.h + gap
            && self.x < other.x + other.w + gap
            && other.x < self.x + self.w + gap
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    /// Relative path for loaded images, generated name for synthetic ones.
    pub id: String,
    pub group: Option<String>,
    /// Where class cues were drawn (synthetic data only).
    pub cues: Vec<Rect>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// SHA-256 over class names, labels and every pixel value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for name in &self.class_names {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        for s in &self.samples {
            h.update((s.label as u64).to_le_bytes());
            for v in s.image.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            image_size: self.image_size,
            channels: self.channels,
        }
    }

    /// Stack the listed samples into `[N, C, H, W]` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images: Vec<Tensor<f32>> = indices.iter().map(|&i| self.samples[i].image.clone()).collect();
        Ok((Tensor::stack(&images)?, indices.iter().map(|&i| self.samples[i].label).collect()))
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pgm" | "pnm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Load `root/<class_name>/<file>` netpbm images, resized to `size×size`.
///
/// Classes are numbered in lexicographic order of their directory names and
/// files are read in lexicographic order. An optional `root/groups.tsv` maps
/// `class/file` paths to group ids used by [`split`].
pub fn load_dir(root: impl AsRef<Path>, size: usize) -> Result<Dataset> {
    let root = root.as_ref();
    if size == 0 {
        return Err(Error::contract("image size must be positive"));
    }
    let groups = read_groups(root)?;
    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    let mut channels = None;
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Data(format!("{}: class directory name is not UTF-8", class_dir.display())))?
            .to_string();
        let label = class_names.len();
        let mut count = 0;
        for file in sorted_entries(&class_dir)?.into_iter().filter(|p| p.is_file() && is_image(p)) {
            let bytes = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let image = pnm::decode(&bytes).map_err(|e| Error::Data(format!("{}: {e}", file.display())))?;
            let c = image.shape()[0];
            if *channels.get_or_insert(c) != c {
                return Err(Error::Data(format!(
                    "{}: has {c} channels, earlier images have {}",
                    file.display(),
                    channels.unwrap_or(c)
                )));
            }
            let id = format!(
                "{name}/{}",
                file.file_name().and_then(|n| n.to_str()).unwrap_or_default()
            );
            samples.push(Sample {
                image: resize_image(&image, size, size)?,
                label,
                group: groups.get(&id).cloned(),
                id,
                cues: Vec::new(),
            });
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data(format!("{}: class directory holds no images", class_dir.display())));
        }
        class_names.push(name);
    }
    if class_names.is_empty() {
        return Err(Error::Data(format!("{}: no class directories", root.display())));
    }
    Ok(Dataset {
        samples,
        class_names,
        image_size: size,
        channels: channels.unwrap_or(3),
    })
}

fn read_groups(root: &Path) -> Result<HashMap<String, String>> {
    let path = root.join("groups.tsv");
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, group) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("{}:{}: expected `path<TAB>group`", path.display(), n + 1)))?;
        out.insert(file.trim().to_string(), group.trim().to_string());
    }
    Ok(out)
}

/// Index lists of a three-way partition.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    fn parts_mut(&mut self) -> [&mut Vec<usize>; 3] {
        [&mut self.train, &mut self.val, &mut self.test]
    }
}

/// Largest-remainder allocation of `n` items to `fractions`; every part with a
/// positive fraction receives at least one item.
fn allocate(n: usize, fractions: &[f64; 3]) -> Option<[usize; 3]> {
    let wanted = fractions.iter().filter(|&&f| f > 0.0).count();
    if n < wanted {
        return None;
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .partial_cmp(&(exact[a] - exact[a].floor()))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j])?;
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Some(counts)
}

/// Seeded stratified partition into train/validation/test.
///
/// When samples carry group ids, whole groups are assigned to one part
/// (greedy by remaining quota) and stratification is by group instead of class.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut rng = stream_rng(seed, stream::SPLIT);
    let mut out = Split::default();
    if dataset.samples.iter().any(|s| s.group.is_some()) {
        return Ok(split_grouped(dataset, fractions, &mut rng));
    }
    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].label == class).collect();
        let counts = allocate(members.len(), &fractions).ok_or_else(|| {
            Error::Data(format!(
                "class `{}` has {} samples, too few for split {fractions:?}",
                dataset.class_names[class],
                members.len()
            ))
        })?;
        members.shuffle(&mut rng);
        let mut start = 0;
        for (part, n) in out.parts_mut().into_iter().zip(counts) {
            part.extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    for part in out.parts_mut() {
        part.sort_unstable();
    }
    Ok(out)
}

fn split_grouped(dataset: &Dataset, fractions: [f64; 3], rng: &mut impl Rng) -> Split {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let key = s.group.clone().unwrap_or_else(|| format!("\0{}", s.id));
        groups.entry(key).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(rng);
    let total = dataset.len() as f64;
    let mut out = Split::default();
    for members in groups {
        let fill = [out.train.len(), out.val.len(), out.test.len()];
        let part = (0..3)
            .filter(|&p| fractions[p] > 0.0)
            .max_by(|&a, &b| {
                let deficit = |p: usize| fractions[p] * total - fill[p] as f64;
                deficit(a).partial_cmp(&deficit(b)).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a))
            })
            .unwrap_or(0);
        out.parts_mut()[part].extend(members);
    }
    for part in out.parts_mut() {
        part.sort_unstable();
    }
    out
}

/// Training-time augmentation knobs. Ranges follow the classical recipe:
/// flips, rotation within `±rotation_deg`, per-channel shift within
/// `±channel_shift` in 8-bit units, and brightness scaling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip: bool,
    pub rotation_deg: f32,
    pub channel_shift: f32,
    pub brightness: Option<(f32, f32)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            rotation_deg: 40.0,
            channel_shift: 30.0,
            brightness: Some((0.5, 1.5)),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip: false,
            rotation_deg: 0.0,
            channel_shift: 0.0,
            brightness: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let w = image.shape()[image.rank() - 1];
    let data = image
        .data()
        .chunks_exact(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::from_parts(image.shape().to_vec(), data)
}

/// Rotate a `[C, H, W]` image about its centre by `degrees` (counter-clockwise),
/// bilinear resampling, zero fill outside the source.
pub fn rotate(image: &Tensor<f32>, degrees: f32) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::contract(format!("rotate expects [C, H, W], got {:?}", image.shape())));
    };
    let (sin, cos) = (degrees as f64).to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let plane = h * w;
    let mut out = vec![0.0f32; c * plane];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse mapping: rotate the output coordinate back by −θ
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..c {
                let p = &image.data()[ch * plane..(ch + 1) * plane];
                let top = p[y0 * w + x0] + (p[y0 * w + x1] - p[y0 * w + x0]) * fx;
                let bottom = p[y1 * w + x0] + (p[y1 * w + x1] - p[y1 * w + x0]) * fx;
                out[ch * plane + y * w + x] = top + (bottom - top) * fy;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, rng: &mut R, cfg: &AugmentConfig) -> Result<Tensor<f32>> {
    if cfg.is_identity() {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    if cfg.flip && rng.random_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if cfg.rotation_deg > 0.0 {
        let angle = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg);
        out = rotate(&out, angle)?;
    }
    let channels = out.shape()[0];
    let plane = out.numel() / channels;
    if cfg.channel_shift > 0.0 {
        let s = cfg.channel_shift / 255.0;
        for ch in out.data_mut().chunks_exact_mut(plane) {
            let shift = rng.random_range(-s..=s);
            ch.iter_mut().for_each(|v| *v += shift);
        }
    }
    if let Some((lo, hi)) = cfg.brightness {
        let factor = rng.random_range(lo..=hi);
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// One mini-batch as fed to the network.
#[derive(Clone, Debug)]
pub struct Batch {
    pub index: usize,
    /// `[N, C, H, W]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Seeded epoch order: a fresh shuffle per epoch from `seed ⊕ epoch`.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed ^ epoch, stream::SHUFFLE));
    order
}

/// Shuffled, augmented mini-batches for one training epoch. The final batch
/// may be short. Augmentation draws from its own per-epoch stream.
pub fn epoch_batches<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    augmentation: AugmentConfig,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Result<Batch>> + 'a {
    let order = epoch_order(dataset.len(), seed, epoch);
    let mut rng = stream_rng(seed ^ epoch, stream::AUGMENT);
    let size = batch_size.max(1);
    let chunks: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().enumerate().map(move |(index, members)| {
        let images = members
            .iter()
            .map(|&i| augment(&dataset.samples[i].image, &mut rng, &augmentation))
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            index,
            images: Tensor::stack(&images)?,
            labels: members.iter().map(|&i| dataset.samples[i].label).collect(),
        })
    })
}

/// Parameters of the synthetic fine-grained benchmark.
///
/// Each class owns a 5×5 binary glyph; images carry `redundancy` copies of
/// their class glyph over a cluttered background. Image `j` of every class
/// shares the same background and cue placements, so the glyph bits are the
/// only class-dependent pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub canvas: usize,
    /// Rendered glyph side in pixels; a multiple of 5.
    pub cue_size: usize,
    pub redundancy: usize,
    /// Background blobs per 1024 pixels.
    pub clutter: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            per_class: 200,
            canvas: 64,
            cue_size: 5,
            redundancy: 2,
            clutter: 4,
            seed: 7,
        }
    }
}

impl fmt::Display for SynthSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "synth:classes={},per_class={},size={},cue={},redundancy={},clutter={},seed={}",
            self.num_classes, self.per_class, self.canvas, self.cue_size, self.redundancy, self.clutter, self.seed
        )
    }
}

impl FromStr for SynthSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s
            .strip_prefix("synth:")
            .ok_or_else(|| Error::Config(format!("synthetic dataset spec must start with `synth:`, got `{s}`")))?;
        let mut spec = SynthSpec::default();
        for field in body.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed synth field `{field}`")))?;
            let parse = || -> Result<u64> {
                value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("synth field `{key}` needs an integer, got `{value}`")))
            };
            match key.trim() {
                "classes" => spec.num_classes = parse()? as usize,
                "per_class" => spec.per_class = parse()? as usize,
                "size" => spec.canvas = parse()? as usize,
                "cue" => spec.cue_size = parse()? as usize,
                "redundancy" => spec.redundancy = parse()? as usize,
                "clutter" => spec.clutter = parse()? as usize,
                "seed" => spec.seed = parse()?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown synth field `{other}`; valid: classes, per_class, size, cue, redundancy, clutter, seed"
                    )))
                }
            }
        }
        Ok(spec)
    }
}

pub const GLYPH_SIDE: usize = 5;
pub const MIN_GLYPH_DISTANCE: u32 = 4;

pub type Glyph = [bool; GLYPH_SIDE * GLYPH_SIDE];

pub fn hamming(a: &Glyph, b: &Glyph) -> u32 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
}

pub fn mirror(g: &Glyph) -> Glyph {
    let mut out = [false; GLYPH_SIDE * GLYPH_SIDE];
    for y in 0..GLYPH_SIDE {
        for x in 0..GLYPH_SIDE {
            out[y * GLYPH_SIDE + x] = g[y * GLYPH_SIDE + GLYPH_SIDE - 1 - x];
        }
    }
    out
}

/// Class glyphs at pairwise Hamming distance ≥ 4, also against each other's
/// mirror images so horizontal flips cannot turn one class into another.
pub fn class_glyphs(num_classes: usize, seed: u64) -> Result<Vec<Glyph>> {
    let mut rng = stream_rng(seed, stream::GLYPH);
    let mut glyphs: Vec<Glyph> = Vec::with_capacity(num_classes);
    let mut attempts = 0;
    while glyphs.len() < num_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Data(format!("could not find {num_classes} distinct glyphs")));
        }
        let mut g = [false; GLYPH_SIDE * GLYPH_SIDE];
        g.iter_mut().for_each(|b| *b = rng.random_bool(0.5));
        let ok = glyphs
            .iter()
            .all(|o| hamming(&g, o) >= MIN_GLYPH_DISTANCE && hamming(&mirror(&g), o) >= MIN_GLYPH_DISTANCE);
        if ok {
            glyphs.push(g);
        }
    }
    Ok(glyphs)
}

const GLYPH_ON: f32 = 0.95;
const GLYPH_OFF: f32 = 0.05;

fn draw_glyph(img: &mut [f32], canvas: usize, at: Rect, glyph: &Glyph) {
    let scale = at.h / GLYPH_SIDE;
    let plane = canvas * canvas;
    for y in 0..at.h {
        for x in 0..at.w {
            let bit = glyph[(y / scale) * GLYPH_SIDE + x / scale];
            let v = if bit { GLYPH_ON } else { GLYPH_OFF };
            for ch in 0..3 {
                img[ch * plane + (at.y + y) * canvas + at.x + x] = v;
            }
        }
    }
}

fn background(spec: &SynthSpec, rng: &mut impl Rng) -> Vec<f32> {
    let n = spec.canvas;
    let plane = n * n;
    let mut img = vec![0.0f32; 3 * plane];
    for ch in 0..3 {
        let base = rng.random_range(0.25..0.6f32);
        for v in &mut img[ch * plane..(ch + 1) * plane] {
            *v = base + rng.random_range(-0.05..0.05f32);
        }
    }
    let blobs = (spec.clutter * plane).div_ceil(1024);
    for _ in 0..blobs {
        let (cy, cx) = (rng.random_range(0.0..n as f32), rng.random_range(0.0..n as f32));
        let sigma = rng.random_range(1.5..4.0f32);
        let color: [f32; 3] = [
            rng.random_range(-0.35..0.35),
            rng.random_range(-0.35..0.35),
            rng.random_range(-0.35..0.35),
        ];
        let reach = (3.0 * sigma).ceil() as isize;
        for y in (cy as isize - reach).max(0)..(cy as isize + reach + 1).min(n as isize) {
            for x in (cx as isize - reach).max(0)..(cx as isize + reach + 1).min(n as isize) {
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let weight = (-d2 / (2.0 * sigma * sigma)).exp();
                for ch in 0..3 {
                    let v = &mut img[ch * plane + y as usize * n + x as usize];
                    *v = (*v + weight * color[ch]).clamp(0.0, 1.0);
                }
            }
        }
    }
    img
}

fn place_cues(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Vec<Rect>> {
    let side = spec.cue_size;
    let span = spec.canvas - side - 1;
    let mut cues: Vec<Rect> = Vec::with_capacity(spec.redundancy);
    let mut attempts = 0;
    while cues.len() < spec.redundancy {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Data(format!(
                "cannot place {} non-overlapping cues of side {side} on a {n}x{n} canvas; use a smaller redundancy",
                spec.redundancy,
                n = spec.canvas,
            )));
        }
        let r = Rect {
            y: rng.random_range(1..=span),
            x: rng.random_range(1..=span),
            h: side,
            w: side,
        };
        if cues.iter().all(|c| !c.near(&r, 2)) {
            cues.push(r);
        }
    }
    Ok(cues)
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.per_class == 0 || spec.redundancy == 0 {
        return Err(Error::contract(
            "synthetic data needs ≥2 classes, ≥1 image per class and redundancy ≥1",
        ));
    }
    if spec.cue_size < GLYPH_SIDE || spec.cue_size % GLYPH_SIDE != 0 || spec.cue_size * 4 > spec.canvas {
        return Err(Error::contract(format!(
            "cue size {} must be a multiple of {GLYPH_SIDE} and at most a quarter of the canvas {}",
            spec.cue_size, spec.canvas
        )));
    }
    let glyphs = class_glyphs(spec.num_classes, spec.seed)?;
    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for j in 0..spec.per_class {
        let shared = mix(&[spec.seed, j as u64]);
        let bg = background(spec, &mut stream_rng(shared, stream::BACKGROUND));
        let cues = place_cues(spec, &mut stream_rng(shared, stream::PLACEMENT))?;
        for (class, glyph) in glyphs.iter().enumerate() {
            let mut img = bg.clone();
            for &at in &cues {
                draw_glyph(&mut img, spec.canvas, at, glyph);
            }
            samples.push(Sample {
                image: Tensor::new(vec![3, spec.canvas, spec.canvas], img)?,
                label: class,
                id: format!("class{class}/{j:05}"),
                group: None,
                cues: cues.clone(),
            });
        }
    }
    Ok(Dataset {
        samples,
        class_names: (0..spec.num_classes).map(|c| format!("class{c}")).collect(),
        image_size: spec.canvas,
        channels: 3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_matches_fractions() {
        assert_eq!(allocate(100, &[0.75, 0.25, 0.0]), Some([75, 25, 0]));
        assert_eq!(allocate(200, &[0.6, 0.2, 0.2]), Some([120, 40, 40]));
        assert_eq!(allocate(2, &[0.6, 0.2, 0.2]), None);
        let c = allocate(3, &[0.6, 0.2, 0.2]).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 3);
        assert!(c.iter().all(|&n| n == 1));
    }

    #[test]
    fn synth_spec_parses_round_trip() {
        let spec = SynthSpec {
            num_classes: 3,
            per_class: 10,
            canvas: 32,
            cue_size: 5,
            redundancy: 1,
            clutter: 2,
            seed: 99,
        };
        assert_eq!(spec.to_string().parse::<SynthSpec>().unwrap(), spec);
        assert!("synth:colour=red".parse::<SynthSpec>().is_err());
        assert!("cifar".parse::<SynthSpec>().is_err());
    }

    #[test]
    fn placement_failure_suggests_smaller_redundancy() {
        let spec = SynthSpec {
            canvas: 20,
            redundancy: 40,
            per_class: 1,
            ..SynthSpec::default()
        };
        let err = synth_generate(&spec).unwrap_err().to_string();
        assert!(err.contains("smaller redundancy"), "{err}");
    }

    #[test]
    fn mirror_is_an_involution() {
        let g = class_glyphs(1, 3).unwrap()[0];
        assert_eq!(mirror(&mirror(&g)), g);
    }
}
