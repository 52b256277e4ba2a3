//! Shapes-world: a procedural source/target segmentation domain pair.
//!
//! Geometry (and therefore every label map) depends only on the spec seed
//! and the sample index. Appearance is drawn from a separate stream and the
//! domain's [`Style`], so two specs that share a seed but differ in style
//! produce identical labels under different pixels.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{fnv1a, put_f32s, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, EngineRng};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const CLASS_NAMES: [&str; 5] = ["background", "circle", "square", "triangle", "bar"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Argument(format!("unknown domain `{other}`"))),
        }
    }
}

/// Appearance parameters of one domain. Labels never depend on these.
#[derive(Clone, Debug, PartialEq)]
pub struct Style {
    pub background: [f32; 3],
    /// Colours shapes are painted with; each shape picks one at random,
    /// independent of its class.
    pub palette: Vec<[f32; 3]>,
    pub color_jitter: f32,
    pub noise_sigma: f32,
    /// Stripe frequency of the additive texture, in cycles per image width.
    pub texture_freq: f32,
    pub texture_amp: f32,
    /// Peak relative brightness change of a linear illumination ramp.
    pub illumination: f32,
}

impl Style {
    pub fn source() -> Self {
        Style {
            background: [0.18, 0.2, 0.24],
            palette: vec![
                [0.9, 0.25, 0.2],
                [0.25, 0.8, 0.3],
                [0.25, 0.4, 0.95],
                [0.92, 0.85, 0.25],
                [0.85, 0.35, 0.85],
                [0.3, 0.85, 0.85],
            ],
            color_jitter: 0.06,
            noise_sigma: 0.03,
            texture_freq: 3.0,
            texture_amp: 0.03,
            illumination: 0.0,
        }
    }

    /// Source palette with permuted channels pulled toward grey, a lighter
    /// textured background, stronger noise and an illumination ramp.
    pub fn target() -> Self {
        let src = Style::source();
        let palette = src
            .palette
            .iter()
            .map(|c| {
                let p = [c[2], c[0], c[1]];
                p.map(|v| 0.7 * v + 0.3 * 0.5)
            })
            .collect();
        Style {
            background: [0.42, 0.4, 0.36],
            palette,
            color_jitter: 0.08,
            noise_sigma: 0.1,
            texture_freq: 7.0,
            texture_amp: 0.07,
            illumination: 0.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub seed: u64,
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub style: Style,
}

impl DomainSpec {
    pub fn source(seed: u64) -> Self {
        DomainSpec {
            seed,
            domain: Domain::Source,
            height: 64,
            width: 64,
            num_classes: 5,
            style: Style::source(),
        }
    }

    pub fn target(seed: u64) -> Self {
        DomainSpec {
            seed,
            domain: Domain::Target,
            style: Style::target(),
            ..DomainSpec::source(seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        DomainSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Argument(format!(
                "image size {}x{} below the 16x16 minimum",
                self.height, self.width
            )));
        }
        if self.num_classes != CLASS_NAMES.len() {
            return Err(Error::Argument(format!(
                "shapes-world has {} classes, spec asks for {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.style.palette.is_empty() {
            return Err(Error::Argument("style palette is empty".into()));
        }
        Ok(())
    }

    /// Flat `key=value` rendering, echoed into dataset containers.
    pub fn to_text(&self) -> String {
        let s = &self.style;
        let rgb = |c: &[f32; 3]| format!("{},{},{}", c[0], c[1], c[2]);
        let palette: Vec<String> = s.palette.iter().map(rgb).collect();
        format!(
            "seed={}\ndomain={}\nheight={}\nwidth={}\nnum_classes={}\nbackground={}\npalette={}\n\
             color_jitter={}\nnoise_sigma={}\ntexture_freq={}\ntexture_amp={}\nillumination={}\n",
            self.seed,
            self.domain.as_str(),
            self.height,
            self.width,
            self.num_classes,
            rgb(&s.background),
            palette.join(";"),
            s.color_jitter,
            s.noise_sigma,
            s.texture_freq,
            s.texture_amp,
            s.illumination
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("spec line `{line}` lacks `=`")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Argument(format!("spec lacks `{k}`")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Argument(format!("spec `{k}` = `{v}` is malformed")))
        }
        let rgb = |k: &str, v: &str| -> Result<[f32; 3]> {
            let parts: Vec<f32> = v.split(',').map(|p| num(k, p)).collect::<Result<_>>()?;
            parts
                .try_into()
                .map_err(|_| Error::Argument(format!("spec `{k}` needs three components")))
        };
        let palette = get("palette")?
            .split(';')
            .map(|c| rgb("palette", c))
            .collect::<Result<Vec<_>>>()?;
        Ok(DomainSpec {
            seed: num("seed", get("seed")?)?,
            domain: Domain::parse(get("domain")?)?,
            height: num("height", get("height")?)?,
            width: num("width", get("width")?)?,
            num_classes: num("num_classes", get("num_classes")?)?,
            style: Style {
                background: rgb("background", get("background")?)?,
                palette,
                color_jitter: num("color_jitter", get("color_jitter")?)?,
                noise_sigma: num("noise_sigma", get("noise_sigma")?)?,
                texture_freq: num("texture_freq", get("texture_freq")?)?,
                texture_amp: num("texture_amp", get("texture_amp")?)?,
                illumination: num("illumination", get("illumination")?)?,
            },
        })
    }
}

/// One image with its (optional) per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub index: u64,
    pub domain: Domain,
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `[H, W]` class ids, absent for unlabeled target training data.
    pub label: Option<Vec<u8>>,
}

impl SegSample {
    pub fn without_label(mut self) -> Self {
        self.label = None;
        self
    }

    pub fn image_tensor(&self) -> Tensor {
        Tensor::from_vec(self.image.clone(), &[3, self.height, self.width]).expect("sample image shape")
    }

    /// Copies the `size x size` window at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size: usize) -> SegSample {
        assert!(top + size <= self.height && left + size <= self.width, "crop out of bounds");
        let (h, w) = (self.height, self.width);
        let mut image = Vec::with_capacity(3 * size * size);
        for c in 0..3 {
            for y in top..top + size {
                let row = (c * h + y) * w;
                image.extend_from_slice(&self.image[row + left..row + left + size]);
            }
        }
        let label = self.label.as_ref().map(|l| {
            let mut out = Vec::with_capacity(size * size);
            for y in top..top + size {
                out.extend_from_slice(&l[y * w + left..y * w + left + size]);
            }
            out
        });
        SegSample {
            index: self.index,
            domain: self.domain,
            height: size,
            width: size,
            image,
            label,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle { cx: f32, cy: f32, r: f32 },
    Square { cx: f32, cy: f32, half: f32 },
    Triangle { v: [(f32, f32); 3] },
    Bar { cx: f32, cy: f32, half_len: f32, half_thick: f32, vertical: bool },
}

impl Shape {
    fn class(&self) -> u8 {
        match self {
            Shape::Circle { .. } => 1,
            Shape::Square { .. } => 2,
            Shape::Triangle { .. } => 3,
            Shape::Bar { .. } => 4,
        }
    }

    /// Class-specific surface pattern shared by every domain: squares are
    /// striped, triangles checkered, circles and bars solid.
    fn fill(&self, x: usize, y: usize) -> f32 {
        const DARK: f32 = 0.55;
        match self {
            Shape::Square { .. } if (y / 2) % 2 == 1 => DARK,
            Shape::Triangle { .. } if (x / 2 + y / 2) % 2 == 1 => DARK,
            _ => 1.0,
        }
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Square { cx, cy, half } => (x - cx).abs() <= half && (y - cy).abs() <= half,
            Shape::Triangle { v } => {
                let edge = |a: (f32, f32), b: (f32, f32)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let (d0, d1, d2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            Shape::Bar {
                cx,
                cy,
                half_len,
                half_thick,
                vertical,
            } => {
                let (hx, hy) = if vertical { (half_thick, half_len) } else { (half_len, half_thick) };
                (x - cx).abs() <= hx && (y - cy).abs() <= hy
            }
        }
    }

    fn random(rng: &mut EngineRng, h: usize, w: usize) -> Shape {
        let scale = (h.min(w) as f32) / 64.0;
        let class = rng.random_range(1..=4u8);
        let margin = 6.0 * scale;
        let cx = rng.random_range(margin..w as f32 - margin);
        let cy = rng.random_range(margin..h as f32 - margin);
        match class {
            1 => Shape::Circle {
                cx,
                cy,
                r: rng.random_range(3.5..7.0) * scale,
            },
            2 => Shape::Square {
                cx,
                cy,
                half: rng.random_range(3.0..6.0) * scale,
            },
            3 => {
                let r = rng.random_range(5.0..9.0) * scale;
                let rot = rng.random_range(0.0..std::f32::consts::TAU);
                let v = [0.0f32, 1.0, 2.0].map(|k| {
                    let a = rot + k * std::f32::consts::TAU / 3.0;
                    (cx + r * a.cos(), cy + r * a.sin())
                });
                Shape::Triangle { v }
            }
            _ => Shape::Bar {
                cx,
                cy,
                half_len: rng.random_range(6.0..11.0) * scale,
                half_thick: rng.random_range(1.25..2.25) * scale,
                vertical: rng.random_bool(0.5),
            },
        }
    }
}

/// Label map of sample `index`: 2 to 5 shapes over background, later shapes
/// occluding earlier ones. Shapes that end up fully hidden are redrawn.
fn layout(spec: &DomainSpec, index: u64) -> (Vec<Shape>, Vec<u8>) {
    let (h, w) = (spec.height, spec.width);
    let mut rng = rng::seeded(derive_seed(spec.seed, index), rng::stream::GEOMETRY);
    let count = rng.random_range(2..=5usize);
    loop {
        let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(&mut rng, h, w)).collect();
        let mut label = vec![BACKGROUND; h * w];
        let mut owner = vec![usize::MAX; h * w];
        for (si, s) in shapes.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if s.contains(x as f32 + 0.5, y as f32 + 0.5) {
                        label[y * w + x] = s.class();
                        owner[y * w + x] = si;
                    }
                }
            }
        }
        let mut visible = vec![0usize; shapes.len()];
        owner.iter().filter(|&&o| o != usize::MAX).for_each(|&o| visible[o] += 1);
        if visible.iter().all(|&v| v >= 8) {
            return (shapes, label);
        }
    }
}

/// Deterministic sample `index` of the domain.
pub fn generate(spec: &DomainSpec, index: u64) -> Result<SegSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (shapes, label) = layout(spec, index);
    let st = &spec.style;
    let mut rng = rng::seeded(derive_seed(spec.seed, index), rng::stream::STYLE);
    let jitter = |rng: &mut EngineRng, c: [f32; 3], amt: f32| {
        c.map(|v| v + if amt > 0.0 { rng.random_range(-amt..amt) } else { 0.0 })
    };
    let background = jitter(&mut rng, st.background, st.color_jitter);
    let colors: Vec<[f32; 3]> = shapes
        .iter()
        .map(|_| {
            let base = st.palette[rng.random_range(0..st.palette.len())];
            jitter(&mut rng, base, st.color_jitter)
        })
        .collect();
    let theta = rng.random_range(0.0..std::f32::consts::TAU);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let light_dir = rng.random_range(0.0..std::f32::consts::TAU);
    let (lx, ly) = (light_dir.cos(), light_dir.sin());
    let noise = Normal::new(0.0f32, st.noise_sigma.max(0.0)).expect("finite sigma");

    let mut image = vec![0.0f32; 3 * h * w];
    let mut owner = vec![usize::MAX; h * w];
    for (si, s) in shapes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if s.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    owner[y * w + x] = si;
                }
            }
        }
    }
    let freq = st.texture_freq * std::f32::consts::TAU / w as f32;
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / w as f32 - 0.5, y as f32 / h as f32 - 0.5);
            let texture = st.texture_amp * (freq * (x as f32 * theta.cos() + y as f32 * theta.sin()) + phase).sin();
            let light = 1.0 + st.illumination * 2.0 * (u * lx + v * ly);
            let o = owner[y * w + x];
            let base = if o == usize::MAX {
                background
            } else {
                let f = shapes[o].fill(x, y);
                colors[o].map(|v| v * f)
            };
            for c in 0..3 {
                let n = if st.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image[(c * h + y) * w + x] = ((base[c] + texture) * light + n).clamp(0.0, 1.0);
            }
        }
    }
    Ok(SegSample {
        index,
        domain: spec.domain,
        height: h,
        width: w,
        image,
        label: Some(label),
    })
}

/// A materialized pool of samples `0..count` of one domain.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn generate(spec: &DomainSpec, count: usize) -> Result<Self> {
        let samples = (0..count as u64).map(|i| generate(spec, i)).collect::<Result<_>>()?;
        Ok(Dataset {
            spec: spec.clone(),
            samples,
        })
    }

    pub fn without_labels(mut self) -> Self {
        self.samples = self.samples.into_iter().map(SegSample::without_label).collect();
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }
}

/// A batch stacked into `[B, 3, h, w]` plus `[B, h, w]` labels if present.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub indices: Vec<u64>,
}

pub fn stack(samples: &[SegSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("cannot stack an empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if samples.iter().any(|s| s.height != h || s.width != w) {
        return Err(Error::shape("stack", "samples differ in size"));
    }
    let images: Vec<f32> = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    let labels = samples
        .iter()
        .map(|s| s.label.clone())
        .collect::<Option<Vec<_>>>()
        .map(|l| l.concat());
    Ok(Batch {
        images: Tensor::from_vec(images, &[samples.len(), 3, h, w])?,
        labels,
        indices: samples.iter().map(|s| s.index).collect(),
    })
}

/// Infinite shuffled stream of batches over a dataset. Each epoch is a fresh
/// permutation derived from `(shuffle_seed, epoch)`; optional random crops
/// come from their own stream.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    crop: Option<usize>,
    crop_rng: EngineRng,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    draws: u64,
}

impl<'a> BatchIter<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, shuffle_seed: u64, crop: Option<usize>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Argument("batch_size must be at least 1".into()));
        }
        if data.is_empty() {
            return Err(Error::Argument("cannot iterate an empty dataset".into()));
        }
        if let Some(c) = crop {
            if data.samples.iter().any(|s| c > s.height || c > s.width) || c == 0 {
                return Err(Error::Argument(format!("crop {c} does not fit the samples")));
            }
        }
        let mut it = BatchIter {
            data,
            batch_size,
            shuffle_seed,
            crop,
            crop_rng: rng::seeded(shuffle_seed, rng::stream::CROP),
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            draws: 0,
        };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order = (0..self.data.len()).collect();
        let mut r = rng::seeded(derive_seed(self.shuffle_seed, self.epoch), rng::stream::SHUFFLE);
        self.order.shuffle(&mut r);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Number of batches handed out so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_samples(&mut self) -> Vec<SegSample> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            let s = &self.data.samples[self.order[self.cursor]];
            self.cursor += 1;
            out.push(match self.crop {
                Some(c) => {
                    let top = self.crop_rng.random_range(0..=s.height - c);
                    let left = self.crop_rng.random_range(0..=s.width - c);
                    s.crop(top, left, c)
                }
                None => s.clone(),
            });
        }
        self.draws += 1;
        out
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        stack(&self.next_samples())
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch().expect("samples of one dataset stack"))
    }
}

pub const DATASET_MAGIC: &[u8; 8] = b"MEMREGDS";
pub const DATASET_VERSION: u32 = 1;

/// Dataset container, little-endian:
///
/// ```text
/// magic 8 bytes "MEMREGDS", version u32,
/// spec_len u32 + spec text (DomainSpec::to_text),
/// height u32, width u32, num_classes u32, count u32,
/// per sample: index u64, domain u8 (0 source, 1 target), has_label u8,
///             image f32 x 3*H*W (channel-major), label u8 x H*W if has_label
/// trailer: FNV-1a 64 of all preceding bytes, u64
/// ```
pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let spec = &data.spec;
    let mut w = Vec::new();
    w.extend_from_slice(DATASET_MAGIC);
    w.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let text = spec.to_text();
    w.extend_from_slice(&(text.len() as u32).to_le_bytes());
    w.extend_from_slice(text.as_bytes());
    for v in [spec.height, spec.width, spec.num_classes, data.samples.len()] {
        w.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &data.samples {
        w.extend_from_slice(&s.index.to_le_bytes());
        w.push(match s.domain {
            Domain::Source => 0,
            Domain::Target => 1,
        });
        w.push(s.label.is_some() as u8);
        put_f32s(&mut w, &s.image);
        if let Some(l) = &s.label {
            w.extend_from_slice(l);
        }
    }
    let sum = fnv1a(&w);
    w.extend_from_slice(&sum.to_le_bytes());
    w
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "not a dataset container (bad magic)".into(),
        });
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    if bytes.len() < r.pos + 8 {
        return Err(r.err("container too short for trailer"));
    }
    let end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[end..].try_into().expect("8 bytes"));
    if stored != fnv1a(&bytes[..end]) {
        return Err(Error::Format {
            offset: end as u64,
            detail: "checksum mismatch (truncated or corrupt container)".into(),
        });
    }
    let mut r = Reader {
        bytes: &bytes[..end],
        pos: r.pos,
    };
    let spec_at = r.pos;
    let spec = DomainSpec::from_text(&r.string()?).map_err(|e| Error::Format {
        offset: spec_at as u64,
        detail: e.to_string(),
    })?;
    let (h, w, classes, count) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if (h, w, classes) != (spec.height, spec.width, spec.num_classes) {
        return Err(r.err("header dimensions disagree with the spec echo"));
    }
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let index = r.u64()?;
        let domain = match r.take(1)?[0] {
            0 => Domain::Source,
            1 => Domain::Target,
            d => return Err(r.err(format!("unknown domain tag {d}"))),
        };
        let has_label = match r.take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(r.err(format!("bad label flag {f}"))),
        };
        let image = r.f32s(3 * h * w)?;
        let label = if has_label {
            let at = r.pos;
            let l = r.take(h * w)?.to_vec();
            if l.iter().any(|&c| c as usize >= classes) {
                return Err(Error::Format {
                    offset: at as u64,
                    detail: "label out of class range".into(),
                });
            }
            Some(l)
        } else {
            None
        };
        samples.push(SegSample {
            index,
            domain,
            height: h,
            width: w,
            image,
            label,
        });
    }
    if r.pos != r.bytes.len() {
        return Err(r.err("trailing bytes before checksum"));
    }
    Ok(Dataset { spec, samples })
}

pub fn export_dataset(spec: &DomainSpec, count: usize, path: &Path) -> Result<Dataset> {
    let data = Dataset::generate(spec, count)?;
    write_atomic(path, &encode_dataset(&data))?;
    Ok(data)
}

pub fn import_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
