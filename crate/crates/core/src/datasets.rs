//! Synthetic attribute-controlled images, domain shifts, the CIFAR-10 binary
//! loader and the `CTXD` dataset container.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ctxf_autodiff::rng::{self, Rng};
use ctxf_autodiff::Tensor;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Texture {
    Uniform,
    Striped,
    Dotted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Background {
    Dark,
    Light,
}

macro_rules! named_enum {
    ($t:ty { $($v:ident => $s:literal),+ }) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $t {
            type Err = CoreError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$v),)+
                    other => Err(CoreError::Config(format!(
                        "unknown {} {other:?}", stringify!($t).to_lowercase()
                    ))),
                }
            }
        }
    };
}

named_enum!(Shape { Circle => "circle", Square => "square", Triangle => "triangle", Cross => "cross" });
named_enum!(Texture { Uniform => "uniform", Striped => "striped", Dotted => "dotted" });
named_enum!(Background { Dark => "dark", Light => "light" });

#[derive(Clone, Debug, PartialEq)]
pub struct Color {
    pub name: String,
    pub rgb: [f32; 3],
}

impl Color {
    pub fn new(name: &str, rgb: [f32; 3]) -> Self {
        Self {
            name: name.to_string(),
            rgb,
        }
    }
}

/// One synthetic class. Attributes are optional so incomplete
/// specifications can be represented and rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClass {
    pub name: String,
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub texture: Option<Texture>,
    pub background: Option<Background>,
    pub supercategory: Option<String>,
}

impl SyntheticClass {
    pub fn new(
        name: &str,
        shape: Shape,
        color: Color,
        texture: Texture,
        background: Background,
        supercategory: &str,
    ) -> Self {
        Self {
            name: name.to_string(),
            shape: Some(shape),
            color: Some(color),
            texture: Some(texture),
            background: Some(background),
            supercategory: Some(supercategory.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: Vec<SyntheticClass>,
    pub image_size: usize,
}

fn red() -> Color {
    Color::new("red", [0.9, 0.15, 0.15])
}
fn green() -> Color {
    Color::new("green", [0.15, 0.75, 0.2])
}
fn blue() -> Color {
    Color::new("blue", [0.15, 0.3, 0.9])
}
fn yellow() -> Color {
    Color::new("yellow", [0.95, 0.85, 0.1])
}
fn purple() -> Color {
    Color::new("purple", [0.6, 0.2, 0.8])
}

impl SyntheticSpec {
    /// Ten classes in two supercategories. Supercategories follow shape
    /// family (disc/square vs triangle/cross) while colors, textures and
    /// backgrounds are shared across them.
    pub fn default_ten() -> Self {
        use Background::*;
        use Shape::*;
        use Texture::*;
        let classes = vec![
            SyntheticClass::new("Amber", Circle, red(), Uniform, Dark, "Solid"),
            SyntheticClass::new("Basil", Circle, green(), Striped, Light, "Solid"),
            SyntheticClass::new("Cobalt", Square, blue(), Uniform, Light, "Solid"),
            SyntheticClass::new("Dune", Square, yellow(), Dotted, Dark, "Solid"),
            SyntheticClass::new("Ember", Circle, purple(), Dotted, Light, "Solid"),
            SyntheticClass::new("Fjord", Triangle, blue(), Dotted, Dark, "Spiky"),
            SyntheticClass::new("Garnet", Cross, red(), Dotted, Light, "Spiky"),
            SyntheticClass::new("Heath", Cross, green(), Uniform, Dark, "Spiky"),
            SyntheticClass::new("Iris", Cross, yellow(), Striped, Light, "Spiky"),
            SyntheticClass::new("Jade", Triangle, purple(), Uniform, Light, "Spiky"),
        ];
        Self {
            classes,
            image_size: 32,
        }
    }

    /// Class used by the default target domain in place of a dropped one.
    pub fn unseen_class() -> SyntheticClass {
        SyntheticClass::new(
            "Kelp",
            Shape::Square,
            red(),
            Texture::Striped,
            Background::Dark,
            "Solid",
        )
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn supercategories(&self) -> Vec<String> {
        self.classes
            .iter()
            .map(|c| c.supercategory.clone().unwrap_or_default())
            .collect()
    }

    /// The same spec with class `drop` replaced by `replacement`.
    pub fn with_swap(&self, drop: usize, replacement: SyntheticClass) -> Result<Self> {
        if drop >= self.classes.len() {
            return Err(CoreError::Config(format!("no class at index {drop}")));
        }
        let mut out = self.clone();
        out.classes[drop] = replacement;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(CoreError::Config("synthetic spec has no classes".into()));
        }
        if self.image_size < 8 {
            return Err(CoreError::Config("image size must be at least 8".into()));
        }
        let mut names = HashSet::new();
        for c in &self.classes {
            if !names.insert(c.name.as_str()) {
                return Err(CoreError::Config(format!("duplicate class {}", c.name)));
            }
            let complete = c.shape.is_some()
                && c.color.is_some()
                && c.texture.is_some()
                && c.background.is_some()
                && c.supercategory.is_some();
            if !complete {
                return Err(CoreError::Config(format!(
                    "class {} has an incomplete attribute assignment",
                    c.name
                )));
            }
        }
        let supers: HashSet<_> = self.classes.iter().map(|c| &c.supercategory).collect();
        if supers.len() < 2 {
            return Err(CoreError::Config("need at least two supercategories".into()));
        }
        Ok(())
    }
}

/// Images stored as `u8` in channel-planar order, exposed as values in [0, 1].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageDataset {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl ImageDataset {
    pub fn new(
        (height, width, channels): (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let per = height * width * channels;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(CoreError::Data(format!(
                "{} pixel bytes do not match {} images of {height}x{width}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(CoreError::Data(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Image `i` scaled to [0, 1].
    pub fn image(&self, i: usize) -> Vec<f32> {
        self.image_bytes(i).iter().map(|&b| b as f32 / 255.0).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// `[batch, C, H, W]` tensor of the selected images.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let data: Vec<f32> = indices.iter().flat_map(|&i| self.image(i)).collect();
        Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)
            .expect("batch dimensions follow the dataset")
    }

    pub fn subset(&self, indices: &[usize]) -> ImageDataset {
        Self {
            pixels: indices.iter().flat_map(|&i| self.image_bytes(i).to_vec()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: Vec::new(),
            labels: Vec::new(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn write_ctxd(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CTXD_MAGIC)?;
        for v in [
            CTXD_VERSION,
            self.len() as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            self.class_names.len() as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for name in &self.class_names {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        w.write_all(&self.pixels)?;
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        w.write_all(&labels)?;
        Ok(())
    }

    pub fn read_ctxd(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CTXD_MAGIC {
            return Err(CoreError::Format("not a CTXD file".into()));
        }
        let mut u32s = [0u32; 6];
        for v in &mut u32s {
            *v = read_u32(r)?;
        }
        let [version, n, h, w, c, k] = u32s.map(|v| v as usize);
        if version != CTXD_VERSION as usize {
            return Err(CoreError::Format(format!("unsupported CTXD version {version}")));
        }
        let mut class_names = Vec::with_capacity(k);
        for _ in 0..k {
            let len = read_u32(r)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            class_names.push(String::from_utf8(buf).map_err(|_| CoreError::Format("class name is not UTF-8".into()))?);
        }
        let mut pixels = vec![0u8; n * h * w * c];
        r.read_exact(&mut pixels)?;
        let mut labels = vec![0u8; n];
        r.read_exact(&mut labels)?;
        Self::new(
            (h, w, c),
            pixels,
            labels.into_iter().map(usize::from).collect(),
            class_names,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ctxd(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_ctxd(&mut f)
    }
}

const CTXD_MAGIC: &[u8; 4] = b"CTXD";
const CTXD_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn inside(shape: Shape, u: f32, v: f32) -> bool {
    match shape {
        Shape::Circle => u * u + v * v <= 1.0,
        Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        Shape::Triangle => {
            let s = 3f32.sqrt();
            v >= -0.5 && s * u + v <= 1.0 && -s * u + v <= 1.0
        }
        Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
    }
}

/// Render one sample of `class`; returns the `[3, size, size]` image and the
/// foreground mask.
pub fn render_sample(class: &SyntheticClass, size: usize, rng: &mut Rng) -> Result<(Vec<f32>, Vec<bool>)> {
    let incomplete = || CoreError::Config(format!("class {} is incomplete", class.name));
    let shape = class.shape.ok_or_else(incomplete)?;
    let color = class.color.as_ref().ok_or_else(incomplete)?;
    let texture = class.texture.ok_or_else(incomplete)?;
    let background = class.background.ok_or_else(incomplete)?;

    let s = size as f32;
    let base = match background {
        Background::Dark => 0.18,
        Background::Light => 0.82,
    } + rng.gen_range(-0.05f32..0.05);
    let cx = s / 2.0 + rng.gen_range(-0.125 * s..0.125 * s);
    let cy = s / 2.0 + rng.gen_range(-0.125 * s..0.125 * s);
    let radius = rng.gen_range(0.22 * s..0.32 * s);
    let theta = rng.gen_range(0.0..std::f32::consts::TAU);
    let (sin, cos) = theta.sin_cos();
    let tint: [f32; 3] = std::array::from_fn(|c| color.rgb[c] * rng.gen_range(0.9f32..1.1));
    let phase = rng.gen_range(0.0f32..4.0);

    let mut img = vec![0.0f32; 3 * size * size];
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            // shape-local pixel coordinates
            let (lu, lv) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let fg = inside(shape, lu / radius, lv / radius);
            let p = y * size + x;
            mask[p] = fg;
            let shade = if !fg {
                None
            } else {
                Some(match texture {
                    Texture::Uniform => 1.0,
                    Texture::Striped => {
                        if ((lu + phase) / 2.5).floor() as i64 % 2 == 0 {
                            1.0
                        } else {
                            0.45
                        }
                    }
                    Texture::Dotted => {
                        let (mu, mv) = ((lu + phase).rem_euclid(4.0) - 2.0, (lv + phase).rem_euclid(4.0) - 2.0);
                        if mu * mu + mv * mv <= 1.5 {
                            0.35
                        } else {
                            1.0
                        }
                    }
                })
            };
            for c in 0..3 {
                let v = match shade {
                    Some(k) => tint[c] * k,
                    None => base,
                };
                let noise: f32 = rng.sample::<f32, _>(StandardNormal) * 0.02;
                img[c * size * size + p] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok((img, mask))
}

/// Render `n_per_class` images of every class. Sample `i` of class `c` uses
/// its own RNG stream derived from `(seed, c, i)`.
pub fn generate(spec: &SyntheticSpec, n_per_class: usize, seed: u64) -> Result<ImageDataset> {
    spec.validate()?;
    let size = spec.image_size;
    let mut pixels = Vec::with_capacity(spec.classes.len() * n_per_class * 3 * size * size);
    let mut labels = Vec::new();
    for (ci, class) in spec.classes.iter().enumerate() {
        for i in 0..n_per_class {
            let mut r = rng::derive(seed, &[ci as u64, i as u64]);
            let (img, _) = render_sample(class, size, &mut r)?;
            pixels.extend(img.into_iter().map(quantize));
            labels.push(ci);
        }
    }
    ImageDataset::new((size, size, 3), pixels, labels, spec.class_names())
}

/// Parametric appearance change between a source and a target domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainShift {
    pub brightness: f32,
    pub size_scale: f32,
    pub background_swap: bool,
    pub noise_std: f32,
}

impl DomainShift {
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            size_scale: 1.0,
            background_swap: false,
            noise_std: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(format!("domain shift: {m}")));
        if !(-1.0..=1.0).contains(&self.brightness) {
            return bad("brightness must lie in [-1, 1]");
        }
        if !(0.25..=4.0).contains(&self.size_scale) {
            return bad("size scale must lie in [0.25, 4]");
        }
        if !(0.0..=1.0).contains(&self.noise_std) {
            return bad("noise std must lie in [0, 1]");
        }
        Ok(())
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::identity()
    }
}

fn border_median(img: &[f32], size: usize, c: usize) -> f32 {
    let plane = &img[c * size * size..(c + 1) * size * size];
    let mut vals: Vec<f32> = (0..size)
        .flat_map(|i| {
            [
                plane[i],
                plane[(size - 1) * size + i],
                plane[i * size],
                plane[i * size + size - 1],
            ]
        })
        .collect();
    vals.sort_by(f32::total_cmp);
    vals[vals.len() / 2]
}

fn bilinear(plane: &[f32], size: usize, x: f32, y: f32, fill: f32) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f32, yi: f32| {
        if xi < 0.0 || yi < 0.0 || xi >= size as f32 || yi >= size as f32 {
            fill
        } else {
            plane[yi as usize * size + xi as usize]
        }
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy
}

fn shift_image(img: &[f32], size: usize, s: &DomainShift, rng: &mut Rng) -> Vec<f32> {
    let mut out = img.to_vec();
    let bg: [f32; 3] = std::array::from_fn(|c| border_median(img, size, c));
    if s.size_scale != 1.0 {
        let center = size as f32 / 2.0;
        for c in 0..3 {
            let plane = &img[c * size * size..(c + 1) * size * size];
            for y in 0..size {
                for x in 0..size {
                    let sx = (x as f32 + 0.5 - center) / s.size_scale + center - 0.5;
                    let sy = (y as f32 + 0.5 - center) / s.size_scale + center - 0.5;
                    out[c * size * size + y * size + x] = bilinear(plane, size, sx, sy, bg[c]);
                }
            }
        }
    }
    if s.background_swap {
        let hw = size * size;
        for p in 0..hw {
            let near = (0..3).all(|c| (out[c * hw + p] - bg[c]).abs() <= 0.15);
            if near {
                for c in 0..3 {
                    out[c * hw + p] = 1.0 - out[c * hw + p];
                }
            }
        }
    }
    for v in out.iter_mut() {
        *v += s.brightness;
        if s.noise_std > 0.0 {
            *v += rng.sample::<f32, _>(StandardNormal) * s.noise_std;
        }
    }
    out
}

/// Apply a domain shift to every image; labels are unchanged.
pub fn shift(dataset: &ImageDataset, s: &DomainShift, seed: u64) -> Result<ImageDataset> {
    s.validate()?;
    if s.is_identity() {
        return Ok(dataset.clone());
    }
    let (h, w, c) = dataset.dims();
    if h != w || c != 3 {
        return Err(CoreError::Data("domain shifts need square RGB images".into()));
    }
    let mut pixels = Vec::with_capacity(dataset.pixels.len());
    for i in 0..dataset.len() {
        let mut r = rng::derive(seed, &[i as u64]);
        let out = shift_image(&dataset.image(i), h, s, &mut r);
        pixels.extend(out.into_iter().map(quantize));
    }
    ImageDataset::new(
        dataset.dims(),
        pixels,
        dataset.labels.clone(),
        dataset.class_names.clone(),
    )
}

pub const CIFAR_RECORD: usize = 1 + 3072;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR_NAMES: [&str; 10] = [
    "Airplane",
    "Automobile",
    "Bird",
    "Cat",
    "Deer",
    "Dog",
    "Frog",
    "Horse",
    "Ship",
    "Truck",
];

/// Parse raw CIFAR-10 records (label byte + 3072 channel-planar pixels).
pub fn parse_cifar_records(bytes: &[u8]) -> Result<ImageDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(CoreError::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(bytes.len());
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    ImageDataset::new(
        (32, 32, 3),
        pixels,
        labels,
        CIFAR_NAMES.iter().map(|s| s.to_string()).collect(),
    )
}

/// Read one standard batch file, which must hold exactly 10000 records.
pub fn load_cifar_batch(path: impl AsRef<Path>) -> Result<ImageDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let expected = (CIFAR_BATCH_RECORDS * CIFAR_RECORD) as u64;
    if bytes.len() as u64 != expected {
        return Err(CoreError::FileSize {
            path: path.display().to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    parse_cifar_records(&bytes)
}

/// Train (`data_batch_1..5.bin`) and test (`test_batch.bin`) splits.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(ImageDataset, ImageDataset)> {
    let dir = dir.as_ref();
    let mut train: Option<ImageDataset> = None;
    for i in 1..=5 {
        let part = load_cifar_batch(dir.join(format!("data_batch_{i}.bin")))?;
        train = Some(match train {
            None => part,
            Some(mut acc) => {
                acc.pixels.extend_from_slice(&part.pixels);
                acc.labels.extend_from_slice(&part.labels);
                acc
            }
        });
    }
    let test = load_cifar_batch(dir.join("test_batch.bin"))?;
    Ok((train.expect("five batches read"), test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_contains_its_centroid_only() {
        assert!(inside(Shape::Triangle, 0.0, 0.0));
        assert!(!inside(Shape::Triangle, 0.0, -0.6));
        assert!(inside(Shape::Cross, 0.9, 0.0));
        assert!(!inside(Shape::Cross, 0.9, 0.9));
    }

    #[test]
    fn names_parse_back() {
        for s in [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross] {
            assert_eq!(s.as_str().parse::<Shape>().unwrap(), s);
        }
        assert!("hexagon".parse::<Shape>().is_err());
    }
}
