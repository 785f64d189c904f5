//! Plain convolutional image encoder with a two-layer projection head, and
//! the training-time augmentation pipeline.

use ctxf_autodiff::rng::Rng;
use ctxf_autodiff::{ParamSet, Real, Tape, Tensor, Var};
use rand::Rng as _;

use crate::datasets::ImageDataset;
use crate::error::{CoreError, Result};

pub const EMBED_DIM: usize = 128;
const STEM_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Output channels of each conv-relu-maxpool stage. The first stage's
    /// convolution has stride 2.
    pub widths: Vec<usize>,
    pub head_hidden: usize,
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            widths: vec![16, 32, 64, 64],
            head_hidden: 128,
            out_dim: EMBED_DIM,
        }
    }
}

impl EncoderConfig {
    /// Dimensionality of the representation layer.
    pub fn d_e(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(CoreError::Config("encoder needs positive stage widths".into()));
        }
        let shrink = 1usize << (self.widths.len() + 1);
        if !self.height.is_multiple_of(shrink) || !self.width.is_multiple_of(shrink) {
            return Err(CoreError::Config(format!(
                "input {}x{} is not divisible by {shrink} ({} stages after a strided stem)",
                self.height,
                self.width,
                self.widths.len()
            )));
        }
        if self.out_dim == 0 || self.head_hidden == 0 {
            return Err(CoreError::Config("head sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn init<T: Real>(&self, rng: &mut Rng) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut p = ParamSet::new();
        let mut c_in = self.channels;
        for (i, &c_out) in self.widths.iter().enumerate() {
            let fan_in = c_in * 9;
            p.insert(
                format!("conv{i}.w"),
                Tensor::randn(&[c_out, c_in, 3, 3], (2.0 / fan_in as f64).sqrt(), rng),
            );
            p.insert(format!("conv{i}.b"), Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        let (d, hid, out) = (self.d_e(), self.head_hidden, self.out_dim);
        p.insert("head1.w", Tensor::glorot(&[d, hid], d, hid, rng));
        p.insert("head1.b", Tensor::zeros(&[hid]));
        p.insert("head2.w", Tensor::glorot(&[hid, out], hid, out, rng));
        p.insert("head2.b", Tensor::zeros(&[out]));
        Ok(p)
    }

    /// Recover the architecture from parameter shapes.
    pub fn from_params<T: Real>(params: &ParamSet<T>, height: usize, width: usize) -> Result<Self> {
        let missing = |n: &str| CoreError::Config(format!("encoder parameter {n} missing"));
        let mut widths = Vec::new();
        let mut channels = 0;
        while let Some(w) = params.get(&format!("conv{}.w", widths.len())) {
            if w.ndim() != 4 {
                return Err(CoreError::Config("conv weights must be 4-D".into()));
            }
            if widths.is_empty() {
                channels = w.shape()[1];
            }
            widths.push(w.shape()[0]);
        }
        let h1 = params.get("head1.w").ok_or_else(|| missing("head1.w"))?;
        let h2 = params.get("head2.w").ok_or_else(|| missing("head2.w"))?;
        let cfg = Self {
            height,
            width,
            channels,
            widths,
            head_hidden: h1.shape()[1],
            out_dim: h2.shape()[1],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        let mut c_in = self.channels;
        for &c in &self.widths {
            n += c * c_in * 9 + c;
            c_in = c;
        }
        n + self.d_e() * self.head_hidden + self.head_hidden + self.head_hidden * self.out_dim + self.out_dim
    }
}

/// `h_v` for a `[B, C, H, W]` batch; `vars` follow [`EncoderConfig::init`].
pub fn encode_graph<T: Real>(tape: &mut Tape<T>, cfg: &EncoderConfig, vars: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..cfg.widths.len() {
        let stride = if i == 0 { STEM_STRIDE } else { 1 };
        h = tape.conv2d(h, vars[2 * i], Some(vars[2 * i + 1]), stride, 1)?;
        h = tape.relu(h);
        h = tape.max_pool2d(h, 2)?;
    }
    Ok(tape.global_mean_pool(h)?)
}

/// Projection head output before normalization.
pub fn head_graph<T: Real>(tape: &mut Tape<T>, cfg: &EncoderConfig, vars: &[Var], h: Var) -> Result<Var> {
    let k = 2 * cfg.widths.len();
    let z = tape.matmul(h, vars[k])?;
    let z = tape.add(z, vars[k + 1])?;
    let z = tape.relu(z);
    let z = tape.matmul(z, vars[k + 2])?;
    Ok(tape.add(z, vars[k + 3])?)
}

/// `encode` then `project`, returning unit-norm rows.
pub fn embed_graph<T: Real>(tape: &mut Tape<T>, cfg: &EncoderConfig, vars: &[Var], x: Var) -> Result<Var> {
    let h = encode_graph(tape, cfg, vars, x)?;
    let z = head_graph(tape, cfg, vars, h)?;
    Ok(tape.l2_normalize(z))
}

/// Encoder parameters together with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let params = config.init(rng)?;
        Ok(Self { config, params })
    }

    pub fn from_params(params: ParamSet, height: usize, width: usize) -> Result<Self> {
        let config = EncoderConfig::from_params(&params, height, width)?;
        Ok(Self { config, params })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        match x.shape() {
            [_, ch, h, w] if *ch == c.channels && *h == c.height && *w == c.width => Ok(()),
            s => Err(CoreError::Data(format!(
                "encoder expects [batch, {}, {}, {}], got {s:?}",
                c.channels, c.height, c.width
            ))),
        }
    }

    /// Representation `h_v` of shape `[batch, d_E]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.params.attach_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let h = encode_graph(&mut tape, &self.config, &vars, xv)?;
        Ok(tape.value(h).clone())
    }

    /// Unit-norm 128-d projection of `h_v`.
    pub fn project(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.attach_frozen(&mut tape);
        let hv = tape.constant(h.clone());
        let z = head_graph(&mut tape, &self.config, &vars, hv)?;
        let raw = tape.value(z);
        for r in 0..raw.rows() {
            let norm = raw.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || norm < 1e-8 {
                return Err(CoreError::Degenerate(format!("projection row {r} has norm {norm:e}")));
            }
        }
        let n = tape.l2_normalize(z);
        Ok(tape.value(n).clone())
    }

    /// Projected embeddings of every image, computed in fixed-size batches.
    pub fn embed_dataset(&self, ds: &ImageDataset) -> Result<Tensor> {
        if ds.is_empty() {
            return Err(CoreError::Data("cannot embed an empty dataset".into()));
        }
        let mut out = Vec::with_capacity(ds.len() * self.config.out_dim);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(256) {
            let x = ds.batch(chunk);
            let z = self.project(&self.encode(&x)?)?;
            out.extend_from_slice(z.data());
        }
        Ok(Tensor::new(&[ds.len(), self.config.out_dim], out)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub scale: (f32, f32),
    pub ratio: (f32, f32),
    pub flip_p: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub grayscale_p: f32,
    pub out_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: (0.5, 1.0),
            ratio: (0.75, 4.0 / 3.0),
            flip_p: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_p: 0.2,
            out_size: 32,
        }
    }
}

impl AugmentConfig {
    /// Full crop, no flip, no jitter, no grayscale.
    pub fn identity(out_size: usize) -> Self {
        Self {
            scale: (1.0, 1.0),
            ratio: (1.0, 1.0),
            flip_p: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_p: 0.0,
            out_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f32| (0.0..=1.0).contains(&p);
        let ok = prob(self.flip_p)
            && prob(self.grayscale_p)
            && 0.0 < self.scale.0
            && self.scale.0 <= self.scale.1
            && self.scale.1 <= 1.0
            && 0.0 < self.ratio.0
            && self.ratio.0 <= self.ratio.1
            && [self.brightness, self.contrast, self.saturation]
                .iter()
                .all(|s| (0.0..1.0).contains(s))
            && self.out_size > 0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid augmentation settings {self:?}")))
        }
    }
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Bilinear resample of the crop `(x0, y0, cw, ch)` of a `[3, h, w]` image
/// to `size x size`, with pixel centers aligned and edges replicated.
fn resize_crop(
    img: &[f32],
    (h, w): (usize, usize),
    (x0, y0, cw, ch): (usize, usize, usize, usize),
    size: usize,
) -> Vec<f32> {
    let mut out = vec![0.0; 3 * size * size];
    let sx = cw as f32 / size as f32;
    let sy = ch as f32 / size as f32;
    for c in 0..3 {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for oy in 0..size {
            let fy = (y0 as f32 + (oy as f32 + 0.5) * sy - 0.5).clamp(y0 as f32, (y0 + ch - 1) as f32);
            let (ya, ty) = (fy.floor() as usize, fy - fy.floor());
            let yb = (ya + 1).min(y0 + ch - 1);
            for ox in 0..size {
                let fx = (x0 as f32 + (ox as f32 + 0.5) * sx - 0.5).clamp(x0 as f32, (x0 + cw - 1) as f32);
                let (xa, tx) = (fx.floor() as usize, fx - fx.floor());
                let xb = (xa + 1).min(x0 + cw - 1);
                let top = plane[ya * w + xa] * (1.0 - tx) + plane[ya * w + xb] * tx;
                let bottom = plane[yb * w + xa] * (1.0 - tx) + plane[yb * w + xb] * tx;
                out[c * size * size + oy * size + ox] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    out
}

/// Plain resize of a whole `[3, h, w]` image.
pub fn resize(img: &[f32], dims: (usize, usize), size: usize) -> Vec<f32> {
    resize_crop(img, dims, (0, 0, dims.1, dims.0), size)
}

fn sample_crop(cfg: &AugmentConfig, (h, w): (usize, usize), rng: &mut Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f32;
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * sample(rng, cfg.scale.0, cfg.scale.1);
        let ratio = sample(rng, lr0, lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let x0 = rng.gen_range(0..=w - cw);
            let y0 = rng.gen_range(0..=h - ch);
            return (x0, y0, cw, ch);
        }
    }
    (0, 0, w, h)
}

fn sample(rng: &mut Rng, lo: f32, hi: f32) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// One augmented view of a `[3, h, w]` image in [0, 1].
pub fn augment_view(img: &[f32], dims: (usize, usize), cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f32> {
    let size = cfg.out_size;
    let crop = sample_crop(cfg, dims, rng);
    let mut out = resize_crop(img, dims, crop, size);
    let hw = size * size;
    if rng.gen::<f32>() < cfg.flip_p {
        for c in 0..3 {
            for row in out[c * hw..(c + 1) * hw].chunks_mut(size) {
                row.reverse();
            }
        }
    }
    if cfg.brightness > 0.0 {
        let f = sample(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
        out.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    if cfg.contrast > 0.0 {
        let f = sample(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
        let mean = (0..hw)
            .map(|p| luminance(out[p], out[hw + p], out[2 * hw + p]))
            .sum::<f32>()
            / hw as f32;
        out.iter_mut()
            .for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
    }
    if cfg.saturation > 0.0 {
        let f = sample(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation);
        for p in 0..hw {
            let g = luminance(out[p], out[hw + p], out[2 * hw + p]);
            for c in 0..3 {
                out[c * hw + p] = ((out[c * hw + p] - g) * f + g).clamp(0.0, 1.0);
            }
        }
    }
    if rng.gen::<f32>() < cfg.grayscale_p {
        for p in 0..hw {
            let g = luminance(out[p], out[hw + p], out[2 * hw + p]).clamp(0.0, 1.0);
            for c in 0..3 {
                out[c * hw + p] = g;
            }
        }
    }
    out
}

/// Two independently augmented views drawn from the same stream.
pub fn augment(img: &[f32], dims: (usize, usize), cfg: &AugmentConfig, rng: &mut Rng) -> (Vec<f32>, Vec<f32>) {
    let a = augment_view(img, dims, cfg, rng);
    let b = augment_view(img, dims, cfg, rng);
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_encoder_is_small() {
        assert!(EncoderConfig::default().n_params() < 500_000);
    }

    #[test]
    fn resize_to_same_size_is_exact() {
        let img: Vec<f32> = (0..3 * 8 * 8).map(|i| (i % 17) as f32 / 16.0).collect();
        assert_eq!(resize(&img, (8, 8), 8), img);
    }
}
