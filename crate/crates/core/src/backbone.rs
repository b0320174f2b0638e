//! Multi-level image features.
//!
//! A small deterministic pyramid stands in for a pretrained vision
//! transformer. Each level pools four per-patch statistics (mean intensity,
//! mean absolute horizontal and vertical differences, intensity variance)
//! over a neighbourhood whose radius grows with the level, then maps them
//! through a frozen seeded projection to `raw_channels` and a `tanh`
//! random-feature nonlinearity. A frozen per-level
//! output projection, optionally adapted with trainable low-rank factors,
//! follows; a learned per-level projection brings channels down to
//! `channels`.
//!
//! Features computed elsewhere can be loaded from `UBEF` files; they enter
//! the pipeline at the same point as [`Backbone::raw_features`].

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::format::{self, ByteReader, ByteWriter, FEATURE_MAGIC, FORMAT_VERSION};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of per-patch statistics feeding the frozen projection.
pub const STATS_PER_PATCH: usize = 4;
const STAT_SCALE: [f64; STATS_PER_PATCH] = [1.0, 4.0, 4.0, 8.0];
const RAW_GAIN: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Feature levels, L.
    pub levels: usize,
    /// Patches per level, P. Must be a perfect square.
    pub patches: usize,
    /// Channels after the learned per-level projection, C.
    pub channels: usize,
    /// Channels produced by the frozen backbone, C_raw.
    pub raw_channels: usize,
    /// Rank of the output-projection adapters; 0 disables them.
    pub adapter_rank: usize,
    /// Canvas pixels per patch side.
    pub patch_pixels: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            levels: 5,
            patches: 64,
            channels: 64,
            raw_channels: 128,
            adapter_rank: 4,
            patch_pixels: 8,
            seed: 0x5eed_0001,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.levels >= 1, Config, "levels must be >= 1");
        ensure!(self.channels >= 1, Config, "channels must be >= 1");
        ensure!(self.raw_channels >= 1, Config, "raw_channels must be >= 1");
        ensure!(self.patch_pixels >= 2, Config, "patch_pixels must be >= 2");
        let g = self.grid();
        ensure!(
            self.patches >= 1 && g * g == self.patches,
            Config,
            "patch count {} is not a perfect square",
            self.patches
        );
        ensure!(
            self.adapter_rank < self.raw_channels,
            Config,
            "adapter rank {} must be below raw channel count {}",
            self.adapter_rank,
            self.raw_channels
        );
        Ok(())
    }

    /// Patches per grid side.
    pub fn grid(&self) -> usize {
        (self.patches as f64).sqrt().round() as usize
    }

    pub fn canvas(&self) -> usize {
        self.grid() * self.patch_pixels
    }

    /// Pooling radius, in patches, for a zero-based level.
    pub fn pooling_radius(&self, level: usize) -> usize {
        level
    }
}

/// Pixel image with values in `[0, 1]`, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        ensure!(height >= 1 && width >= 1, Format, "empty image");
        ensure!(channels >= 1, Format, "image needs at least one channel");
        ensure!(
            data.len() == height * width * channels,
            Format,
            "image buffer of {} for {}x{}x{}",
            data.len(),
            height,
            width,
            channels
        );
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(height, width, 1, data)
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mirrored_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                for c in 0..self.channels {
                    data.push(self.pixel(y, x, c));
                }
            }
        }
        Image { data, ..*self }
    }

    /// Mean over channels.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.channels)
            .map(|px| px.iter().map(|&v| v as f64).sum::<f64>() / self.channels as f64)
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().has_color() {
            let rgb = img.to_rgb8();
            let data = rgb.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
            Image::new(h, w, 3, data)
        } else {
            let g = img.to_luma8();
            let data = g.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
            Image::new(h, w, 1, data)
        }
    }

    /// Writes an 8-bit PNG. Only 1- and 3-channel images are supported.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
        let color = match self.channels {
            1 => image::ColorType::L8,
            3 => image::ColorType::Rgb8,
            c => return Err(Error::Format(format!("cannot write {c}-channel PNG"))),
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        image::save_buffer(path, &bytes, self.width as u32, self.height as u32, color)
            .map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))
    }

    /// Round trip through 8-bit quantization, matching what `save_png` stores.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| (v * 255.0).round() / 255.0).collect();
        Image { data, ..*self }
    }
}

/// Bilinear resampling of a single-channel plane (pixel-centre convention).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Per-patch statistics of a square canvas, `grid² × STATS_PER_PATCH`.
pub fn patch_statistics(canvas: &[f64], grid: usize, patch: usize) -> Vec<[f64; STATS_PER_PATCH]> {
    let side = grid * patch;
    let mut out = Vec::with_capacity(grid * grid);
    for gy in 0..grid {
        for gx in 0..grid {
            let (y0, x0) = (gy * patch, gx * patch);
            let px = |y: usize, x: usize| canvas[(y0 + y) * side + x0 + x];
            let n = (patch * patch) as f64;
            let mut sum = 0.0;
            let mut sq = 0.0;
            let mut dx = 0.0;
            let mut dy = 0.0;
            for y in 0..patch {
                for x in 0..patch {
                    let v = px(y, x);
                    sum += v;
                    sq += v * v;
                    if x + 1 < patch {
                        dx += (px(y, x + 1) - v).abs();
                    }
                    if y + 1 < patch {
                        dy += (px(y + 1, x) - v).abs();
                    }
                }
            }
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            let pairs = (patch * (patch - 1)) as f64;
            let stats = [mean, dx / pairs, dy / pairs, var];
            let mut scaled = [0.0; STATS_PER_PATCH];
            for k in 0..STATS_PER_PATCH {
                scaled[k] = stats[k] * STAT_SCALE[k];
            }
            out.push(scaled);
        }
    }
    out
}

/// Averages patch statistics over the Chebyshev neighbourhood of `radius`.
pub fn pool_statistics(
    stats: &[[f64; STATS_PER_PATCH]],
    grid: usize,
    radius: usize,
) -> Vec<[f64; STATS_PER_PATCH]> {
    let r = radius as isize;
    let g = grid as isize;
    let mut out = Vec::with_capacity(stats.len());
    for gy in 0..g {
        for gx in 0..g {
            let mut acc = [0.0; STATS_PER_PATCH];
            let mut count = 0.0;
            for y in (gy - r).max(0)..=(gy + r).min(g - 1) {
                for x in (gx - r).max(0)..=(gx + r).min(g - 1) {
                    let s = &stats[(y * g + x) as usize];
                    for k in 0..STATS_PER_PATCH {
                        acc[k] += s[k];
                    }
                    count += 1.0;
                }
            }
            for a in &mut acc {
                *a /= count;
            }
            out.push(acc);
        }
    }
    out
}

/// `L × P × C` feature array, level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor<T> {
    pub levels: usize,
    pub patches: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureTensor<T> {
    pub fn new(levels: usize, patches: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        ensure!(
            levels >= 1 && patches >= 1 && channels >= 1,
            Dimension,
            "feature dims must be positive"
        );
        ensure!(
            data.len() == levels * patches * channels,
            Dimension,
            "feature buffer of {} for {}x{}x{}",
            data.len(),
            levels,
            patches,
            channels
        );
        Ok(FeatureTensor { levels, patches, channels, data })
    }

    pub fn from_levels(levels: &[Tensor<T>]) -> Result<Self> {
        ensure!(!levels.is_empty(), Dimension, "no levels");
        let (p, c) = (levels[0].rows(), levels[0].cols());
        ensure!(
            levels.iter().all(|t| t.rows() == p && t.cols() == c),
            Dimension,
            "levels differ in shape"
        );
        let data = levels.iter().flat_map(|t| t.data().iter().copied()).collect();
        Self::new(levels.len(), p, c, data)
    }

    pub fn level_slice(&self, level: usize) -> &[T] {
        let n = self.patches * self.channels;
        &self.data[level * n..(level + 1) * n]
    }

    /// Copy of one level as a `P × C` matrix.
    pub fn level(&self, level: usize) -> Tensor<T> {
        Tensor::matrix(self.patches, self.channels, self.level_slice(level).to_vec())
            .expect("consistent dims")
    }

    pub fn levels_vec(&self) -> Vec<Tensor<T>> {
        (0..self.levels).map(|l| self.level(l)).collect()
    }

    pub fn get(&self, level: usize, patch: usize, channel: usize) -> T {
        self.data[(level * self.patches + patch) * self.channels + channel]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureTensor<U> {
        FeatureTensor {
            levels: self.levels,
            patches: self.patches,
            channels: self.channels,
            data: self.data.iter().map(|&x| U::lit(x.to_f64_lossy())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(FEATURE_MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.levels as u32);
        w.u32(self.patches as u32);
        w.u32(self.channels as u32);
        w.f32s(&self.data);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "feature file");
        r.magic(FEATURE_MAGIC)?;
        r.version()?;
        let dims = [r.u32()?, r.u32()?, r.u32()?];
        let n = format::checked_count(&dims, "feature file")?;
        let data = r.f32s(n)?;
        Self::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_file(path, &self.to_bytes())
    }
}

pub fn load_features<T: Scalar>(path: &Path) -> Result<FeatureTensor<T>> {
    FeatureTensor::from_bytes(&format::read_file(path)?)
}

/// Trainable low-rank update `A·B` of one level's output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter<T> {
    /// `raw_channels × rank`
    pub a: Tensor<T>,
    /// `rank × raw_channels`
    pub b: Tensor<T>,
    /// Zero-based level whose output projection is adapted.
    pub level: usize,
}

impl<T: Scalar> LowRankAdapter<T> {
    pub fn zeros(dim: usize, rank: usize, level: usize) -> Self {
        LowRankAdapter { a: Tensor::zeros(&[dim, rank]), b: Tensor::zeros(&[rank, dim]), level }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

/// `W + A·B`.
pub fn apply_adapter<T: Scalar>(w: &Tensor<T>, adapter: &LowRankAdapter<T>) -> Result<Tensor<T>> {
    let (rows, cols) = (w.rows(), w.cols());
    let r = adapter.rank();
    ensure!(
        r <= rows.min(cols),
        Config,
        "adapter rank {} exceeds matrix dimension {}",
        r,
        rows.min(cols)
    );
    ensure!(
        adapter.a.rows() == rows && adapter.b.rows() == r && adapter.b.cols() == cols,
        Dimension,
        "adapter {:?}·{:?} does not fit {:?}",
        adapter.a.shape(),
        adapter.b.shape(),
        w.shape()
    );
    w.add(&adapter.a.matmul(&adapter.b)?)
}

/// Independent linear map per level: `raw[ℓ] · weights[ℓ]`.
pub fn project_levels<T: Scalar>(
    raw: &FeatureTensor<T>,
    weights: &[Tensor<T>],
) -> Result<FeatureTensor<T>> {
    ensure!(
        weights.len() == raw.levels,
        Config,
        "{} projection matrices for {} levels",
        weights.len(),
        raw.levels
    );
    let levels = (0..raw.levels)
        .map(|l| raw.level(l).matmul(&weights[l]))
        .collect::<Result<Vec<_>>>()?;
    FeatureTensor::from_levels(&levels)
}

/// Seeded stream for a named frozen component.

pub(crate) fn component_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

/// Frozen part of the feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    /// Per level, `STATS_PER_PATCH × raw_channels`.
    stat_projections: Vec<Tensor<T>>,
    /// Per level, `raw_channels × raw_channels`; the adapted matrices.
    output_projections: Vec<Tensor<T>>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let cr = config.raw_channels;
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut stat_projections = Vec::new();
        let mut output_projections = Vec::new();
        for l in 0..config.levels {
            let mut rng = component_rng(config.seed, 1, l as u64);
            stat_projections.push(Tensor::from_fn(STATS_PER_PATCH, cr, |_, _| {
                T::lit(unit.sample(&mut rng))
            }));
            let mut rng = component_rng(config.seed, 2, l as u64);
            let s = 0.5 / (cr as f64).sqrt();
            output_projections.push(Tensor::from_fn(cr, cr, |i, j| {
                let d = if i == j { 1.0 } else { 0.0 };
                T::lit(d + s * unit.sample(&mut rng))
            }));
        }
        Ok(Backbone { config, stat_projections, output_projections })
    }

    pub fn output_projection(&self, level: usize) -> &Tensor<T> {
        &self.output_projections[level]
    }

    /// Frozen pyramid features, `L × P × raw_channels`.
    pub fn raw_features(&self, image: &Image) -> Result<FeatureTensor<T>> {
        ensure!(
            image.channels == 1 || image.channels == 3,
            Format,
            "images must have 1 or 3 channels, got {}",
            image.channels
        );
        ensure!(!image.data.is_empty(), Format, "empty image");
        let cfg = &self.config;
        let side = cfg.canvas();
        let canvas = resize_bilinear(&image.luminance(), image.height, image.width, side, side);
        let stats = patch_statistics(&canvas, cfg.grid(), cfg.patch_pixels);
        let cr = cfg.raw_channels;
        let mut data = Vec::with_capacity(cfg.levels * cfg.patches * cr);
        for l in 0..cfg.levels {
            let pooled = pool_statistics(&stats, cfg.grid(), cfg.pooling_radius(l));
            let proj = &self.stat_projections[l];
            for s in &pooled {
                for c in 0..cr {
                    let mut acc = T::zero();
                    for (k, &sv) in s.iter().enumerate() {
                        acc = acc + T::lit(sv) * proj.get(k, c);
                    }
                    data.push((T::lit(RAW_GAIN) * acc).tanh());
                }
            }
        }
        FeatureTensor::new(cfg.levels, cfg.patches, cr, data)
    }

    /// Output projection per level, adapted when adapters are given.
    pub fn effective_output_projections(
        &self,
        adapters: Option<&[LowRankAdapter<T>]>,
    ) -> Result<Vec<Tensor<T>>> {
        match adapters {
            None => Ok(self.output_projections.clone()),
            Some(ad) => {
                ensure!(
                    ad.len() == self.config.levels,
                    Config,
                    "{} adapters for {} levels",
                    ad.len(),
                    self.config.levels
                );
                ad.iter()
                    .map(|a| apply_adapter(&self.output_projections[a.level], a))
                    .collect()
            }
        }
    }

    /// Backbone output after the (adapted) output projection, still `raw_channels` wide.
    pub fn output_features(
        &self,
        raw: &FeatureTensor<T>,
        adapters: Option<&[LowRankAdapter<T>]>,
    ) -> Result<FeatureTensor<T>> {
        self.check_raw(raw)?;
        project_levels(raw, &self.effective_output_projections(adapters)?)
    }

    pub fn check_raw(&self, raw: &FeatureTensor<T>) -> Result<()> {
        let cfg = &self.config;
        ensure!(
            raw.levels == cfg.levels && raw.patches == cfg.patches && raw.channels == cfg.raw_channels,
            Dimension,
            "raw features {}x{}x{} do not match backbone {}x{}x{}",
            raw.levels,
            raw.patches,
            raw.channels,
            cfg.levels,
            cfg.patches,
            cfg.raw_channels
        );
        Ok(())
    }

    /// Full extraction: pyramid, adapted output projection, learned per-level projection to `channels`.
    pub fn extract_features(
        &self,
        image: &Image,
        adapters: Option<&[LowRankAdapter<T>]>,
        level_projections: &[Tensor<T>],
    ) -> Result<FeatureTensor<T>> {
        let raw = self.raw_features(image)?;
        let out = self.output_features(&raw, adapters)?;
        project_levels(&out, level_projections)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            levels: 3,
            patches: 16,
            channels: 6,
            raw_channels: 8,
            adapter_rank: 2,
            patch_pixels: 4,
            seed: 11,
        }
    }

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig { patches: 10, ..small_config() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = BackboneConfig { adapter_rank: 8, ..small_config() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_gives_uniform_zero_features() {
        let bb = Backbone::<f64>::new(small_config()).unwrap();
        let img = Image::gray(16, 16, vec![0.0; 256]).unwrap();
        let raw = bb.raw_features(&img).unwrap();
        assert!(raw.data.iter().all(|&x| x == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj: Vec<_> = (0..3).map(|_| random_tensor(&mut rng, 8, 6)).collect();
        let f = bb.extract_features(&img, None, &proj).unwrap();
        assert!(f.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn extraction_is_deterministic() {
        let bb = Backbone::<f64>::new(small_config()).unwrap();
        let bb2 = Backbone::<f64>::new(small_config()).unwrap();
        let img = random_image(3, 20, 24, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj: Vec<_> = (0..3).map(|_| random_tensor(&mut rng, 8, 6)).collect();
        let a = bb.extract_features(&img, None, &proj).unwrap();
        let b = bb2.extract_features(&img, None, &proj).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mirrored_image_mirrors_patch_grid() {
        let cfg = small_config();
        let bb = Backbone::<f64>::new(cfg.clone()).unwrap();
        let img = random_image(5, 16, 16, 1);
        let f = bb.output_features(&bb.raw_features(&img).unwrap(), None).unwrap();
        let m = bb
            .output_features(&bb.raw_features(&img.mirrored_horizontal()).unwrap(), None)
            .unwrap();
        let g = cfg.grid();
        for level in 0..cfg.levels {
            for gy in 0..g {
                for gx in 0..g {
                    let p = gy * g + gx;
                    let q = gy * g + (g - 1 - gx);
                    for c in 0..cfg.raw_channels {
                        let d = (f.get(level, p, c) - m.get(level, q, c)).abs();
                        assert!(d < 1e-12, "level {level} patch {p} channel {c}: {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn resize_to_other_canvas_works() {
        let bb = Backbone::<f64>::new(small_config()).unwrap();
        let raw = bb.raw_features(&random_image(1, 37, 23, 3)).unwrap();
        assert_eq!((raw.levels, raw.patches, raw.channels), (3, 16, 8));
        assert!(raw.is_finite());
    }

    #[test]
    fn bad_channel_count_is_format_error() {
        let bb = Backbone::<f64>::new(small_config()).unwrap();
        let img = Image::new(4, 4, 2, vec![0.5; 32]).unwrap();
        assert!(matches!(bb.raw_features(&img), Err(Error::Format(_))));
    }

    #[test]
    fn adapter_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_tensor(&mut rng, 5, 5);
        let mut zero = LowRankAdapter::zeros(5, 2, 0);
        zero.b = random_tensor(&mut rng, 2, 5);
        assert_eq!(apply_adapter(&w, &zero).unwrap(), w);

        let mut unit = LowRankAdapter::zeros(5, 1, 0);
        unit.a.set(0, 0, 1.0);
        unit.b.set(0, 0, 1.0);
        let bumped = apply_adapter(&w, &unit).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = w.get(i, j) + if i == 0 && j == 0 { 1.0 } else { 0.0 };
                assert_eq!(bumped.get(i, j), want);
            }
        }

        let ad = LowRankAdapter { a: random_tensor(&mut rng, 5, 3), b: random_tensor(&mut rng, 3, 5), level: 0 };
        let got = apply_adapter(&w, &ad).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut s = w.get(i, j);
                for k in 0..3 {
                    s += ad.a.get(i, k) * ad.b.get(k, j);
                }
                assert!((got.get(i, j) - s).abs() < 1e-12);
            }
        }

        let too_big = LowRankAdapter::<f64>::zeros(5, 6, 0);
        assert!(matches!(apply_adapter(&w, &too_big), Err(Error::Config(_))));
    }

    #[test]
    fn project_levels_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw = FeatureTensor::new(2, 3, 4, data).unwrap();
        let id = vec![Tensor::identity(4), Tensor::identity(4)];
        assert_eq!(project_levels(&raw, &id).unwrap(), raw);
        let zero = vec![Tensor::zeros(&[4, 2]), Tensor::zeros(&[4, 2])];
        assert!(project_levels(&raw, &zero).unwrap().data.iter().all(|&x| x == 0.0));
        let w: Vec<_> = (0..2).map(|_| random_tensor(&mut rng, 4, 2)).collect();
        let got = project_levels(&raw, &w).unwrap();
        for l in 0..2 {
            for p in 0..3 {
                for c in 0..2 {
                    let mut s = 0.0;
                    for k in 0..4 {
                        s += raw.get(l, p, k) * w[l].get(k, c);
                    }
                    assert!((got.get(l, p, c) - s).abs() < 1e-12);
                }
            }
        }
        assert!(matches!(project_levels(&raw, &w[..1]), Err(Error::Config(_))));
    }

    #[test]
    fn feature_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ubef");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f32> = (0..2 * 4 * 3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let f = FeatureTensor::new(2, 4, 3, data).unwrap();
        f.save(&path).unwrap();
        let back: FeatureTensor<f32> = load_features(&path).unwrap();
        assert_eq!(back, f);

        let mut bytes = f.to_bytes();
        bytes[1] = b'X';
        assert!(matches!(FeatureTensor::<f32>::from_bytes(&bytes), Err(Error::Format(_))));

        let mut bytes = f.to_bytes();
        bytes[8..12].copy_from_slice(&100u32.to_le_bytes());
        assert!(matches!(FeatureTensor::<f32>::from_bytes(&bytes), Err(Error::Truncated(_))));

        let mut bytes = f.to_bytes();
        for k in 0..3 {
            bytes[8 + 4 * k..12 + 4 * k].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(FeatureTensor::<f32>::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn png_round_trip_matches_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(9, 7, 5, 3);
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = Image::load(&path).unwrap();
        assert_eq!(back, img.quantized());
    }
}
