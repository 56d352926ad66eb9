//! Procedural bi-temporal scenes with exact 2D and 3D change labels.
//!
//! A tile is a gently sloped ground plane with non-overlapping rectangular
//! buildings. Between epochs some buildings are demolished and some new
//! ones appear on free ground. Every elevation is a multiple of 1/1024 m,
//! so `DSM_T2 − DSM_T1 = ΔH` holds exactly in both f32 and f64.

use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::tensor::Tensor;

/// Elevation quantum in meters.
pub const HEIGHT_QUANTUM: f64 = 1.0 / 1024.0;

pub const LABEL_NEW: usize = 1;
pub const LABEL_DEMOLISHED: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneConfig {
    pub tile_size: usize,
    pub seed: u64,
    pub tiles: usize,
    /// Inclusive range of pre-event buildings per tile.
    pub buildings: (usize, usize),
    /// Inclusive range of building side lengths in pixels.
    pub building_size: (usize, usize),
    pub height_range: (f64, f64),
    /// Number of candidate sites for new buildings per tile.
    pub new_sites: usize,
    pub p_new: f64,
    pub p_demolish: f64,
    pub image_noise: f64,
    pub prior_gamma: f64,
    /// In normalized prior units. Ground relief spans only a few hundredths
    /// of that range, so noise much above 1e-3 scrambles its ordering.
    pub prior_noise: f64,
    /// 2 (changed / unchanged) or 3 (unchanged / new / demolished).
    pub num_classes: usize,
    /// Fractions of tiles assigned to train / val / test, in tile order.
    pub splits: [f64; 3],
    pub resolution: f64,
    /// Placement attempts per building before giving up.
    pub retry_budget: usize,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            tile_size: 64,
            seed: 42,
            tiles: 250,
            buildings: (2, 4),
            building_size: (8, 16),
            height_range: (3.0, 30.0),
            new_sites: 2,
            p_new: 0.4,
            p_demolish: 0.3,
            image_noise: 0.02,
            prior_gamma: 0.8,
            prior_noise: 0.001,
            num_classes: 3,
            splits: [0.7, 0.1, 0.2],
            resolution: 0.5,
            retry_budget: 200,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(32) {
            return bad(format!("tile size {} must be a positive multiple of 32", self.tile_size));
        }
        for (name, p) in [("p_new", self.p_new), ("p_demolish", self.p_demolish)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.buildings.0 > self.buildings.1 {
            return bad("building count range is empty".into());
        }
        let (lo, hi) = self.building_size;
        if lo == 0 || lo > hi || hi > self.tile_size {
            return bad(format!("building size range {lo}..={hi} invalid for tile {}", self.tile_size));
        }
        let (hlo, hhi) = self.height_range;
        if !(hlo > 0.0 && hlo <= hhi && hhi.is_finite()) {
            return bad(format!("height range {hlo}..{hhi} invalid"));
        }
        if self.image_noise < 0.0 || self.prior_noise < 0.0 || self.prior_gamma <= 0.0 {
            return bad("noise levels must be nonnegative and gamma positive".into());
        }
        if !(2..=3).contains(&self.num_classes) {
            return bad(format!("num_classes must be 2 or 3, got {}", self.num_classes));
        }
        if self.splits.iter().any(|f| *f < 0.0) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {:?} must be nonnegative and sum to 1", self.splits));
        }
        Ok(())
    }

    /// Overrides the fields present in `kv`; other keys are ignored.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        let pair = |key: &str| -> Result<Option<(f64, f64)>> {
            match kv.list::<f64>(key)? {
                None => Ok(None),
                Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
                Some(v) => Err(Error::config(format!("{key} needs 2 values, got {}", v.len()))),
            }
        };
        let upair = |key: &str| -> Result<Option<(usize, usize)>> {
            match kv.list::<usize>(key)? {
                None => Ok(None),
                Some(v) if v.len() == 2 => Ok(Some((v[0], v[1]))),
                Some(v) => Err(Error::config(format!("{key} needs 2 values, got {}", v.len()))),
            }
        };
        macro_rules! scalar {
            ($($key:literal => $field:ident),* $(,)?) => {
                $(if let Some(v) = kv.parse($key)? {
                    self.$field = v;
                })*
            };
        }
        scalar!(
            "tile_size" => tile_size,
            "seed" => seed,
            "tiles" => tiles,
            "new_sites" => new_sites,
            "p_new" => p_new,
            "p_demolish" => p_demolish,
            "image_noise" => image_noise,
            "prior_gamma" => prior_gamma,
            "prior_noise" => prior_noise,
            "num_classes" => num_classes,
            "resolution" => resolution,
            "retry_budget" => retry_budget,
        );
        if let Some(v) = upair("buildings")? {
            self.buildings = v;
        }
        if let Some(v) = upair("building_size")? {
            self.building_size = v;
        }
        if let Some(v) = pair("height_range")? {
            self.height_range = v;
        }
        if let Some(v) = kv.list::<f64>("splits")? {
            self.splits = v
                .try_into()
                .map_err(|v: Vec<f64>| Error::config(format!("splits needs 3 values, got {}", v.len())))?;
        }
        self.validate()
    }

    /// `(train, val, test)` tile counts; test absorbs rounding.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.tiles;
        let train = ((self.splits[0] * n as f64).round() as usize).min(n);
        let val = ((self.splits[1] * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    row: usize,
    col: usize,
    h: usize,
    w: usize,
}

impl Rect {
    /// Overlap test with a one-pixel gap required between boxes.
    fn touches(&self, o: &Rect) -> bool {
        self.row < o.row + o.h + 1 && o.row < self.row + self.h + 1 && self.col < o.col + o.w + 1 && o.col < self.col + self.w + 1
    }

    fn cells(&self, width: usize) -> impl Iterator<Item = usize> + '_ {
        (self.row..self.row + self.h).flat_map(move |i| (self.col..self.col + self.w).map(move |j| i * width + j))
    }
}

/// One generated sample. Single-channel rasters are `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTile {
    pub index: usize,
    pub dsm_t1: Tensor,
    pub dsm_t2: Tensor,
    pub delta_h: Tensor,
    /// `[3, H, W]` in `[0, 1]`.
    pub img_t2: Tensor,
    pub depth_prior: Tensor,
    pub labels: Vec<usize>,
}

fn quantize(v: f64) -> f64 {
    (v / HEIGHT_QUANTUM).round() * HEIGHT_QUANTUM
}

fn place(rng: &mut Prng, cfg: &SyntheticSceneConfig, taken: &[Rect]) -> Result<Rect> {
    let n = cfg.tile_size;
    let (lo, hi) = cfg.building_size;
    for _ in 0..cfg.retry_budget {
        let h = rng.range(lo, hi);
        let w = rng.range(lo, hi);
        let r = Rect {
            row: rng.range(0, n - h),
            col: rng.range(0, n - w),
            h,
            w,
        };
        if !taken.iter().any(|t| t.touches(&r)) {
            return Ok(r);
        }
    }
    Err(Error::Generation(format!(
        "no free site for a building after {} attempts ({} already placed)",
        cfg.retry_budget,
        taken.len()
    )))
}

/// Albedo of bare soil left after demolition.
const SOIL: [f64; 3] = [0.55, 0.45, 0.33];
const ROOFS: [[f64; 3]; 4] = [[0.75, 0.74, 0.72], [0.62, 0.30, 0.25], [0.45, 0.50, 0.58], [0.85, 0.80, 0.62]];

/// Lambertian shading factor of a surface, 1 on flat ground.
fn hillshade(dsm: &[f64], n: usize, resolution: f64) -> Vec<f64> {
    let (lx, ly, lz) = {
        let (x, y, z) = (-1.0f64, -1.0f64, 1.5f64);
        let s = (x * x + y * y + z * z).sqrt();
        (x / s, y / s, z / s)
    };
    let at = |i: isize, j: isize| dsm[(i.clamp(0, n as isize - 1) as usize) * n + j.clamp(0, n as isize - 1) as usize];
    let mut out = vec![0.0; n * n];
    for i in 0..n as isize {
        for j in 0..n as isize {
            let dzdx = (at(i, j + 1) - at(i, j - 1)) / (2.0 * resolution);
            let dzdy = (at(i + 1, j) - at(i - 1, j)) / (2.0 * resolution);
            let norm = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
            let dot = (-dzdx * lx - dzdy * ly + lz) / norm;
            out[i as usize * n + j as usize] = (dot / lz).clamp(0.3, 1.3);
        }
    }
    out
}

/// Monotone relative-depth stand-in: per-tile normalized `dsm` raised to
/// `gamma`, plus Gaussian noise, rounded through f32.
pub fn depth_proxy(dsm: &Tensor, gamma: f64, noise: f64, rng: &mut Prng) -> Tensor {
    let (lo, hi) = dsm.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = hi - lo;
    let data = dsm
        .data()
        .iter()
        .map(|&v| {
            let base = if range > 0.0 { ((v - lo) / range).powf(gamma) } else { 0.0 };
            (base + rng.normal() * noise) as f32 as f64
        })
        .collect();
    Tensor::from_parts(dsm.shape().to_vec(), data)
}

/// Generates tile `index` of the scene set from its own PRNG stream.
pub fn gen_tile(cfg: &SyntheticSceneConfig, index: usize) -> Result<SyntheticTile> {
    cfg.validate()?;
    let n = cfg.tile_size;
    let mut rng = Prng::stream(cfg.seed, index as u64);

    let base = rng.uniform(0.0, 2.0);
    let (gx, gy) = (rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02));
    let ground: Vec<f64> = (0..n * n)
        .map(|p| quantize(base + gx * (p % n) as f64 + gy * (p / n) as f64))
        .collect();

    let count = rng.range(cfg.buildings.0, cfg.buildings.1);
    let mut boxes: Vec<Rect> = Vec::with_capacity(count + cfg.new_sites);
    let mut heights = Vec::new();
    let mut roofs = Vec::new();
    for _ in 0..count {
        boxes.push(place(&mut rng, cfg, &boxes)?);
        heights.push(quantize(rng.uniform(cfg.height_range.0, cfg.height_range.1)));
        roofs.push(rng.range(0, ROOFS.len() - 1));
    }
    let demolished: Vec<bool> = (0..count).map(|_| rng.bernoulli(cfg.p_demolish)).collect();
    let mut new_boxes = Vec::new();
    for _ in 0..cfg.new_sites {
        if rng.bernoulli(cfg.p_new) {
            let r = place(&mut rng, cfg, &boxes)?;
            boxes.push(r);
            new_boxes.push((r, quantize(rng.uniform(cfg.height_range.0, cfg.height_range.1)), rng.range(0, ROOFS.len() - 1)));
        }
    }

    let demolition_label = if cfg.num_classes == 3 { LABEL_DEMOLISHED } else { 1 };
    let mut t1 = ground.clone();
    let mut t2 = ground.clone();
    let mut labels = vec![0usize; n * n];
    let mut albedo: Vec<[f64; 3]> = {
        let jitter = rng.uniform(-0.05, 0.05);
        vec![[0.30 + jitter, 0.42 + jitter, 0.25 + jitter]; n * n]
    };
    for k in 0..count {
        for p in boxes[k].cells(n) {
            t1[p] = ground[p] + heights[k];
            if demolished[k] {
                labels[p] = demolition_label;
                albedo[p] = SOIL;
            } else {
                t2[p] = t1[p];
                albedo[p] = ROOFS[roofs[k]];
            }
        }
    }
    for (r, h, roof) in &new_boxes {
        for p in r.cells(n) {
            t2[p] = ground[p] + h;
            labels[p] = LABEL_NEW;
            albedo[p] = ROOFS[*roof];
        }
    }
    let delta: Vec<f64> = t2.iter().zip(&t1).map(|(b, a)| b - a).collect();

    let shade = hillshade(&t2, n, cfg.resolution);
    let mut img = vec![0.0; 3 * n * n];
    for c in 0..3 {
        for p in 0..n * n {
            let v = albedo[p][c] * shade[p] + rng.normal() * cfg.image_noise;
            img[c * n * n + p] = v.clamp(0.0, 1.0) as f32 as f64;
        }
    }

    let dsm_t2 = Tensor::new(&[1, n, n], t2)?;
    let depth_prior = depth_proxy(&dsm_t2, cfg.prior_gamma, cfg.prior_noise, &mut rng);
    Ok(SyntheticTile {
        index,
        dsm_t1: Tensor::new(&[1, n, n], t1)?,
        dsm_t2,
        delta_h: Tensor::new(&[1, n, n], delta)?,
        img_t2: Tensor::new(&[3, n, n], img)?,
        depth_prior,
        labels,
    })
}

pub fn gen_synthetic(cfg: &SyntheticSceneConfig) -> Result<Vec<SyntheticTile>> {
    (0..cfg.tiles).map(|i| gen_tile(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_cover_all_tiles() {
        let cfg = SyntheticSceneConfig::default();
        assert_eq!(cfg.split_counts(), (175, 25, 50));
        let cfg = SyntheticSceneConfig {
            tiles: 250,
            splits: [0.8, 0.0, 0.2],
            ..Default::default()
        };
        assert_eq!(cfg.split_counts(), (200, 0, 50));
    }

    #[test]
    fn crowded_tile_is_a_generation_error() {
        let cfg = SyntheticSceneConfig {
            tile_size: 32,
            buildings: (20, 20),
            building_size: (12, 12),
            ..Default::default()
        };
        assert!(matches!(gen_tile(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = SyntheticSceneConfig {
            tile_size: 48,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SyntheticSceneConfig {
            p_new: 1.5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn flat_ground_is_unshaded() {
        let s = hillshade(&[2.0; 16], 4, 0.5);
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
