//! Sample manifests, raster quadruple I/O, tiling and depth-prior ingestion.
//!
//! A manifest is a tab-separated file with the header
//! `id split resolution dsm_t1 img_t2 depth_prior label_2d delta_h`.
//! Raster paths are relative to the manifest's directory. External datasets
//! enter through the same path: convert each scene to `DPGR` rasters and
//! list them in a manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::Targets;
use crate::model::ModelInput;
use crate::prng::Prng;
use crate::raster::RasterFile;
use crate::synthetic::{depth_proxy, gen_tile, SyntheticSceneConfig, SyntheticTile};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "id\tsplit\tresolution\tdsm_t1\timg_t2\tdepth_prior\tlabel_2d\tdelta_h";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::data(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Meters per pixel.
    pub resolution: f64,
    pub dsm_t1: PathBuf,
    pub img_t2: PathBuf,
    pub depth_prior: PathBuf,
    pub label_2d: PathBuf,
    pub delta_h: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory that relative raster paths resolve against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim_end() == MANIFEST_HEADER => {}
            other => return Err(Error::data(format!("manifest header mismatch: {other:?}"))),
        }
        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.trim_end().split('\t').collect();
            if f.len() != 8 {
                return Err(Error::data(format!("manifest row {}: {} fields, expected 8", n + 1, f.len())));
            }
            let resolution = f[2]
                .parse::<f64>()
                .map_err(|_| Error::data(format!("manifest row {}: bad resolution {:?}", n + 1, f[2])))?;
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                split: f[1].parse()?,
                resolution,
                dsm_t1: f[3].into(),
                img_t2: f[4].into(),
                depth_prior: f[5].into(),
                label_2d: f[6].into(),
                delta_h: f[7].into(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&std::fs::read_to_string(path)?, &root)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.split,
                e.resolution,
                e.dsm_t1.display(),
                e.img_t2.display(),
                e.depth_prior.display(),
                e.label_2d.display(),
                e.delta_h.display()
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// The five rasters of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRasters {
    pub dsm_t1: RasterFile,
    pub img_t2: RasterFile,
    pub depth_prior: RasterFile,
    pub label_2d: RasterFile,
    pub delta_h: RasterFile,
}

impl SampleRasters {
    pub fn from_tile(t: &SyntheticTile) -> Result<Self> {
        let (_, h, w) = t.dsm_t1.dims3()?;
        Ok(Self {
            dsm_t1: RasterFile::from_tensor(&t.dsm_t1)?,
            img_t2: RasterFile::from_tensor(&t.img_t2)?,
            depth_prior: RasterFile::from_tensor(&t.depth_prior)?,
            label_2d: RasterFile::from_labels(&t.labels, h, w)?,
            delta_h: RasterFile::from_tensor(&t.delta_h)?,
        })
    }

    fn all(&self) -> [&RasterFile; 5] {
        [&self.dsm_t1, &self.img_t2, &self.depth_prior, &self.label_2d, &self.delta_h]
    }

    /// Common `(H, W)`, or a data error if the rasters disagree.
    pub fn extent(&self) -> Result<(usize, usize)> {
        let (_, h, w) = self.dsm_t1.dims();
        for r in self.all() {
            let (_, rh, rw) = r.dims();
            if (rh, rw) != (h, w) {
                return Err(Error::data(format!("sample rasters disagree in extent: {h}x{w} vs {rh}x{rw}")));
            }
        }
        Ok((h, w))
    }

    /// Writes `{id}_{role}.dpgr` files into `dir` and returns the manifest
    /// row with paths relative to `dir`.
    pub fn write(&self, dir: &Path, id: &str, split: Split, resolution: f64) -> Result<ManifestEntry> {
        self.extent()?;
        let name = |role: &str| PathBuf::from(format!("{id}_{role}.dpgr"));
        let entry = ManifestEntry {
            id: id.to_string(),
            split,
            resolution,
            dsm_t1: name("dsm_t1"),
            img_t2: name("img_t2"),
            depth_prior: name("depth_prior"),
            label_2d: name("label_2d"),
            delta_h: name("delta_h"),
        };
        self.dsm_t1.write(&dir.join(&entry.dsm_t1))?;
        self.img_t2.write(&dir.join(&entry.img_t2))?;
        self.depth_prior.write(&dir.join(&entry.depth_prior))?;
        self.label_2d.write(&dir.join(&entry.label_2d))?;
        self.delta_h.write(&dir.join(&entry.delta_h))?;
        Ok(entry)
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            dsm_t1: self.dsm_t1.crop(row, col, h, w)?,
            img_t2: self.img_t2.crop(row, col, h, w)?,
            depth_prior: self.depth_prior.crop(row, col, h, w)?,
            label_2d: self.label_2d.crop(row, col, h, w)?,
            delta_h: self.delta_h.crop(row, col, h, w)?,
        })
    }
}

/// What to do when a sample's depth prior file is missing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorFallback {
    None,
    /// Build the monotone proxy from `DSM_T1 + ΔH` with this gamma and noise.
    Proxy { gamma: f64, noise: f64, seed: u64 },
}

/// Loads a single-channel relative-depth raster. When the file is absent,
/// `fallback` supplies a substitute or the call fails with a data error.
pub fn ingest_depth_prior(path: &Path, fallback: Option<&dyn Fn() -> Result<Tensor>>) -> Result<Tensor> {
    if path.exists() {
        let r = RasterFile::read(path)?;
        if r.channels != 1 {
            return Err(Error::data(format!("depth prior {} has {} channels", path.display(), r.channels)));
        }
        return Ok(r.to_tensor());
    }
    match fallback {
        Some(f) => f(),
        None => Err(Error::data(format!("depth prior {} not found and no fallback configured", path.display()))),
    }
}

/// A loaded sample ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: ModelInput,
    pub targets: Targets,
}

fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl Sample {
    /// In-memory equivalent of writing `t` to disk and loading it back.
    pub fn from_tile(t: &SyntheticTile) -> Result<Self> {
        Ok(Self {
            id: format!("tile{:05}", t.index),
            input: ModelInput {
                dsm_t1: t.dsm_t1.clone(),
                img_t2: t.img_t2.clone(),
                depth_prior: t.depth_prior.clone(),
            },
            targets: Targets::new(t.labels.clone(), &t.dsm_t1, t.delta_h.clone())?,
        })
    }
}

pub fn load_sample(m: &Manifest, e: &ManifestEntry, num_classes: usize, fallback: PriorFallback) -> Result<Sample> {
    let dsm_t1 = RasterFile::read(&m.resolve(&e.dsm_t1))?;
    let img_t2 = RasterFile::read(&m.resolve(&e.img_t2))?;
    let label = RasterFile::read(&m.resolve(&e.label_2d))?;
    let delta = RasterFile::read(&m.resolve(&e.delta_h))?;
    let (_, h, w) = dsm_t1.dims();
    for (name, r) in [("img_t2", &img_t2), ("label_2d", &label), ("delta_h", &delta)] {
        let (_, rh, rw) = r.dims();
        if (rh, rw) != (h, w) {
            return Err(Error::data(format!("{}: {name} is {rh}x{rw}, dsm_t1 is {h}x{w}", e.id)));
        }
    }
    let labels = label.to_labels()?;
    if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::data(format!("{}: label {bad} >= {num_classes} classes", e.id)));
    }
    let dsm_t1 = dsm_t1.to_tensor();
    let delta_h = delta.to_tensor();
    let proxy = |gamma: f64, noise: f64, seed: u64| -> Result<Tensor> {
        let t2 = crate::loss::derive_dsm_gt(&dsm_t1, &delta_h)?;
        Ok(depth_proxy(&t2, gamma, noise, &mut Prng::stream(seed, stable_hash(&e.id))))
    };
    let fb = move || match fallback {
        PriorFallback::Proxy { gamma, noise, seed } => proxy(gamma, noise, seed),
        PriorFallback::None => Err(Error::data("no depth prior fallback")),
    };
    let fb_ref: Option<&dyn Fn() -> Result<Tensor>> = match fallback {
        PriorFallback::None => None,
        PriorFallback::Proxy { .. } => Some(&fb),
    };
    let depth_prior = ingest_depth_prior(&m.resolve(&e.depth_prior), fb_ref)?;
    if depth_prior.shape() != [1, h, w] {
        return Err(Error::data(format!("{}: depth prior shape {:?}", e.id, depth_prior.shape())));
    }
    let targets = Targets::new(labels, &dsm_t1, delta_h)?;
    Ok(Sample {
        id: e.id.clone(),
        input: ModelInput {
            dsm_t1,
            img_t2: img_t2.to_tensor(),
            depth_prior,
        },
        targets,
    })
}

pub fn load_split(m: &Manifest, split: Split, num_classes: usize, fallback: PriorFallback) -> Result<Vec<Sample>> {
    m.split(split).into_iter().map(|e| load_sample(m, e, num_classes, fallback)).collect()
}

/// Generates the synthetic set into `out_dir` and writes `manifest.tsv`.
pub fn write_synthetic(cfg: &SyntheticSceneConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (train, val, _) = cfg.split_counts();
    let mut entries = Vec::with_capacity(cfg.tiles);
    for i in 0..cfg.tiles {
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        let tile = gen_tile(cfg, i)?;
        let id = format!("tile{i:05}");
        entries.push(SampleRasters::from_tile(&tile)?.write(out_dir, &id, split, cfg.resolution)?);
    }
    let m = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    m.save(&out_dir.join("manifest.tsv"))?;
    Ok(m)
}

/// Origins of a row-major grid of `size × size` windows at `stride`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub origins: Vec<(usize, usize)>,
    /// Pixels past the last full window, per axis.
    pub remainder: (usize, usize),
}

pub fn tile_grid(height: usize, width: usize, size: usize, stride: usize) -> Result<TileGrid> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::config(format!("tile size {size} must be a positive multiple of 32")));
    }
    if stride == 0 {
        return Err(Error::config("tile stride must be positive"));
    }
    if height < size || width < size {
        return Err(Error::data(format!("raster {height}x{width} is smaller than tile {size}")));
    }
    let rows: Vec<usize> = (0..=(height - size) / stride).map(|k| k * stride).collect();
    let cols: Vec<usize> = (0..=(width - size) / stride).map(|k| k * stride).collect();
    let remainder = (
        height - (rows.last().unwrap() + size),
        width - (cols.last().unwrap() + size),
    );
    let origins = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(TileGrid { origins, remainder })
}

/// Cuts every sample of `m` into tiles written under `out_dir`; returns the
/// new manifest and the ids of samples whose edge remainder was dropped.
pub fn tile_manifest(m: &Manifest, size: usize, stride: usize, out_dir: &Path) -> Result<(Manifest, Vec<String>)> {
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    let mut trimmed = Vec::new();
    for e in &m.entries {
        let s = SampleRasters {
            dsm_t1: RasterFile::read(&m.resolve(&e.dsm_t1))?,
            img_t2: RasterFile::read(&m.resolve(&e.img_t2))?,
            depth_prior: RasterFile::read(&m.resolve(&e.depth_prior))?,
            label_2d: RasterFile::read(&m.resolve(&e.label_2d))?,
            delta_h: RasterFile::read(&m.resolve(&e.delta_h))?,
        };
        let (h, w) = s.extent()?;
        let grid = tile_grid(h, w, size, stride)?;
        if grid.remainder != (0, 0) {
            trimmed.push(e.id.clone());
        }
        for (r, c) in grid.origins {
            let id = format!("{}_r{r}_c{c}", e.id);
            entries.push(s.crop(r, c, size, size)?.write(out_dir, &id, e.split, e.resolution)?);
        }
    }
    let out = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    out.save(&out_dir.join("manifest.tsv"))?;
    Ok((out, trimmed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        assert_eq!(tile_grid(1024, 1024, 512, 512).unwrap().origins.len(), 4);
        let g = tile_grid(1000, 1000, 512, 512).unwrap();
        assert_eq!(g.origins, vec![(0, 0)]);
        assert_eq!(g.remainder, (488, 488));
        assert!(matches!(tile_grid(100, 600, 512, 512), Err(Error::Data(_))));
        assert!(tile_grid(512, 512, 500, 500).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = Manifest {
            root: PathBuf::from("/x"),
            entries: vec![ManifestEntry {
                id: "a".into(),
                split: Split::Val,
                resolution: 0.5,
                dsm_t1: "a1".into(),
                img_t2: "a2".into(),
                depth_prior: "a3".into(),
                label_2d: "a4".into(),
                delta_h: "a5".into(),
            }],
        };
        assert_eq!(Manifest::parse(&m.to_text(), Path::new("/x")).unwrap(), m);
        assert!(Manifest::parse("bad header\n", Path::new("/")).is_err());
    }

    #[test]
    fn missing_prior_without_fallback_is_a_data_error() {
        let r = ingest_depth_prior(Path::new("/nonexistent/prior.dpgr"), None);
        assert!(matches!(r, Err(Error::Data(_))));
        let fb = || Ok(Tensor::zeros(&[1, 2, 2]));
        let t = ingest_depth_prior(Path::new("/nonexistent/prior.dpgr"), Some(&fb)).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
    }
}
