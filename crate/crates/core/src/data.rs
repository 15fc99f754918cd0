//! Episodes, class folds, and the on-disk dataset layout.
//!
//! A dataset directory holds `manifest.json` plus one folder per class with
//! `NNN.ppm` images and `NNN.pgm` masks.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use symnet_tensor::{Real, Tensor};

use crate::error::{Error, Result};
use crate::synthetic::{self, Sample, SyntheticClass};

/// One labelled support image.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportShot<T> {
    pub image: Tensor<T>,
    pub mask: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    pub supports: Vec<SupportShot<T>>,
    pub query_image: Tensor<T>,
    pub query_mask: Tensor<T>,
    pub class_id: usize,
    /// `(class, index)` of every image, supports first.
    pub sources: Vec<(usize, usize)>,
}

impl<T: Real> Episode<T> {
    pub fn k(&self) -> usize {
        self.supports.len()
    }

    pub fn cast<U: Real>(&self) -> Episode<U> {
        Episode {
            supports: self
                .supports
                .iter()
                .map(|s| SupportShot {
                    image: s.image.cast(),
                    mask: s.mask.cast(),
                })
                .collect(),
            query_image: self.query_image.cast(),
            query_mask: self.query_mask.cast(),
            class_id: self.class_id,
            sources: self.sources.clone(),
        }
    }

    /// Writes every image and mask under `dir`.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, s) in self.supports.iter().enumerate() {
            write_ppm(&dir.join(format!("support{i}.ppm")), &s.image)?;
            write_pgm(&dir.join(format!("support{i}.pgm")), &s.mask)?;
        }
        write_ppm(&dir.join("query.ppm"), &self.query_image)?;
        write_pgm(&dir.join("query.pgm"), &self.query_mask)?;
        let meta = serde_json::json!({ "class_id": self.class_id, "sources": self.sources });
        fs::write(dir.join("episode.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

impl Episode<f64> {
    /// Reads a directory in the [`Episode::dump`] layout. The query mask is
    /// optional and defaults to empty; `episode.json` supplies the class id.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("episode.json"))?)?;
        let class_id = meta
            .get("class_id")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::InvalidConfig(format!("{}: episode.json lacks class_id", dir.display())))?
            as usize;
        let mut supports = Vec::new();
        while dir.join(format!("support{}.ppm", supports.len())).exists() {
            let i = supports.len();
            supports.push(SupportShot {
                image: read_ppm(&dir.join(format!("support{i}.ppm")))?,
                mask: read_pgm(&dir.join(format!("support{i}.pgm")))?,
            });
        }
        if supports.is_empty() {
            return Err(Error::NotFound(format!("{}: no support0.ppm", dir.display())));
        }
        let query_image = read_ppm(&dir.join("query.ppm"))?;
        let query_path = dir.join("query.pgm");
        let query_mask = if query_path.exists() {
            read_pgm(&query_path)?
        } else {
            let (h, w, _) = query_image.hwc()?;
            Tensor::zeros(&[h, w])
        };
        Ok(Episode {
            supports,
            query_image,
            query_mask,
            class_id,
            sources: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Contiguous class folds; `test_fold` is held out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitConfig {
    pub n_classes: usize,
    pub n_folds: usize,
    pub test_fold: usize,
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(n_classes: usize, n_folds: usize, test_fold: usize, seed: u64) -> Result<Self> {
        if n_folds == 0 || !n_classes.is_multiple_of(n_folds) || test_fold >= n_folds {
            return Err(Error::InvalidConfig(format!(
                "{n_classes} classes do not split into {n_folds} folds with fold {test_fold} held out"
            )));
        }
        Ok(Self {
            n_classes,
            n_folds,
            test_fold,
            seed,
        })
    }

    pub fn fold_size(&self) -> usize {
        self.n_classes / self.n_folds
    }

    pub fn fold_of(&self, class: usize) -> usize {
        class / self.fold_size()
    }

    pub fn test_classes(&self) -> Vec<usize> {
        let n = self.fold_size();
        (self.test_fold * n..(self.test_fold + 1) * n).collect()
    }

    pub fn train_classes(&self) -> Vec<usize> {
        (0..self.n_classes).filter(|&c| self.fold_of(c) != self.test_fold).collect()
    }

    pub fn classes(&self, mode: Mode) -> Vec<usize> {
        match mode {
            Mode::Train => self.train_classes(),
            Mode::Test => self.test_classes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    #[serde(flatten)]
    pub class: SyntheticClass,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub resolution: usize,
    pub seed: u64,
    pub classes: Vec<ManifestClass>,
}

/// In-memory dataset: `samples[class][index]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub resolution: usize,
    pub classes: Vec<SyntheticClass>,
    pub samples: Vec<Vec<Sample>>,
}

impl Dataset {
    pub fn synthetic(n_classes: usize, per_class: usize, resolution: usize, stride: usize, seed: u64) -> Result<Self> {
        let (classes, samples) = synthetic::generate(n_classes, per_class, resolution, stride, seed)?;
        Ok(Self {
            resolution,
            classes,
            samples,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Writes images, masks and the manifest under `dir`.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut classes = Vec::with_capacity(self.classes.len());
        for (class, samples) in self.classes.iter().zip(&self.samples) {
            let sub = dir.join(&class.name);
            fs::create_dir_all(&sub)?;
            let mut files = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let entry = ManifestEntry {
                    image: format!("{}/{i:03}.ppm", class.name),
                    mask: format!("{}/{i:03}.pgm", class.name),
                };
                write_ppm(&dir.join(&entry.image), &s.image)?;
                write_pgm(&dir.join(&entry.mask), &s.mask)?;
                files.push(entry);
            }
            classes.push(ManifestClass {
                class: class.clone(),
                files,
            });
        }
        let manifest = Manifest {
            resolution: self.resolution,
            seed,
            classes,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut classes = Vec::with_capacity(manifest.classes.len());
        let mut samples = Vec::with_capacity(manifest.classes.len());
        for mc in manifest.classes {
            let list = mc
                .files
                .iter()
                .map(|f| {
                    let image = read_ppm(&dir.join(&f.image))?;
                    let mask = read_pgm(&dir.join(&f.mask))?;
                    let r = manifest.resolution;
                    if image.shape() != [r, r, 3] || mask.shape() != [r, r] {
                        return Err(Error::InvalidConfig(format!("{} is not {r}x{r}", f.image)));
                    }
                    Ok(Sample { image, mask })
                })
                .collect::<Result<Vec<_>>>()?;
            classes.push(mc.class);
            samples.push(list);
        }
        Ok(Self {
            resolution: manifest.resolution,
            classes,
            samples,
        })
    }
}

/// Uniform class from the mode's pool, then `k + 1` distinct images of it.
pub fn sample_episode<T: Real, R: Rng>(
    data: &Dataset,
    split: &SplitConfig,
    mode: Mode,
    k: usize,
    rng: &mut R,
) -> Result<Episode<T>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if split.n_classes != data.n_classes() {
        return Err(Error::InvalidConfig(format!(
            "split covers {} classes but the dataset has {}",
            split.n_classes,
            data.n_classes()
        )));
    }
    let pool = split.classes(mode);
    let class = pool[rng.random_range(0..pool.len())];
    let images = &data.samples[class];
    if images.len() < k + 1 {
        return Err(Error::InvalidConfig(format!(
            "class {class} has {} images, an episode needs {}",
            images.len(),
            k + 1
        )));
    }
    let picks = sample(rng, images.len(), k + 1).into_vec();
    let supports = picks[..k]
        .iter()
        .map(|&i| SupportShot {
            image: images[i].image.cast(),
            mask: images[i].mask.cast(),
        })
        .collect();
    let q = &images[picks[k]];
    Ok(Episode {
        supports,
        query_image: q.image.cast(),
        query_mask: q.mask.cast(),
        class_id: class,
        sources: picks.iter().map(|&i| (class, i)).collect(),
    })
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: PathBuf::from(path),
        source,
    }
}

fn quantize<T: Real>(v: T) -> u8 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 from an `H x W x 3` tensor in `[0, 1]`.
pub fn write_ppm<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let (h, w, c) = image.hwc()?;
    if c != 3 || image.rank() != 3 {
        return Err(Error::InvalidArgument(format!("PPM needs H x W x 3, got {:?}", image.shape())));
    }
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    let file = BufWriter::new(File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(image_err(path))
}

/// Binary P5 from an `H x W` map in `[0, 1]`, scaled by 255.
pub fn write_pgm<T: Real>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let [h, w] = *map.shape() else {
        return Err(Error::InvalidArgument(format!("PGM needs H x W, got {:?}", map.shape())));
    };
    let bytes: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    let file = BufWriter::new(File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(image_err(path))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![h as usize, w as usize, 3], data)?)
}

/// Reads a mask, thresholding at mid-gray.
pub fn read_pgm(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| if b >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(vec![h as usize, w as usize], data)?)
}
