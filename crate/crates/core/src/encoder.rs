//! Weight-shared image encoder and the class text-embedding table.
//!
//! The encoder is a small convolutional stack: a full-resolution 3x3 stem,
//! a space-to-depth fold down to feature resolution, then three stages of
//! 3x3 blocks whose every block output is kept. All stages run at the same
//! spatial size, so the pyramid levels differ only in depth and width.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use symnet_tensor::{Real, Tape, Tensor, Var};

use crate::config::Config;
use crate::error::{invalid, Error, Result};
use crate::params::{Bound, Conv, ParamId, ParamStore};

/// Per-level block outputs: `F^l`, `F^m`, `F^h`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<V> {
    pub low: Vec<V>,
    pub mid: Vec<V>,
    pub high: Vec<V>,
}

impl<V> FeaturePyramid<V> {
    /// Middle-level feature used for prototypes: the last mid block.
    pub fn mid_feature(&self) -> &V {
        self.mid.last().expect("mid level has blocks")
    }

    /// High-level feature used for the prior mask: the last high block.
    pub fn high_feature(&self) -> &V {
        self.high.last().expect("high level has blocks")
    }

    pub fn block_counts(&self) -> (usize, usize, usize) {
        (self.low.len(), self.mid.len(), self.high.len())
    }

    pub fn levels(&self) -> [&[V]; 3] {
        [&self.low, &self.mid, &self.high]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&V) -> U) -> FeaturePyramid<U> {
        FeaturePyramid {
            low: self.low.iter().map(&mut f).collect(),
            mid: self.mid.iter().map(&mut f).collect(),
            high: self.high.iter().map(&mut f).collect(),
        }
    }
}

impl FeaturePyramid<Var> {
    /// Snapshot of the block values, detached from the tape.
    pub fn values<T: Real>(&self, tape: &Tape<'_, T>) -> FeaturePyramid<Tensor<T>> {
        self.map(|&v| tape.value(v).clone())
    }
}

#[derive(Debug, Clone, Copy)]
enum Block {
    /// Changes width: `relu(conv(x))`.
    Entry(Conv),
    /// Keeps width: `relu(x + conv(x))`.
    Residual(Conv),
}

impl Block {
    fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, bound: &Bound, x: Var) -> Result<Var> {
        match self {
            Block::Entry(conv) => conv.forward_relu(tape, bound, x),
            Block::Residual(conv) => {
                let y = conv.forward(tape, bound, x)?;
                let s = tape.add(x, y)?;
                Ok(tape.relu(s)?)
            }
        }
    }

    fn conv(&self) -> &Conv {
        match self {
            Block::Entry(c) | Block::Residual(c) => c,
        }
    }
}

/// Gain on residual-branch initialization so stacked blocks keep a stable scale.
const RESIDUAL_GAIN: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Encoder {
    stem: Conv,
    fold: Conv,
    stages: [Vec<Block>; 3],
    downsample: usize,
    widths: [usize; 3],
}

impl Encoder {
    pub fn new<T: Real, R: Rng>(cfg: &Config, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let s = cfg.stem_channels;
        let f = cfg.downsample;
        let stem = Conv::new(store, rng, "encoder.stem", 3, 3, s, 1.0);
        let fold = Conv::new(store, rng, "encoder.fold", 1, s * f * f, cfg.c_low, 1.0);
        let widths = [cfg.c_low, cfg.c_mid, cfg.c_high];
        let counts = [cfg.n1, cfg.n2, cfg.n3];
        let names = ["low", "mid", "high"];
        let mut prev = cfg.c_low;
        let stages = std::array::from_fn(|level| {
            (0..counts[level])
                .map(|b| {
                    let name = format!("encoder.{}.{b}", names[level]);
                    let width = widths[level];
                    let block = if width != prev {
                        Block::Entry(Conv::new(store, rng, &name, 3, prev, width, 1.0))
                    } else {
                        Block::Residual(Conv::new(store, rng, &name, 3, width, width, RESIDUAL_GAIN))
                    };
                    prev = width;
                    block
                })
                .collect()
        });
        Self {
            stem,
            fold,
            stages,
            downsample: f,
            widths,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.stem.ids());
        ids.extend(self.fold.ids());
        for stage in &self.stages {
            for block in stage {
                ids.extend(block.conv().ids());
            }
        }
        ids
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    /// Encodes an `H x W x 3` image with values in `[0, 1]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<'_, T>, bound: &Bound, image: &Tensor<T>) -> Result<FeaturePyramid<Var>> {
        let (h, w, c) = image.hwc()?;
        if image.rank() != 3 || c != 3 {
            return invalid(format!("encoder expects an HxWx3 image, got {:?}", image.shape()));
        }
        if h % self.downsample != 0 || w % self.downsample != 0 {
            return invalid(format!("image {h}x{w} is not divisible by the encoder stride {}", self.downsample));
        }
        let centred = image.map(|v| (v - T::of(0.5)) * T::of(4.0));
        let x = tape.constant(centred)?;
        let x = self.stem.forward_relu(tape, bound, x)?;
        let x = tape.space_to_depth(x, self.downsample)?;
        let mut x = self.fold.forward_relu(tape, bound, x)?;
        let mut levels: [Vec<Var>; 3] = Default::default();
        for (stage, out) in self.stages.iter().zip(levels.iter_mut()) {
            for block in stage {
                x = block.forward(tape, bound, x)?;
                out.push(x);
            }
        }
        let [low, mid, high] = levels;
        Ok(FeaturePyramid { low, mid, high })
    }
}

/// Frozen per-class text vectors; row `i` belongs to class id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings<T> {
    names: Vec<String>,
    rows: Vec<Tensor<T>>,
    dim: usize,
}

impl<T: Real> TextEmbeddings<T> {
    /// Unit-variance Gaussian rows scaled by `1/sqrt(d)`.
    pub fn random<R: Rng>(names: &[String], dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let rows = names
            .iter()
            .map(|_| Tensor::from_fn(&[dim], |_| T::of(normal.sample(rng))))
            .collect();
        Self {
            names: names.to_vec(),
            rows,
            dim,
        }
    }

    pub fn from_rows(names: Vec<String>, rows: Vec<Tensor<T>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Tensor::len);
        if names.len() != rows.len() || rows.iter().any(|r| r.rank() != 1 || r.len() != dim) || dim == 0 {
            return invalid("embedding rows must be equal-length vectors, one per name");
        }
        if rows.iter().any(|r| !r.is_finite()) {
            return invalid("embedding rows must be finite");
        }
        Ok(Self { names, rows, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embed(&self, class_id: usize) -> Result<&Tensor<T>> {
        self.rows
            .get(class_id)
            .ok_or_else(|| Error::NotFound(format!("class {class_id} has no text embedding")))
    }

    /// Parses `<class_name> <d reals>` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(name) = fields.next() else { continue };
            let values = fields
                .map(|f| f.parse::<f64>().map(T::of))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidArgument(format!("embedding line {}: {e}", n + 1)))?;
            names.push(name.to_string());
            rows.push(Tensor::vector(values));
        }
        Self::from_rows(names, rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, row) in self.names.iter().zip(&self.rows) {
            out.push_str(name);
            for v in row.data() {
                write!(out, " {}", v.to_f64_lossy()).expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    /// All rows stacked as `n x d`, used for checkpointing.
    pub fn table(&self) -> Tensor<T> {
        let data = self.rows.iter().flat_map(|r| r.data().iter().copied()).collect();
        Tensor::new(vec![self.rows.len(), self.dim], data).expect("consistent rows")
    }
}
