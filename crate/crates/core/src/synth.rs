//! Synthetic two-domain benchmark with a spurious nuisance cue.
//!
//! Each image is split into four quadrants. A class glyph (a fixed binary
//! 5×5 pattern) sits at a random offset inside one random quadrant; that
//! quadrant is the sample's object mask. One of the other three quadrants
//! holds a stripe texture whose intensity is the nuisance: in the source
//! domain the stripes are horizontal and their intensity is the level of
//! the sample's own class with probability `rho_confound`; in the target
//! domain the stripes are vertical and their level is drawn independently
//! of the label. Gaussian noise is added and pixels are clipped to `[0, 1]`
//! and rounded to `f32`, so the binary dump is lossless.
//!
//! Per-sample draw order from the split's [`SplitMix64`] stream:
//! object quadrant, glyph row offset, glyph column offset, nuisance
//! quadrant, confound coin (source only), level class (target, or source
//! when the coin fails), stripe phase, then `H·W` noise normals in
//! row-major order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

pub const GLYPH: usize = 5;

#[rustfmt::skip]
const BASE_GLYPHS: [[&str; GLYPH]; 4] = [
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["##...", "##...", ".....", "...##", "...##"],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub rho_confound: f64,
    pub noise_std: f64,
    pub train_per_domain: usize,
    pub eval_per_domain: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            height: 16,
            width: 16,
            rho_confound: 0.9,
            noise_std: 0.1,
            train_per_domain: 512,
            eval_per_domain: 200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 254 {
            return Err(Error::Config(format!("classes must be in 2..=254, got {}", self.classes)));
        }
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) || self.height / 2 < GLYPH || self.width / 2 < GLYPH {
            return Err(Error::Config(format!(
                "image {}×{} must be even with quadrants of at least {GLYPH}×{GLYPH}",
                self.height, self.width
            )));
        }
        if !(0.0..=1.0).contains(&self.rho_confound) {
            return Err(Error::Config("rho_confound must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        Ok(())
    }

    /// Stripe intensity associated with class `c`.
    pub fn level(&self, c: usize) -> f64 {
        0.2 + 0.45 * c as f64 / (self.classes - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn tag(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Domain::Source),
            1 => Ok(Domain::Target),
            _ => Err(Error::Format(format!("unknown domain byte {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Single-channel `H·W` pixels, row-major.
    pub image: Vec<f64>,
    pub label: Option<usize>,
    pub domain: Domain,
    /// Object quadrant, `H·W`.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Images `[n × 1 × H × W]` for the given sample indices.
    pub fn images(&self, indices: &[usize]) -> Tensor {
        let hw = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * hw);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].image);
        }
        Tensor::new(vec![indices.len(), 1, self.height, self.width], data).expect("image size")
    }

    /// Labels of the given samples, or `None` if any is unlabelled.
    pub fn labels(&self, indices: &[usize]) -> Option<Vec<usize>> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }
}

/// The binary glyph of class `c` as `GLYPH × GLYPH` row-major cells.
pub fn glyph(c: usize) -> [[bool; GLYPH]; GLYPH] {
    let mut g = [[false; GLYPH]; GLYPH];
    if let Some(rows) = BASE_GLYPHS.get(c) {
        for (r, row) in rows.iter().enumerate() {
            for (k, ch) in row.bytes().enumerate() {
                g[r][k] = ch == b'#';
            }
        }
    } else {
        let mut rng = SplitMix64::new(derive_seed(0x474c_5950_48, &[c as u64]));
        for row in g.iter_mut() {
            for cell in row.iter_mut() {
                *cell = rng.uniform() < 0.5;
            }
        }
    }
    g
}

fn quadrant_origin(q: usize, h: usize, w: usize) -> (usize, usize) {
    ((q / 2) * (h / 2), (q % 2) * (w / 2))
}

/// Deterministic dataset for `(config.seed, split, domain)`.
pub fn generate(config: &SynthConfig, split: Split, domain: Domain) -> Result<Dataset> {
    config.validate()?;
    let n = match split {
        Split::Train => config.train_per_domain,
        Split::Eval => config.eval_per_domain,
    };
    let split_tag = match split {
        Split::Train => 0,
        Split::Eval => 1,
    };
    let mut rng = SplitMix64::new(derive_seed(config.seed, &[split_tag, domain.tag() as u64]));
    let (h, w, c) = (config.height, config.width, config.classes);
    let (qh, qw) = (h / 2, w / 2);
    let glyphs: Vec<_> = (0..c).map(glyph).collect();

    let samples = (0..n)
        .map(|i| {
            let y = i % c;
            let q = rng.below(4);
            let gu = rng.below(qh - GLYPH + 1);
            let gv = rng.below(qw - GLYPH + 1);
            let nq = (q + 1 + rng.below(3)) % 4;
            let level_class = match domain {
                Domain::Source if rng.uniform() < config.rho_confound => y,
                _ => rng.below(c),
            };
            let phase = rng.below(2);

            let mut img = vec![0.0; h * w];
            let (nu, nv) = quadrant_origin(nq, h, w);
            let level = config.level(level_class);
            for u in nu..nu + qh {
                for v in nv..nv + qw {
                    let coord = match domain {
                        Domain::Source => u,
                        Domain::Target => v,
                    };
                    if (coord + phase).is_multiple_of(2) {
                        img[u * w + v] = level;
                    }
                }
            }
            let (ou, ov) = quadrant_origin(q, h, w);
            for (r, row) in glyphs[y].iter().enumerate() {
                for (k, &on) in row.iter().enumerate() {
                    if on {
                        img[(ou + gu + r) * w + ov + gv + k] = 1.0;
                    }
                }
            }
            for px in img.iter_mut() {
                let noisy = *px + config.noise_std * rng.normal();
                *px = noisy.clamp(0.0, 1.0) as f32 as f64;
            }
            let mask = (0..h * w)
                .map(|p| {
                    let (u, v) = (p / w, p % w);
                    u >= ou && u < ou + qh && v >= ov && v < ov + qw
                })
                .collect();
            let label = match (domain, split) {
                (Domain::Target, Split::Train) => None,
                _ => Some(y),
            };
            Sample {
                image: img,
                label,
                domain,
                mask,
            }
        })
        .collect();
    Ok(Dataset {
        classes: c,
        height: h,
        width: w,
        samples,
    })
}

/// A mini-batch drawn from one domain.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub indices: Vec<usize>,
    /// `[n × 1 × H × W]`
    pub images: Tensor,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub masks: Vec<Vec<bool>>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn from_indices(data: &Dataset, indices: Vec<usize>) -> Self {
        let domain = indices
            .first()
            .map_or(Domain::Source, |&i| data.samples[i].domain);
        LabeledBatch {
            images: data.images(&indices),
            labels: data.labels(&indices),
            masks: indices.iter().map(|&i| data.samples[i].mask.clone()).collect(),
            domain,
            indices,
        }
    }
}

/// The sample order of one epoch: Fisher-Yates on `0..n` with the stream
/// seeded by `derive_seed(seed, [epoch])`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(derive_seed(seed, &[epoch])).shuffle(&mut order);
    order
}

/// Shuffled full batches for one epoch; the trailing partial batch is dropped.
pub fn batches(
    data: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = LabeledBatch> + '_> {
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let order = epoch_order(data.len(), seed, epoch);
    let full = data.len() / batch_size;
    Ok((0..full).map(move |b| {
        LabeledBatch::from_indices(data, order[b * batch_size..(b + 1) * batch_size].to_vec())
    }))
}

/// Endless stream of batches that rolls over epochs.
#[derive(Debug, Clone)]
pub struct BatchStream {
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::BatchTooSmall(batch_size));
        }
        if n < batch_size {
            return Err(Error::Config(format!(
                "dataset of {n} samples cannot fill a batch of {batch_size}"
            )));
        }
        Ok(BatchStream {
            n,
            batch_size,
            seed,
            epoch: 0,
            order: epoch_order(n, seed, 0),
            cursor: 0,
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.n {
            self.epoch += 1;
            self.order = epoch_order(self.n, self.seed, self.epoch);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        out
    }
}

const MAGIC: &[u8; 4] = b"SCD1";

/// `SCD1 | u32 n | u32 C | u32 H | u32 W | per sample: u8 label (255 =
/// absent) | u8 domain | H·W f32 pixels | H·W u8 mask`, little-endian.
pub fn encode(data: &Dataset) -> Vec<u8> {
    let hw = data.height * data.width;
    let mut out = Vec::with_capacity(20 + data.len() * (2 + 5 * hw));
    out.extend_from_slice(MAGIC);
    for v in [data.len(), data.classes, data.height, data.width] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &data.samples {
        out.push(s.label.map_or(255, |l| l as u8));
        out.push(s.domain.tag());
        for &p in &s.image {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out.extend(s.mask.iter().map(|&m| m as u8));
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Dataset> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut u32s = [0usize; 4];
    for v in u32s.iter_mut() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| Error::Format("truncated header".into()))?;
        *v = u32::from_le_bytes(b) as usize;
    }
    let [n, classes, height, width] = u32s;
    let hw = height * width;
    let per = 2 + 5 * hw;
    if r.len() != n * per {
        return Err(Error::Format(format!(
            "expected {} payload bytes for {n} samples, found {}",
            n * per,
            r.len()
        )));
    }
    let samples = r
        .chunks_exact(per.max(1))
        .take(n)
        .map(|chunk| {
            let label = match chunk[0] {
                255 => None,
                l if (l as usize) < classes => Some(l as usize),
                l => return Err(Error::LabelOutOfRange { label: l as usize, classes }),
            };
            let domain = Domain::from_tag(chunk[1])?;
            let image = chunk[2..2 + 4 * hw]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let mask = chunk[2 + 4 * hw..].iter().map(|&m| m != 0).collect();
            Ok(Sample { image, label, domain, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        classes,
        height,
        width,
        samples,
    })
}

pub fn save(data: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(data)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// File name used for a split/domain dump, e.g. `source_train.scd`.
pub fn file_name(split: Split, domain: Domain) -> String {
    format!("{}_{}.scd", domain.name(), split.name())
}
