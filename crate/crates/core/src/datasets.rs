//! Synthetic benchmarks (two moons with OOD cluster and ring, blobs, a 1-D
//! interleaved-segment toy), Gaussian-noise corruption, IDX ingestion and
//! stratified splitting.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{contract, GemError, Result};
use crate::rng::{substream, Rng};

/// Label carried by rows without class semantics.
pub const OOD_LABEL: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
    Shifted,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
            Split::Shifted => "shifted",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub classes: usize,
    pub x: Tensor,
    pub y: Vec<usize>,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            seed: self.seed,
            classes: self.classes,
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            split: idx.iter().map(|&i| self.split[i]).collect(),
        }
    }

    /// Rows tagged with `split`.
    pub fn subset(&self, split: Split) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.split[i] == split).collect();
        self.select(&idx)
    }

    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split.iter_mut().for_each(|s| *s = split);
        self
    }

    /// Row concatenation; both sides must agree on dimension and class count.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() || self.classes != other.classes {
            return Err(contract("cannot concatenate datasets of different shape"));
        }
        let mut data = self.x.data().to_vec();
        data.extend_from_slice(other.x.data());
        Ok(Dataset {
            name: self.name.clone(),
            seed: self.seed,
            classes: self.classes,
            x: Tensor::new(self.len() + other.len(), self.dim(), data)?,
            y: self.y.iter().chain(&other.y).copied().collect(),
            split: self.split.iter().chain(&other.split).copied().collect(),
        })
    }

    /// CSV with columns `x0..x{d-1},y,split`; OOD rows carry `y = -1`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        writeln!(out, "{},y,split", header.join(","))?;
        for i in 0..self.len() {
            let xs: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            let y = if self.y[i] == OOD_LABEL { "-1".to_string() } else { self.y[i].to_string() };
            writeln!(out, "{},{},{}", xs.join(","), y, self.split[i].name())?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Isotropic Gaussian cluster placed away from the training support.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodCluster {
    pub center: (f64, f64),
    pub std: f64,
    pub n: usize,
}

impl Default for OodCluster {
    fn default() -> Self {
        Self {
            center: (2.5, 2.0),
            std: 0.2,
            n: 400,
        }
    }
}

fn noise(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| contract(format!("invalid noise level {sigma}: {e}")))
}

/// Two interleaving half-circles with `n/2` points each (label 0 outer,
/// label 1 inner), tagged `Train`, plus an optional OOD cluster tagged `Ood`.
pub fn gen_two_moons(n: usize, sigma: f64, ood: Option<OodCluster>, seed: u64) -> Result<Dataset> {
    if !n.is_multiple_of(2) {
        return Err(contract("two moons needs an even sample count"));
    }
    let mut rng = substream(seed, "data/moons");
    let nd = noise(sigma)?;
    let half = n / 2;
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for class in 0..2 {
        for i in 0..half {
            let t = if half > 1 { std::f64::consts::PI * i as f64 / (half - 1) as f64 } else { 0.0 };
            let (bx, by) = if class == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
            rows.push(vec![bx + nd.sample(&mut rng), by + nd.sample(&mut rng)]);
            y.push(class);
        }
    }
    let mut split = vec![Split::Train; n];
    if let Some(c) = ood {
        let od = noise(c.std)?;
        let mut orng = substream(seed, "data/moons_ood");
        for _ in 0..c.n {
            rows.push(vec![c.center.0 + od.sample(&mut orng), c.center.1 + od.sample(&mut orng)]);
            y.push(OOD_LABEL);
            split.push(Split::Ood);
        }
    }
    Ok(Dataset {
        name: "two_moons".into(),
        seed,
        classes: 2,
        x: Tensor::from_rows(&rows)?,
        y,
        split,
    })
}

/// Noisy ring around the moons, tagged `Ood`.
pub fn gen_ring(n: usize, center: (f64, f64), radius: f64, sigma: f64, seed: u64) -> Result<Dataset> {
    let mut rng = substream(seed, "data/ring");
    let nd = noise(sigma)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let r = radius + nd.sample(&mut rng);
            vec![center.0 + r * t.cos(), center.1 + r * t.sin()]
        })
        .collect();
    Ok(Dataset {
        name: "ring".into(),
        seed,
        classes: 2,
        x: Tensor::from_rows(&rows)?,
        y: vec![OOD_LABEL; n],
        split: vec![Split::Ood; n],
    })
}

/// `n_per_class` isotropic Gaussian draws around each center.
pub fn gen_blobs(centers: &[Vec<f64>], n_per_class: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    let d = centers.first().map_or(0, Vec::len);
    if centers.len() < 2 || centers.iter().any(|c| c.len() != d) {
        return Err(contract("blobs need at least two centers of equal dimension"));
    }
    let mut rng = substream(seed, "data/blobs");
    let nd = noise(sigma)?;
    let mut rows = vec![];
    let mut y = vec![];
    for (c, mu) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            rows.push(mu.iter().map(|m| m + nd.sample(&mut rng)).collect());
            y.push(c);
        }
    }
    let n = y.len();
    Ok(Dataset {
        name: "blobs".into(),
        seed,
        classes: centers.len(),
        x: Tensor::from_rows(&rows)?,
        y,
        split: vec![Split::Train; n],
    })
}

/// Layout of the 1-D toy: six unit segments separated by gaps of 0.5
/// starting at −4, labelled alternately.
pub const TOY1D_SEGMENTS: usize = 6;

pub fn toy1d_segment(i: usize) -> (f64, f64) {
    let lo = -4.0 + 1.5 * i as f64;
    (lo, lo + 1.0)
}

/// Interleaved class segments (`Train`, 100 points each) plus uniform OOD
/// points on `[−8, −6] ∪ [7, 9]` (`Ood`, 100 points).
pub fn gen_toy1d(seed: u64) -> Result<Dataset> {
    let mut rng = substream(seed, "data/toy1d");
    let mut x = vec![];
    let mut y = vec![];
    let mut split = vec![];
    for i in 0..TOY1D_SEGMENTS {
        let (lo, hi) = toy1d_segment(i);
        for _ in 0..100 {
            x.push(rng.random_range(lo..hi));
            y.push(i % 2);
            split.push(Split::Train);
        }
    }
    for j in 0..100 {
        let v = rng.random_range(0.0..2.0);
        x.push(if j % 2 == 0 { -8.0 + v } else { 7.0 + v });
        y.push(OOD_LABEL);
        split.push(Split::Ood);
    }
    let n = x.len();
    Ok(Dataset {
        name: "toy1d".into(),
        seed,
        classes: 2,
        x: Tensor::new(n, 1, x)?,
        y,
        split,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1–5; 0 is accepted as the identity.
    pub severity: u8,
}

impl CorruptionSpec {
    pub const SIGMAS: [f64; 5] = [0.02, 0.05, 0.1, 0.2, 0.4];

    pub fn sigma(&self) -> Result<f64> {
        match self.severity {
            0 => Ok(0.0),
            s @ 1..=5 => Ok(Self::SIGMAS[s as usize - 1]),
            s => Err(contract(format!("corruption severity must lie in 0..=5, got {s}"))),
        }
    }
}

/// Adds Gaussian noise; labels are kept and rows are tagged `Shifted`.
pub fn corrupt(ds: &Dataset, spec: CorruptionSpec, seed: u64) -> Result<Dataset> {
    let sigma = spec.sigma()?;
    let mut out = ds.clone().with_split(Split::Shifted);
    if sigma > 0.0 {
        let nd = noise(sigma)?;
        let mut rng = substream(seed, "data/corrupt");
        out.x.data_mut().iter_mut().for_each(|v| *v += nd.sample(&mut rng));
    }
    out.name = format!("{}_noise{}", ds.name, spec.severity);
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| GemError::Format {
            offset: offset as u64,
            msg: format!("file ends before {what}"),
        })
}

/// Parses an IDX image file (`0x00000803`) and label file (`0x00000801`),
/// keeping the first `limit` rows with pixels scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<Dataset> {
    let magic = read_u32(images, 0, "image magic")?;
    if magic != 0x0803 {
        return Err(GemError::Format {
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected 0x00000803"),
        });
    }
    let n_img = read_u32(images, 4, "image count")? as usize;
    let rows = read_u32(images, 8, "row count")? as usize;
    let cols = read_u32(images, 12, "column count")? as usize;
    let lmagic = read_u32(labels, 0, "label magic")?;
    if lmagic != 0x0801 {
        return Err(GemError::Format {
            offset: 0,
            msg: format!("bad label magic {lmagic:#010x}, expected 0x00000801"),
        });
    }
    let n_lab = read_u32(labels, 4, "label count")? as usize;
    if n_img != n_lab {
        return Err(GemError::Format {
            offset: 4,
            msg: format!("image count {n_img} differs from label count {n_lab}"),
        });
    }
    let n = limit.map_or(n_img, |l| l.min(n_img));
    let px = rows * cols;
    let need = 16 + n * px;
    if images.len() < need {
        return Err(GemError::Format {
            offset: images.len() as u64,
            msg: format!("image data truncated: need {need} bytes"),
        });
    }
    if labels.len() < 8 + n {
        return Err(GemError::Format {
            offset: labels.len() as u64,
            msg: format!("label data truncated: need {} bytes", 8 + n),
        });
    }
    let x: Vec<f64> = images[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let y: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    if let Some((i, l)) = y.iter().enumerate().find(|(_, l)| **l > 9) {
        return Err(GemError::Format {
            offset: (8 + i) as u64,
            msg: format!("label {l} outside 0..=9"),
        });
    }
    Ok(Dataset {
        name: "mnist".into(),
        seed: 0,
        classes: 10,
        x: Tensor::new(n, px, x)?,
        y,
        split: vec![Split::Train; n],
    })
}

pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    parse_idx(&std::fs::read(images)?, &std::fs::read(labels)?, limit)
}

/// Class-stratified `(train, val)` index split; `val_fraction` of each class
/// (rounded) goes to validation.
pub fn stratified_split(labels: &[usize], classes: usize, val_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = vec![];
    let mut val = vec![];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let k = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..k]);
        train.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// The two-moons benchmark: train and test moons, far OOD cluster and near-OOD ring.
#[derive(Clone, Debug)]
pub struct MoonsBenchmark {
    pub train: Dataset,
    pub test: Dataset,
    pub ood_cluster: Dataset,
    pub ood_ring: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoonsSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub ood: OodCluster,
    pub ring_n: usize,
    pub ring_center: (f64, f64),
    pub ring_radius: f64,
    pub ring_noise: f64,
}

impl Default for MoonsSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 1000,
            noise: 0.1,
            ood: OodCluster::default(),
            ring_n: 400,
            ring_center: (0.5, 0.25),
            ring_radius: 2.0,
            ring_noise: 0.1,
        }
    }
}

impl MoonsBenchmark {
    pub fn generate(spec: &MoonsSpec, seed: u64) -> Result<Self> {
        let train = gen_two_moons(spec.n_train, spec.noise, None, seed)?;
        let all = gen_two_moons(spec.n_test, spec.noise, Some(spec.ood), seed.wrapping_add(1_000_003))?;
        let test = all.subset(Split::Train).with_split(Split::Test);
        let ood_cluster = all.subset(Split::Ood);
        let ood_ring = gen_ring(spec.ring_n, spec.ring_center, spec.ring_radius, spec.ring_noise, seed)?;
        Ok(Self {
            train,
            test,
            ood_cluster,
            ood_ring,
        })
    }
}

/// A training set, an in-distribution test set and named OOD sets.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Vec<Dataset>,
}

impl Benchmark {
    pub fn ood_set(&self, name: &str) -> Option<&Dataset> {
        self.ood.iter().find(|d| d.name == name)
    }
}

/// Seed offset separating test draws from training draws.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsSpec {
    pub centers: Vec<Vec<f64>>,
    pub n_per_class: usize,
    pub sigma: f64,
    /// Far cluster used as the OOD set; `None` disables it.
    pub ood_center: Option<Vec<f64>>,
    pub ood_n: usize,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            centers: vec![vec![-2.0, 0.0], vec![2.0, 0.0], vec![0.0, 3.0]],
            n_per_class: 300,
            sigma: 0.5,
            ood_center: Some(vec![0.0, -4.0]),
            ood_n: 300,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toy1dSpec {}

/// IDX image/label pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub images: std::path::PathBuf,
    pub labels: std::path::PathBuf,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedIdx {
    pub name: String,
    #[serde(flatten)]
    pub files: IdxFiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train: IdxFiles,
    pub test: IdxFiles,
    #[serde(default)]
    pub ood: Vec<NamedIdx>,
}

/// Dataset section of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    TwoMoons(MoonsSpec),
    Blobs(BlobsSpec),
    Toy1d(Toy1dSpec),
    Idx(IdxSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoMoons(MoonsSpec::default())
    }
}

impl DatasetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::TwoMoons(_) => "two_moons",
            DatasetSpec::Blobs(_) => "blobs",
            DatasetSpec::Toy1d(_) => "toy1d",
            DatasetSpec::Idx(_) => "idx",
        }
    }

    /// Input dimension and class count, where known without reading files.
    pub fn shape_hint(&self) -> Option<(usize, usize)> {
        match self {
            DatasetSpec::TwoMoons(_) => Some((2, 2)),
            DatasetSpec::Blobs(b) => Some((b.centers.first().map_or(0, Vec::len), b.centers.len())),
            DatasetSpec::Toy1d(_) => Some((1, 2)),
            DatasetSpec::Idx(_) => None,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Benchmark> {
        let test_seed = seed.wrapping_add(TEST_SEED_OFFSET);
        let name = self.name().to_string();
        match self {
            DatasetSpec::TwoMoons(spec) => {
                let b = MoonsBenchmark::generate(spec, seed)?;
                Ok(Benchmark {
                    name,
                    train: b.train,
                    test: b.test,
                    ood: vec![named(b.ood_cluster, "ood_cluster"), named(b.ood_ring, "ood_ring")],
                })
            }
            DatasetSpec::Blobs(spec) => {
                let train = gen_blobs(&spec.centers, spec.n_per_class, spec.sigma, seed)?;
                let test = gen_blobs(&spec.centers, spec.n_per_class, spec.sigma, test_seed)?.with_split(Split::Test);
                let mut ood = vec![];
                if let Some(c) = &spec.ood_center {
                    if c.len() != train.dim() {
                        return Err(contract("blobs ood_center must match the center dimension"));
                    }
                    let mut far = gen_blobs(&[c.clone(), c.clone()], spec.ood_n.div_ceil(2), spec.sigma, test_seed)?;
                    far.y.iter_mut().for_each(|y| *y = OOD_LABEL);
                    far.classes = train.classes;
                    ood.push(named(far.with_split(Split::Ood), "ood_cluster"));
                }
                Ok(Benchmark { name, train, test, ood })
            }
            DatasetSpec::Toy1d(_) => {
                let train = gen_toy1d(seed)?.subset(Split::Train);
                let all = gen_toy1d(test_seed)?;
                Ok(Benchmark {
                    name,
                    train,
                    test: all.subset(Split::Train).with_split(Split::Test),
                    ood: vec![named(all.subset(Split::Ood), "ood_tails")],
                })
            }
            DatasetSpec::Idx(spec) => {
                let train = load_idx(&spec.train.images, &spec.train.labels, spec.train.limit)?;
                let mut test = load_idx(&spec.test.images, &spec.test.labels, spec.test.limit)?.with_split(Split::Test);
                test.classes = train.classes.max(test.classes);
                let mut ood = vec![];
                for o in &spec.ood {
                    let mut d = load_idx(&o.files.images, &o.files.labels, o.files.limit)?.with_split(Split::Ood);
                    d.y.iter_mut().for_each(|y| *y = OOD_LABEL);
                    d.classes = train.classes;
                    ood.push(named(d, &o.name));
                }
                Ok(Benchmark { name, train, test, ood })
            }
        }
    }
}

fn named(mut d: Dataset, name: &str) -> Dataset {
    d.name = name.to_string();
    d
}
