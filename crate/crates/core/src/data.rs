//! Dataset ingestion and generation: the bag CSV format, MNIST IDX files,
//! the image-bag generator (positive iff the bag holds a digit 9), a
//! ground-truth-labeled synthetic generator used as a test oracle, and
//! per-feature z-scoring.
//!
//! Loaders and generators are deterministic functions of their inputs and
//! seed; datasets are immutable after construction.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::{Bag, BagLabel};
use crate::tensor::Tensor;

/// Smallest permitted per-feature standard deviation; constant features are
/// clamped here so they normalize to zero instead of dividing by zero.
pub const STD_EPSILON: f64 = 1e-12;

/// Per-feature normalization statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl FeatureStats {
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn feature_dim(&self) -> usize {
        self.mean.len()
    }

    /// Returns a copy of `bag` with every instance z-scored.
    pub fn normalize_bag(&self, bag: &Bag) -> Result<Bag> {
        let shape = bag.instance_shape().to_vec();
        let flat: usize = shape.iter().product();
        if flat != self.mean.len() {
            return Err(Error::Dimension {
                op: "normalize_bag",
                message: format!(
                    "statistics cover {} features but bag instances have shape {shape:?}",
                    self.mean.len()
                ),
            });
        }
        let instances = bag
            .instances()
            .iter()
            .map(|t| {
                let data = t
                    .data()
                    .iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(x, (m, s))| (x - m) / s)
                    .collect();
                Tensor::from_vec(&shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Bag::new(bag.id(), bag.label(), instances)
    }
}

/// Per-feature mean and population std over every instance in `bags`.
/// Features with zero variance get their std clamped to [`STD_EPSILON`].
pub fn fit_normalizer(bags: &[Bag]) -> Result<FeatureStats> {
    let mut count = 0usize;
    let mut dim = None;
    for bag in bags {
        let flat: usize = bag.instance_shape().iter().product();
        match dim {
            None => dim = Some(flat),
            Some(d) if d != flat => {
                return Err(Error::Dimension {
                    op: "fit_normalizer",
                    message: format!("bags mix feature widths {d} and {flat}"),
                })
            }
            _ => {}
        }
        count += bag.len();
    }
    let dim = dim.filter(|_| count > 0).ok_or_else(|| {
        Error::Input("cannot fit a normalizer on zero instances".into())
    })?;

    let mut mean = vec![0.0; dim];
    for bag in bags {
        for t in bag.instances() {
            for (m, x) in mean.iter_mut().zip(t.data()) {
                *m += x;
            }
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; dim];
    for bag in bags {
        for t in bag.instances() {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(t.data()) {
                let d = x - m;
                *v += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_EPSILON))
        .collect();
    Ok(FeatureStats { mean, std })
}

/// Applies `stats` to every bag, returning the normalized copies.
pub fn apply_normalizer(stats: &FeatureStats, bags: &[Bag]) -> Result<Vec<Bag>> {
    bags.iter().map(|b| stats.normalize_bag(b)).collect()
}

/// An immutable collection of bags sharing one instance shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MilDataset {
    bags: Vec<Bag>,
    instance_shape: Vec<usize>,
    source: String,
    /// Ground-truth per-instance tags where the generator knows them: the
    /// digit for image bags, 1 for planted witnesses in synthetic data.
    instance_truth: Option<Vec<Vec<u8>>>,
}

impl MilDataset {
    pub fn new(
        bags: Vec<Bag>,
        source: impl Into<String>,
        instance_truth: Option<Vec<Vec<u8>>>,
    ) -> Result<MilDataset> {
        let first = bags
            .first()
            .ok_or_else(|| Error::Input("dataset has no bags".into()))?;
        let instance_shape = first.instance_shape().to_vec();
        let mut seen = HashMap::new();
        for (i, bag) in bags.iter().enumerate() {
            if bag.instance_shape() != instance_shape.as_slice() {
                return Err(Error::Input(format!(
                    "bag {:?} has instance shape {:?}, expected {:?}",
                    bag.id(),
                    bag.instance_shape(),
                    instance_shape
                )));
            }
            if let Some(prev) = seen.insert(bag.id().to_string(), i) {
                return Err(Error::Input(format!(
                    "duplicate bag id {:?} (bags {prev} and {i})",
                    bag.id()
                )));
            }
        }
        if let Some(truth) = &instance_truth {
            if truth.len() != bags.len()
                || truth.iter().zip(&bags).any(|(t, b)| t.len() != b.len())
            {
                return Err(Error::Input(
                    "instance truth tags do not line up with the bags".into(),
                ));
            }
        }
        Ok(MilDataset {
            bags,
            instance_shape,
            source: source.into(),
            instance_truth,
        })
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn instance_shape(&self) -> &[usize] {
        &self.instance_shape
    }

    /// Flattened feature count per instance.
    pub fn feature_dim(&self) -> usize {
        self.instance_shape.iter().product()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn instance_truth(&self) -> Option<&[Vec<u8>]> {
        self.instance_truth.as_deref()
    }

    pub fn num_positive(&self) -> usize {
        self.bags.iter().filter(|b| b.label().is_positive()).count()
    }

    pub fn num_negative(&self) -> usize {
        self.bags.len() - self.num_positive()
    }
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(0)
}

/// Loads the bag CSV format: header `bag_id,label,f0,...,f{d-1}`, one row per
/// instance, label 1 or -1, instances grouped by bag id in file order.
pub fn load_bag_csv(path: impl AsRef<Path>) -> Result<MilDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(std::io::BufReader::new(file));

    let headers = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.len() < 3 || &headers[0] != "bag_id" || &headers[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header bag_id,label,f0,... with at least one feature, got {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        });
    }
    let dim = headers.len() - 2;

    struct Group {
        id: String,
        label: BagLabel,
        instances: Vec<Tensor>,
    }
    let mut order: Vec<Group> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or_default(),
            message: e.to_string(),
        })?;
        let line = record_line(&record);
        if record.len() != dim + 2 {
            return Err(Error::Parse {
                line,
                message: format!(
                    "row has {} fields, header declares {}",
                    record.len(),
                    dim + 2
                ),
            });
        }
        let id = record[0].to_string();
        let label_raw: i64 = record[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("label {:?} is not an integer", &record[1]),
        })?;
        let label = BagLabel::from_int(label_raw).map_err(|_| Error::Parse {
            line,
            message: format!("label must be 1 or -1, got {label_raw}"),
        })?;
        let mut features = Vec::with_capacity(dim);
        for field in record.iter().skip(2) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("feature {field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("feature {field:?} is not finite"),
                });
            }
            features.push(v);
        }
        let instance = Tensor::from_vec(&[dim], features)?;
        match by_id.get(&id) {
            Some(&idx) => {
                if order[idx].label != label {
                    return Err(Error::Parse {
                        line,
                        message: format!("bag {id:?} appears with conflicting labels"),
                    });
                }
                order[idx].instances.push(instance);
            }
            None => {
                by_id.insert(id.clone(), order.len());
                order.push(Group {
                    id,
                    label,
                    instances: vec![instance],
                });
            }
        }
    }

    if order.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "file contains no instance rows".into(),
        });
    }
    let bags = order
        .into_iter()
        .map(|g| Bag::new(g.id, g.label, g.instances))
        .collect::<Result<Vec<_>>>()?;
    MilDataset::new(bags, path.display().to_string(), None)
}

/// Writes a vector dataset back to the bag CSV format. Inverse of
/// [`load_bag_csv`] up to the source string.
pub fn save_bag_csv(dataset: &MilDataset, path: impl AsRef<Path>) -> Result<()> {
    if dataset.instance_shape().len() != 1 {
        return Err(Error::Input(format!(
            "bag CSV holds flat feature vectors; dataset instances have shape {:?}",
            dataset.instance_shape()
        )));
    }
    let dim = dataset.feature_dim();
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["bag_id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    writer.write_record(&header)?;
    for bag in dataset.bags() {
        for instance in bag.instances() {
            let mut row = vec![bag.id().to_string(), bag.label().as_int().to_string()];
            row.extend(instance.data().iter().map(|v| format!("{v}")));
            writer.write_record(&row)?;
        }
    }
    writer.flush()?;
    Ok(())
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize, path: &Path, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            message: format!("truncated before {what}"),
        })
}

/// Reads a big-endian IDX image/label file pair into `[0, 1]`-scaled image
/// tensors of shape 1 x rows x cols paired with their digit labels.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Vec<(Tensor, u8)>> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io_at(images_path, e))?;
    let magic = read_be_u32(&img_bytes, 0, images_path, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            message: format!("expected image magic {IDX_IMAGES_MAGIC:#010x}, got {magic:#010x}"),
        });
    }
    let count = read_be_u32(&img_bytes, 4, images_path, "image count")? as usize;
    let rows = read_be_u32(&img_bytes, 8, images_path, "row count")? as usize;
    let cols = read_be_u32(&img_bytes, 12, images_path, "column count")? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::Format {
            path: images_path.display().to_string(),
            message: format!(
                "header declares {count} images of {rows}x{cols} ({expected} bytes), file has {}",
                img_bytes.len()
            ),
        });
    }

    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io_at(labels_path, e))?;
    let magic = read_be_u32(&lbl_bytes, 0, labels_path, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            message: format!("expected label magic {IDX_LABELS_MAGIC:#010x}, got {magic:#010x}"),
        });
    }
    let lbl_count = read_be_u32(&lbl_bytes, 4, labels_path, "label count")? as usize;
    if lbl_bytes.len() != 8 + lbl_count {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            message: format!(
                "header declares {lbl_count} labels, file has {} payload bytes",
                lbl_bytes.len().saturating_sub(8)
            ),
        });
    }
    if lbl_count != count {
        return Err(Error::Format {
            path: labels_path.display().to_string(),
            message: format!("{count} images but {lbl_count} labels"),
        });
    }

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let pixels = img_bytes[start..start + rows * cols]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        let digit = lbl_bytes[8 + i];
        if digit > 9 {
            return Err(Error::Format {
                path: labels_path.display().to_string(),
                message: format!("label byte {digit} at index {i} is not a digit"),
            });
        }
        out.push((Tensor::from_vec(&[1, rows, cols], pixels)?, digit));
    }
    Ok(out)
}

/// Generated image bags plus the pool indices each bag was drawn from, so
/// artifacts can reference images by index instead of embedding pixels.
#[derive(Debug, Clone)]
pub struct MnistBags {
    pub dataset: MilDataset,
    pub indices: Vec<Vec<usize>>,
}

fn sample_bag_size(rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> usize {
    let size = normal.sample(rng).round();
    if size < 2.0 {
        2
    } else {
        size as usize
    }
}

/// Builds bags of images drawn from `pool`; a bag is positive iff it contains
/// at least one digit 9.
///
/// Bag sizes follow round(Normal(mean_size, sqrt(variance))) clamped to at
/// least 2. The first ceil(positive_fraction * n_bags) bags are positive:
/// they sample uniformly from the whole pool and, if no 9 was drawn, one
/// uniformly chosen slot is resampled from the 9s. Negative bags sample only
/// from non-9s. Instance digits are retained as ground truth.
pub fn make_mnist_bags(
    pool: &[(Tensor, u8)],
    n_bags: usize,
    mean_size: f64,
    variance: f64,
    positive_fraction: f64,
    seed: u64,
) -> Result<MnistBags> {
    if n_bags == 0 {
        return Err(Error::Input("cannot generate zero bags".into()));
    }
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::Input("positive_fraction must lie in [0, 1]".into()));
    }
    if !(mean_size.is_finite() && mean_size > 0.0) || !(variance.is_finite() && variance >= 0.0) {
        return Err(Error::Input(
            "mean_size must be positive and variance nonnegative".into(),
        ));
    }
    let nines: Vec<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, (_, d))| *d == 9)
        .map(|(i, _)| i)
        .collect();
    let others: Vec<usize> = pool
        .iter()
        .enumerate()
        .filter(|(_, (_, d))| *d != 9)
        .map(|(i, _)| i)
        .collect();
    if nines.is_empty() {
        return Err(Error::Input("image pool contains no digit-9 images".into()));
    }
    if others.is_empty() {
        return Err(Error::Input("image pool contains no non-9 images".into()));
    }

    let n_pos = ((positive_fraction * n_bags as f64).ceil() as usize).min(n_bags);
    let normal = Normal::new(mean_size, variance.sqrt())
        .map_err(|e| Error::Input(format!("bad bag-size distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut bags = Vec::with_capacity(n_bags);
    let mut truth = Vec::with_capacity(n_bags);
    let mut indices = Vec::with_capacity(n_bags);
    for b in 0..n_bags {
        let positive = b < n_pos;
        let size = sample_bag_size(&mut rng, &normal);
        let picks: Vec<usize> = if positive {
            let mut picks: Vec<usize> =
                (0..size).map(|_| rng.random_range(0..pool.len())).collect();
            if !picks.iter().any(|&i| pool[i].1 == 9) {
                let slot = rng.random_range(0..size);
                picks[slot] = nines[rng.random_range(0..nines.len())];
            }
            picks
        } else {
            (0..size)
                .map(|_| others[rng.random_range(0..others.len())])
                .collect()
        };
        let instances: Vec<Tensor> = picks.iter().map(|&i| pool[i].0.clone()).collect();
        let digits: Vec<u8> = picks.iter().map(|&i| pool[i].1).collect();
        let label = if positive {
            BagLabel::Positive
        } else {
            BagLabel::Negative
        };
        bags.push(Bag::new(format!("bag{b:05}"), label, instances)?);
        truth.push(digits);
        indices.push(picks);
    }
    let source = format!(
        "mnist-bags(n={n_bags},mean_size={mean_size},variance={variance},positive_fraction={positive_fraction},seed={seed})"
    );
    Ok(MnistBags {
        dataset: MilDataset::new(bags, source, Some(truth))?,
        indices,
    })
}

/// One bag expressed as indices into an image pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagIndices {
    pub id: String,
    pub label: i64,
    pub indices: Vec<usize>,
}

/// Rebuilds image bags from pool indices (the inverse of writing a generated
/// bag set out as index manifests).
pub fn materialize_bags(
    pool: &[(Tensor, u8)],
    specs: &[BagIndices],
    source: impl Into<String>,
) -> Result<MilDataset> {
    let mut bags = Vec::with_capacity(specs.len());
    let mut truth = Vec::with_capacity(specs.len());
    for spec in specs {
        let label = BagLabel::from_int(spec.label)?;
        let mut instances = Vec::with_capacity(spec.indices.len());
        let mut digits = Vec::with_capacity(spec.indices.len());
        for &i in &spec.indices {
            let (image, digit) = pool.get(i).ok_or_else(|| {
                Error::Input(format!(
                    "bag {:?} references image {i} but the pool has {}",
                    spec.id,
                    pool.len()
                ))
            })?;
            instances.push(image.clone());
            digits.push(*digit);
        }
        bags.push(Bag::new(spec.id.clone(), label, instances)?);
        truth.push(digits);
    }
    MilDataset::new(bags, source, Some(truth))
}

/// Synthetic vector MIL data with known ground truth, used as a test oracle.
///
/// Background instances are standard normal in `d` dimensions. Each positive
/// bag plants Binomial(size, witness_rate) witnesses (at least one) whose
/// first coordinate is shifted by `separation`. Bag sizes follow the same
/// clamped rounded Normal(10, sqrt(2)) as the image-bag generator. Witness
/// positions are tagged 1 in the dataset's instance truth.
pub fn gen_synthetic(
    n_pos: usize,
    n_neg: usize,
    d: usize,
    separation: f64,
    witness_rate: f64,
    seed: u64,
) -> Result<MilDataset> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input(
            "synthetic data needs at least one bag of each class".into(),
        ));
    }
    if d == 0 {
        return Err(Error::Input("feature dimension must be positive".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Input("separation must be nonnegative".into()));
    }
    if !(witness_rate > 0.0 && witness_rate <= 1.0) {
        return Err(Error::Input("witness_rate must lie in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size_dist = Normal::new(10.0, 2.0_f64.sqrt()).expect("valid distribution");

    let draw_instance = |rng: &mut ChaCha8Rng, witness: bool| -> Tensor {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if witness {
            v[0] += separation;
        }
        Tensor::from_vec(&[d], v).expect("length matches by construction")
    };

    let mut bags = Vec::with_capacity(n_pos + n_neg);
    let mut truth = Vec::with_capacity(n_pos + n_neg);
    for b in 0..n_pos {
        let size = sample_bag_size(&mut rng, &size_dist);
        let witnesses = Binomial::new(size as u64, witness_rate)
            .map_err(|e| Error::Input(format!("bad witness distribution: {e}")))?
            .sample(&mut rng)
            .max(1) as usize;
        let mut is_witness = vec![false; size];
        for slot in index::sample(&mut rng, size, witnesses) {
            is_witness[slot] = true;
        }
        let instances: Vec<Tensor> = is_witness
            .iter()
            .map(|&w| draw_instance(&mut rng, w))
            .collect();
        bags.push(Bag::new(format!("p{b:04}"), BagLabel::Positive, instances)?);
        truth.push(is_witness.iter().map(|&w| u8::from(w)).collect());
    }
    for b in 0..n_neg {
        let size = sample_bag_size(&mut rng, &size_dist);
        let instances: Vec<Tensor> = (0..size).map(|_| draw_instance(&mut rng, false)).collect();
        bags.push(Bag::new(format!("n{b:04}"), BagLabel::Negative, instances)?);
        truth.push(vec![0; size]);
    }
    let source = format!(
        "synthetic(n_pos={n_pos},n_neg={n_neg},d={d},separation={separation},witness_rate={witness_rate},seed={seed})"
    );
    MilDataset::new(bags, source, Some(truth))
}
