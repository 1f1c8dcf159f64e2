//! Labeled feature vectors plus the partitioning schemes that hand
//! disjoint shards to devices.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::math::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(SimError::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(SimError::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = features.first() {
            let dim = first.len();
            if features.iter().any(|f| f.len() != dim) {
                return Err(SimError::InvalidArgument("ragged feature rows".into()));
            }
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Load from header-free CSV rows of the form `label,f1,...,fk`.
    /// Ragged rows, non-integer labels and non-finite features are
    /// rejected.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut csv = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(reader);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (row, record) in csv.records().enumerate() {
            let record = record.map_err(|e| SimError::Parse(format!("row {}: {e}", row + 1)))?;
            if record.len() < 2 {
                return Err(SimError::Parse(format!(
                    "row {}: need a label and at least one feature",
                    row + 1
                )));
            }
            let label: usize = record[0].trim().parse().map_err(|_| {
                SimError::Parse(format!("row {}: bad label {:?}", row + 1, &record[0]))
            })?;
            let mut feat = Vec::with_capacity(record.len() - 1);
            for field in record.iter().skip(1) {
                let v: f64 = field.trim().parse().map_err(|_| {
                    SimError::Parse(format!("row {}: bad feature {field:?}", row + 1))
                })?;
                if !v.is_finite() {
                    return Err(SimError::Parse(format!(
                        "row {}: non-finite feature",
                        row + 1
                    )));
                }
                feat.push(v);
            }
            labels.push(label);
            features.push(feat);
        }
        if labels.is_empty() {
            return Err(SimError::Parse("empty dataset".into()));
        }
        let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
        Dataset::new(features, labels, num_classes)
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Dataset::from_csv_reader(file)
    }
}

/// How training data is spread across devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PartitionMode {
    Iid,
    LabelSkew { classes_per_device: usize },
}

/// Split `data` into `n_devices` disjoint shards covering all of it.
///
/// `Iid` is a uniform random near-equal split. `LabelSkew` gives each
/// device exactly `classes_per_device` classes, assigned round-robin
/// over a random class permutation, with each class's samples divided
/// evenly among the devices that hold it.
pub fn partition(
    data: &Dataset,
    n_devices: usize,
    mode: PartitionMode,
    stream: RngStream,
) -> Result<Vec<Dataset>> {
    if n_devices == 0 {
        return Err(SimError::InvalidArgument(
            "n_devices must be positive".into(),
        ));
    }
    if data.len() < n_devices {
        return Err(SimError::InvalidArgument(format!(
            "{} samples cannot cover {n_devices} devices",
            data.len()
        )));
    }
    match mode {
        PartitionMode::Iid => {
            let mut indices: Vec<usize> = (0..data.len()).collect();
            indices.shuffle(&mut stream.rng());
            Ok(chunk_even(&indices, n_devices)
                .into_iter()
                .map(|chunk| data.subset(&chunk))
                .collect())
        }
        PartitionMode::LabelSkew { classes_per_device } => {
            partition_label_skew(data, n_devices, classes_per_device, stream)
        }
    }
}

fn partition_label_skew(
    data: &Dataset,
    n_devices: usize,
    classes_per_device: usize,
    stream: RngStream,
) -> Result<Vec<Dataset>> {
    let num_classes = data.num_classes();
    if classes_per_device == 0 || classes_per_device > num_classes {
        return Err(SimError::InvalidArgument(format!(
            "classes_per_device = {classes_per_device} outside 1..={num_classes}"
        )));
    }
    if classes_per_device * n_devices < num_classes {
        return Err(SimError::InvalidArgument(format!(
            "{n_devices} devices with {classes_per_device} classes each cannot cover {num_classes} classes"
        )));
    }

    let mut perm: Vec<usize> = (0..num_classes).collect();
    perm.shuffle(&mut stream.child(0).rng());

    // Device i holds the classes at round-robin slots i*cpd .. (i+1)*cpd.
    let mut owners: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for dev in 0..n_devices {
        for j in 0..classes_per_device {
            let class = perm[(dev * classes_per_device + j) % num_classes];
            owners[class].push(dev);
        }
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for i in 0..data.len() {
        by_class[data.label(i)].push(i);
    }

    let mut shard_indices: Vec<Vec<usize>> = vec![Vec::new(); n_devices];
    for (class, samples) in by_class.iter().enumerate() {
        let holders = &owners[class];
        if holders.is_empty() {
            continue;
        }
        if samples.len() < holders.len() {
            return Err(SimError::InvalidArgument(format!(
                "class {class} has {} samples for {} holders",
                samples.len(),
                holders.len()
            )));
        }
        let mut shuffled = samples.clone();
        shuffled.shuffle(&mut stream.child(1 + class as u64).rng());
        for (chunk, &dev) in chunk_even(&shuffled, holders.len()).iter().zip(holders) {
            shard_indices[dev].extend_from_slice(chunk);
        }
    }

    Ok(shard_indices
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            data.subset(&idx)
        })
        .collect())
}

// Near-equal contiguous chunks; first (len % n) chunks get one extra.
fn chunk_even(indices: &[usize], n: usize) -> Vec<Vec<usize>> {
    let base = indices.len() / n;
    let extra = indices.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut at = 0;
    for i in 0..n {
        let take = base + usize::from(i < extra);
        out.push(indices[at..at + take].to_vec());
        at += take;
    }
    out
}

/// Gaussian class-conditional clusters: class c is centered on a random
/// unit vector scaled by `separation`, with isotropic unit variance and
/// balanced classes (sample i belongs to class i mod num_classes).
pub fn synthesize_dataset(
    num_classes: usize,
    samples: usize,
    dim: usize,
    separation: f64,
    stream: RngStream,
) -> Result<Dataset> {
    if num_classes == 0 || dim == 0 {
        return Err(SimError::InvalidArgument(
            "num_classes and dim must be positive".into(),
        ));
    }
    if samples < num_classes {
        return Err(SimError::InvalidArgument(format!(
            "{samples} samples cannot cover {num_classes} classes"
        )));
    }
    let mut mean_rng = stream.child(0).rng();
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim)
                .map(|_| mean_rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * separation).collect()
        })
        .collect();

    let mut sample_rng = stream.child(1).rng();
    let mut features = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % num_classes;
        let x: Vec<f64> = means[class]
            .iter()
            .map(|&m| m + sample_rng.sample::<f64, _>(StandardNormal))
            .collect();
        features.push(x);
        labels.push(class);
    }
    Dataset::new(features, labels, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny(n: usize, classes: usize) -> Dataset {
        let features = (0..n).map(|i| vec![i as f64]).collect();
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new(features, labels, classes).unwrap()
    }

    fn union_is_disjoint_cover(data: &Dataset, shards: &[Dataset]) {
        let mut seen = HashSet::new();
        for shard in shards {
            for i in 0..shard.len() {
                let key = format!("{:?}", shard.feature(i));
                assert!(seen.insert(key), "duplicate sample across shards");
            }
        }
        assert_eq!(seen.len(), data.len());
    }

    #[test]
    fn iid_partition_equal_disjoint() {
        let data = tiny(100, 10);
        let shards = partition(&data, 10, PartitionMode::Iid, RngStream::new(1)).unwrap();
        assert_eq!(shards.len(), 10);
        assert!(shards.iter().all(|s| s.len() == 10));
        union_is_disjoint_cover(&data, &shards);
    }

    #[test]
    fn label_skew_coverage_counts() {
        // 10 classes, 2 per device, 20 devices: every class lands in
        // exactly 4 shards.
        let data = tiny(400, 10);
        let shards = partition(
            &data,
            20,
            PartitionMode::LabelSkew {
                classes_per_device: 2,
            },
            RngStream::new(2),
        )
        .unwrap();
        for class in 0..10 {
            let holders = shards
                .iter()
                .filter(|s| s.labels().contains(&class))
                .count();
            assert_eq!(holders, 4, "class {class}");
        }
        for shard in &shards {
            let distinct: HashSet<_> = shard.labels().iter().collect();
            assert_eq!(distinct.len(), 2);
        }
        union_is_disjoint_cover(&data, &shards);
    }

    #[test]
    fn partition_is_deterministic() {
        let data = tiny(60, 3);
        let a = partition(&data, 4, PartitionMode::Iid, RngStream::new(9)).unwrap();
        let b = partition(&data, 4, PartitionMode::Iid, RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        let c = partition(&data, 4, PartitionMode::Iid, RngStream::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_skew_rejects_impossible_splits() {
        let data = tiny(40, 10);
        // 3 devices x 2 classes < 10 classes.
        assert!(partition(
            &data,
            3,
            PartitionMode::LabelSkew {
                classes_per_device: 2
            },
            RngStream::new(3)
        )
        .is_err());
        // One sample per class cannot feed 4 holders of some class.
        let scarce = tiny(10, 10);
        assert!(partition(
            &scarce,
            20,
            PartitionMode::LabelSkew {
                classes_per_device: 2
            },
            RngStream::new(4)
        )
        .is_err());
    }

    #[test]
    fn synthesize_is_deterministic_and_balanced() {
        let a = synthesize_dataset(10, 105, 20, 3.0, RngStream::new(5)).unwrap();
        let b = synthesize_dataset(10, 105, 20, 3.0, RngStream::new(5)).unwrap();
        assert_eq!(a, b);
        for class in 0..10 {
            let count = a.labels().iter().filter(|&&l| l == class).count();
            assert!((10..=11).contains(&count));
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let good = "1,0.5,2.25\n0,-1.5,3\n2,0.0,1e-3\n";
        let data = Dataset::from_csv_reader(good.as_bytes()).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.num_classes(), 3);
        assert_eq!(data.feature(0), &[0.5, 2.25]);

        let ragged = "1,0.5,2.25\n0,-1.5\n";
        assert!(Dataset::from_csv_reader(ragged.as_bytes()).is_err());

        let bad_label = "x,0.5\n";
        assert!(Dataset::from_csv_reader(bad_label.as_bytes()).is_err());

        let bad_feature = "0,abc\n";
        assert!(Dataset::from_csv_reader(bad_feature.as_bytes()).is_err());
    }
}
