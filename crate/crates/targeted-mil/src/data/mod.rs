//! Datasets: IDX image parsing, bag synthesis under the standard
//! multi-instance assumption, synthetic identifiability data, and the
//! TMILDS01 dataset container.

mod bags;
mod container;
mod idx;
mod synthetic;

pub use bags::make_bags;
pub use container::{load_bags, save_bags};
pub use idx::{parse_idx_images, parse_idx_labels, read_maybe_gzipped, IdxImages};
pub use synthetic::{
    make_synthetic_identifiable, make_synthetic_with_mixing, Mixing, SyntheticDataset,
};

use crate::numerics::{NumericsError, Tensor};

/// Errors raised by parsing, synthesis, and dataset persistence.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("bad magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("payload length mismatch: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("label {label} out of range 0–9 at index {index}")]
    LabelOutOfRange { label: u8, index: usize },
    #[error("class {class} absent from pool")]
    ClassAbsent { class: u8 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(
        "identifiability assumption iv requires k_groups ≥ {required} (k·d+1 distinct bags), got {got}"
    )]
    TooFewGroups { required: usize, got: usize },
    #[error("dataset container: {0}")]
    Container(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which source split a pool of instances came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Flat pool of labeled instances (images scaled into [0,1]).
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePool {
    images: Vec<f64>,
    m: usize,
    class_labels: Vec<u8>,
    split: Split,
}

impl InstancePool {
    /// Builds a pool from row-major `[n×m]` pixel data in [0,1].
    pub fn new(
        images: Vec<f64>,
        m: usize,
        class_labels: Vec<u8>,
        split: Split,
    ) -> Result<Self, DataError> {
        if m == 0 || images.len() != m * class_labels.len() {
            return Err(DataError::Truncated {
                expected: m * class_labels.len(),
                got: images.len(),
            });
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::InvalidConfig(format!(
                "pixel value {bad} outside [0,1]"
            )));
        }
        if let Some((i, &l)) = class_labels.iter().enumerate().find(|(_, &l)| l > 9) {
            return Err(DataError::LabelOutOfRange { label: l, index: i });
        }
        Ok(Self {
            images,
            m,
            class_labels,
            split,
        })
    }

    /// Loads a pool from IDX image + label files (gzip accepted).
    pub fn from_idx_files(
        images_path: &std::path::Path,
        labels_path: &std::path::Path,
        split: Split,
    ) -> Result<Self, DataError> {
        let img = parse_idx_images(&read_maybe_gzipped(images_path)?)?;
        let labels = parse_idx_labels(&read_maybe_gzipped(labels_path)?)?;
        if labels.len() != img.n {
            return Err(DataError::Truncated {
                expected: img.n,
                got: labels.len(),
            });
        }
        Self::new(img.pixels, img.rows * img.cols, labels, split)
    }

    pub fn len(&self) -> usize {
        self.class_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_labels.is_empty()
    }

    /// Instance dimensionality m.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn instance(&self, i: usize) -> &[f64] {
        &self.images[i * self.m..(i + 1) * self.m]
    }

    pub fn class_label(&self, i: usize) -> u8 {
        self.class_labels[i]
    }

    /// Indices of instances whose class equals (or differs from) `class`.
    pub fn partition_by_class(&self, class: u8) -> (Vec<usize>, Vec<usize>) {
        let mut of = Vec::new();
        let mut not_of = Vec::new();
        for (i, &l) in self.class_labels.iter().enumerate() {
            if l == class {
                of.push(i);
            } else {
                not_of.push(i);
            }
        }
        (of, not_of)
    }
}

/// One bag: an ordered set of instances, the bag label, and hidden
/// ground-truth instance labels (used for evaluation only).
///
/// The standard multi-instance assumption is enforced by construction: the
/// bag label is derived as the OR over instance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    data: Vec<f64>,
    m: usize,
    bag_label: u8,
    instance_labels: Vec<u8>,
}

impl Bag {
    /// Builds a bag from row-major `[n×m]` instance data and per-instance
    /// labels; the bag label is the OR over instance labels.
    pub fn new(data: Vec<f64>, m: usize, instance_labels: Vec<u8>) -> Result<Self, DataError> {
        let n = instance_labels.len();
        if n == 0 {
            return Err(DataError::InvalidConfig(
                "a bag needs at least one instance".into(),
            ));
        }
        if m == 0 || data.len() != n * m {
            return Err(DataError::Truncated {
                expected: n * m,
                got: data.len(),
            });
        }
        if let Some((i, &l)) = instance_labels.iter().enumerate().find(|(_, &l)| l > 1) {
            return Err(DataError::LabelOutOfRange { label: l, index: i });
        }
        let bag_label = u8::from(instance_labels.contains(&1));
        Ok(Self {
            data,
            m,
            bag_label,
            instance_labels,
        })
    }

    pub fn n_instances(&self) -> usize {
        self.instance_labels.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn bag_label(&self) -> u8 {
        self.bag_label
    }

    /// Ground-truth instance labels. Hidden from training; evaluation only.
    pub fn instance_labels(&self) -> &[u8] {
        &self.instance_labels
    }

    pub fn instance(&self, j: usize) -> &[f64] {
        &self.data[j * self.m..(j + 1) * self.m]
    }

    pub fn instances(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.m)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// All instances as an `[n×m]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n_instances(), self.m], self.data.clone())
            .expect("bag invariants guarantee a valid tensor")
    }
}

/// Parameters that generated a bag dataset (persisted for reproducibility).
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub n_bags: usize,
    pub mean_size: f64,
    pub std_size: f64,
    pub witness_rate: f64,
    pub positive_fraction: f64,
    pub seed: u64,
}

/// A generated bag dataset plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct BagDataset {
    bags: Vec<Bag>,
    target_class: u8,
    config: GenerationConfig,
}

impl BagDataset {
    pub fn new(
        bags: Vec<Bag>,
        target_class: u8,
        config: GenerationConfig,
    ) -> Result<Self, DataError> {
        if bags.is_empty() {
            return Err(DataError::InvalidConfig("dataset has no bags".into()));
        }
        if bags.len() != config.n_bags {
            return Err(DataError::InvalidConfig(format!(
                "config names {} bags but {} were provided",
                config.n_bags,
                bags.len()
            )));
        }
        let m = bags[0].m();
        if bags.iter().any(|b| b.m() != m) {
            return Err(DataError::InvalidConfig(
                "bags disagree on instance dimensionality".into(),
            ));
        }
        Ok(Self {
            bags,
            target_class,
            config,
        })
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn target_class(&self) -> u8 {
        self.target_class
    }

    pub fn config(&self) -> &GenerationConfig {
        &self.config
    }

    /// Instance dimensionality m shared by all bags.
    pub fn m(&self) -> usize {
        self.bags[0].m()
    }
}
