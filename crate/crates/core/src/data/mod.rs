//! Records, the MMT1 container, synthetic data, splits and batching.

mod container;
mod synthetic;

pub use container::{decode, encode, read_container, write_container, HEADER_LEN, MAGIC, VERSION};
pub use synthetic::{
    generate_synthetic, generate_synthetic_with, mmimdb_rates, SyntheticConfig, IMAGE_ONLY, JOINT,
    MMIMDB_GENRE_COUNTS, MMIMDB_RECORDS, TEXT_ONLY,
};

use crate::error::{Error, Result};
use crate::random::{Rng, Stream};
use crate::tensor::{Scalar, Tensor};

pub const TEXT_DIM: usize = 300;
pub const IMAGE_DIM: usize = 4096;
pub const N_CLASSES: usize = 23;

pub const GENRES: [&str; N_CLASSES] = [
    "Action", "Adventure", "Animation", "Biography", "Comedy", "Crime", "Documentary", "Drama",
    "Family", "Fantasy", "Film-Noir", "History", "Horror", "Music", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Short", "Sport", "Thriller", "War", "Western",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub text_emb: Vec<f32>,
    pub image_emb: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Records sharing one schema.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub text_dim: usize,
    pub image_dim: usize,
    pub n_classes: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn empty(text_dim: usize, image_dim: usize, n_classes: usize) -> Self {
        Dataset {
            text_dim,
            image_dim,
            n_classes,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            let dims = [r.text_emb.len(), r.image_emb.len(), r.labels.len()];
            let want = [self.text_dim, self.image_dim, self.n_classes];
            if dims != want {
                return Err(Error::Schema(format!(
                    "record {i} ({}) has dims {dims:?}, header says {want:?}",
                    r.id
                )));
            }
            if r.labels.iter().any(|&b| b > 1) {
                return Err(Error::Schema(format!("record {i} has a non-binary label")));
            }
        }
        Ok(())
    }

    pub fn unlabelled_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.labels.iter().all(|&b| b == 0))
            .count()
    }

    pub(crate) fn warn_unlabelled(&self) {
        let k = self.unlabelled_count();
        if k > 0 {
            log::warn!("{k} of {} records have no positive label", self.len());
        }
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            ..Dataset::empty(self.text_dim, self.image_dim, self.n_classes)
        }
    }

    pub fn label_counts(&self) -> Vec<usize> {
        (0..self.n_classes)
            .map(|c| self.records.iter().filter(|r| r.labels[c] == 1).count())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Seeded shuffle of `0..n` cut into train, validation and test.
///
/// `trainval_frac` of the records (rounded) go to train plus validation and
/// `val_frac` of all records (rounded) of those to validation.
pub fn split_dataset(n: usize, seed: u64, trainval_frac: f64, val_frac: f64) -> Result<DatasetSplit> {
    if n < 3 {
        return Err(Error::contract(format!("cannot split {n} records three ways")));
    }
    if !(trainval_frac > 0.0 && trainval_frac < 1.0 && val_frac > 0.0 && val_frac < trainval_frac) {
        return Err(Error::contract(format!(
            "split fractions {trainval_frac}/{val_frac} must satisfy 0 < val < trainval < 1"
        )));
    }
    let n_trval = ((n as f64 * trainval_frac).round() as usize).clamp(2, n - 1);
    let n_val = ((n as f64 * val_frac).round() as usize).clamp(1, n_trval - 1);
    let mut order: Vec<usize> = (0..n).collect();
    Rng::for_stream(seed, Stream::Split).shuffle(&mut order);
    let test = order.split_off(n_trval);
    let validation = order.split_off(n_trval - n_val);
    Ok(DatasetSplit {
        train: order,
        validation,
        test,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Both,
    TextOnly,
    ImageOnly,
}

/// One minibatch as dense row-major tensors.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub indices: Vec<usize>,
    pub text: Tensor<T>,
    pub image: Tensor<T>,
    pub labels: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn gather(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let b = indices.len();
        let mut text = Vec::with_capacity(b * ds.text_dim);
        let mut image = Vec::with_capacity(b * ds.image_dim);
        let mut labels = Vec::with_capacity(b * ds.n_classes);
        for &i in indices {
            let r = ds
                .records
                .get(i)
                .ok_or_else(|| Error::contract(format!("record index {i} out of range")))?;
            text.extend(r.text_emb.iter().map(|&v| T::lit(v as f64)));
            image.extend(r.image_emb.iter().map(|&v| T::lit(v as f64)));
            labels.extend(r.labels.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Batch {
            indices: indices.to_vec(),
            text: Tensor::new(text, &[b, ds.text_dim])?,
            image: Tensor::new(image, &[b, ds.image_dim])?,
            labels: Tensor::new(labels, &[b, ds.n_classes])?,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn label_bytes(&self) -> Vec<u8> {
        self.labels.data().iter().map(|v| (*v > T::lit(0.5)) as u8).collect()
    }
}

/// One epoch of minibatches over `indices`; the order is shuffled first
/// when an rng is given. The last batch may be short.
pub struct Batches<'a, T: Scalar> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _scalar: std::marker::PhantomData<T>,
}

pub fn batches<'a, T: Scalar>(
    ds: &'a Dataset,
    indices: &[usize],
    batch_size: usize,
    rng: Option<&mut Rng>,
) -> Result<Batches<'a, T>> {
    if batch_size < 1 {
        return Err(Error::contract("batch_size must be at least 1"));
    }
    let mut order = indices.to_vec();
    if let Some(rng) = rng {
        rng.shuffle(&mut order);
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
        _scalar: std::marker::PhantomData,
    })
}

impl<T: Scalar> Batches<'_, T> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch::gather(self.ds, idx))
    }
}
