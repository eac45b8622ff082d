//! Images, meta-splits and the merged pre-training set.

mod augment;
mod io;
mod synth;

pub use augment::{simclr_aug, standard_aug, SimclrAug, StandardAug};
pub use synth::{synth_generate, SynthConfig};

use scl_autodiff::Tensor;

use crate::error::contract;
use crate::kv::KvMap;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn square(channels: usize, side: usize) -> Self {
        Self {
            channels,
            height: side,
            width: side,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One image with values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub label: usize,
}

impl LabeledImage {
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images grouped by class, with disjoint train/val/test class sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaDataset {
    pub shape: ImageShape,
    pub n_classes: usize,
    pub images: Vec<LabeledImage>,
    pub train_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
    /// Generator parameters, kept in the file header.
    pub params: KvMap,
}

impl MetaDataset {
    pub fn classes(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_classes,
            Split::Val => &self.val_classes,
            Split::Test => &self.test_classes,
        }
    }

    /// Image indices of each class, in storage order.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, img) in self.images.iter().enumerate() {
            out[img.label].push(i);
        }
        out
    }

    /// Checks labels, pixel counts and split disjointness.
    pub fn validate(&self) -> Result<()> {
        let n = self.shape.len();
        for (i, img) in self.images.iter().enumerate() {
            if img.pixels.len() != n {
                return Err(contract(format!(
                    "image {i} has {} values, expected {n}",
                    img.pixels.len()
                )));
            }
            if img.label >= self.n_classes {
                return Err(contract(format!(
                    "image {i} has label {} of {}",
                    img.label, self.n_classes
                )));
            }
        }
        let mut owner = vec![None; self.n_classes];
        for (name, split) in [
            ("train", &self.train_classes),
            ("val", &self.val_classes),
            ("test", &self.test_classes),
        ] {
            for &c in split {
                if c >= self.n_classes {
                    return Err(contract(format!("{name} class {c} out of range")));
                }
                if let Some(other) = owner[c].replace(name) {
                    return Err(contract(format!("class {c} is in both {other} and {name}")));
                }
            }
        }
        if self.train_classes.is_empty() || self.test_classes.is_empty() {
            return Err(contract("train and test splits must be nonempty"));
        }
        Ok(())
    }

    /// One task per meta-train class.
    pub fn meta_train_tasks(&self) -> Vec<Vec<LabeledImage>> {
        let groups = self.by_class();
        self.train_classes
            .iter()
            .map(|&c| groups[c].iter().map(|&i| self.images[i].clone()).collect())
            .collect()
    }

    pub fn merged_train(&self) -> MergedDataset {
        merge_tasks(&self.meta_train_tasks(), self.shape)
    }
}

/// All meta-train images with labels re-indexed densely.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedDataset {
    pub shape: ImageShape,
    pub images: Vec<LabeledImage>,
    /// `source_labels[k]` is the original label now called `k`.
    pub source_labels: Vec<usize>,
}

impl MergedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.source_labels.len()
    }
}

/// Concatenates tasks in order and maps the original labels, sorted, onto
/// `0..K`.
pub fn merge_tasks(tasks: &[Vec<LabeledImage>], shape: ImageShape) -> MergedDataset {
    let mut source_labels: Vec<usize> = tasks.iter().flatten().map(|i| i.label).collect();
    source_labels.sort_unstable();
    source_labels.dedup();
    let images = tasks
        .iter()
        .flatten()
        .map(|img| LabeledImage {
            pixels: img.pixels.clone(),
            label: source_labels
                .binary_search(&img.label)
                .expect("label collected above"),
        })
        .collect();
    MergedDataset {
        shape,
        images,
        source_labels,
    }
}

/// Stacks equally sized images into a `[B, C, H, W]` tensor.
pub fn stack(images: &[Vec<f64>], shape: ImageShape) -> Tensor {
    let mut data = Vec::with_capacity(images.len() * shape.len());
    for img in images {
        assert_eq!(img.len(), shape.len(), "image size");
        data.extend_from_slice(img);
    }
    Tensor::new(
        vec![images.len(), shape.channels, shape.height, shape.width],
        data,
    )
    .expect("sizes checked")
}
