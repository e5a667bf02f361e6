//! Intra-class pair batch construction: every emitted pair shares a label.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Partition of dataset indices by class id.
#[derive(Clone, Debug, Default)]
pub struct ClassIndex {
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl ClassIndex {
    pub fn members(&self, class: usize) -> &[usize] {
        self.by_class.get(&class).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_class.keys().copied()
    }
}

pub fn build_class_index(labels: &[usize]) -> ClassIndex {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    ClassIndex { by_class }
}

/// Two aligned mini-batches with elementwise-equal labels.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub x_a: Tensor,
    pub x_b: Tensor,
    pub y: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

fn gather(images: &Tensor, indices: &[usize]) -> Tensor {
    let s = images.shape();
    let per = s[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&s[1..]);
    Tensor::new(shape, data).expect("gather shape consistent")
}

/// One epoch of pair batches. B_a enumerates a shuffled permutation of the
/// dataset; each element's partner is drawn uniformly from its own class,
/// excluding the element itself whenever the class has another member.
pub fn sample_pair_batches<R: Rng>(
    images: &Tensor,
    labels: &[usize],
    index: &ClassIndex,
    batch_size: usize,
    drop_last: bool,
    rng: &mut R,
) -> Result<Vec<PairBatch>> {
    if labels.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if images.shape()[0] != labels.len() {
        return Err(Error::Dim(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if drop_last && chunk.len() < batch_size {
            break;
        }
        let mut partners = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let members = index.members(labels[i]);
            let partner = if members.len() <= 1 {
                i
            } else {
                // rejection-free draw from the class minus self
                let pos = members.iter().position(|&m| m == i).expect("index covers i");
                let r = rng.gen_range(0..members.len() - 1);
                members[if r >= pos { r + 1 } else { r }]
            };
            partners.push(partner);
        }
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        debug_assert!(partners.iter().zip(&y).all(|(&p, &c)| labels[p] == c));
        batches.push(PairBatch {
            x_a: gather(images, chunk),
            x_b: gather(images, &partners),
            y,
        });
    }
    Ok(batches)
}

/// Plain shuffled single-branch batches (hard-label and baseline modes).
pub fn sample_plain_batches<R: Rng>(
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
    drop_last: bool,
    rng: &mut R,
) -> Result<Vec<(Tensor, Vec<usize>)>> {
    if labels.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        if drop_last && chunk.len() < batch_size {
            break;
        }
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        batches.push((gather(images, chunk), y));
    }
    Ok(batches)
}
