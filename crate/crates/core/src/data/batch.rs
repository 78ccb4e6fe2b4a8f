use super::Sample;
use crate::{Error, Result, SeededRng, Tensor};

/// Stacked images `(N, C, H, W)` and masks `(N, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub masks: Tensor,
    /// Dataset index of each stacked sample.
    pub indices: Vec<usize>,
}

/// Stacks the samples at `indices`; all must share a shape.
pub fn stack(samples: &[Sample], indices: &[usize]) -> Result<Batch> {
    let first = samples
        .get(*indices.first().ok_or_else(|| Error::Validation("empty batch".into()))?)
        .ok_or_else(|| Error::Validation("batch index out of range".into()))?;
    let img_shape = first.image.shape().to_vec();
    let mask_shape = first.mask.shape().to_vec();
    let mut images = Vec::with_capacity(indices.len() * first.image.len());
    let mut masks = Vec::with_capacity(indices.len() * first.mask.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Validation(format!("batch index {i} out of range")))?;
        if s.image.shape() != img_shape.as_slice() || s.mask.shape() != mask_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                left: img_shape,
                right: s.image.shape().to_vec(),
            });
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let n = indices.len();
    Ok(Batch {
        images: Tensor::from_parts([vec![n], img_shape].concat(), images),
        masks: Tensor::from_parts([vec![n], mask_shape].concat(), masks),
        indices: indices.to_vec(),
    })
}

/// Endless stream of batches: each pass over the data is freshly shuffled and
/// ends with a short batch when the dataset size is not a multiple of the
/// batch size.
#[derive(Debug)]
pub struct BatchIter<'a> {
    samples: &'a [Sample],
    batch_size: usize,
    rng: SeededRng,
    order: Vec<usize>,
    cursor: usize,
}

pub fn batch_iter(samples: &[Sample], batch_size: usize, shuffle_rng: SeededRng) -> Result<BatchIter<'_>> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be at least 1".into()));
    }
    let mut it = BatchIter {
        samples,
        batch_size,
        rng: shuffle_rng,
        order: (0..samples.len()).collect(),
        cursor: 0,
    };
    it.reshuffle();
    Ok(it)
}

impl BatchIter<'_> {
    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    /// Indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        idx
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let idx = self.next_indices();
        Some(stack(self.samples, &idx).expect("validated dataset"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                image: Tensor::full([1, 2, 2], i as f64 / 10.0),
                mask: Tensor::zeros([2, 2]),
            })
            .collect()
    }

    #[test]
    fn five_by_two() {
        let data = samples(5);
        let sizes: Vec<usize> = batch_iter(&data, 2, SeededRng::new(1))
            .unwrap()
            .take(3)
            .map(|b| b.indices.len())
            .collect();
        assert_eq!(sizes, vec![2, 2, 1]);
    }

    #[test]
    fn pass_covers_dataset_once() {
        let data = samples(7);
        let mut it = batch_iter(&data, 3, SeededRng::new(2)).unwrap();
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..3).flat_map(|_| it.next_indices()).collect();
            seen.sort();
            assert_eq!(seen, (0..7).collect::<Vec<_>>());
        }
    }

    #[test]
    fn same_seed_same_order() {
        let data = samples(9);
        let a: Vec<_> = batch_iter(&data, 2, SeededRng::new(3)).unwrap().take(12).map(|b| b.indices).collect();
        let b: Vec<_> = batch_iter(&data, 2, SeededRng::new(3)).unwrap().take(12).map(|b| b.indices).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn stacking_shapes() {
        let data = samples(3);
        let b = stack(&data, &[2, 0]).unwrap();
        assert_eq!(b.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(b.masks.shape(), &[2, 2, 2]);
        assert_eq!(b.images.data()[0], 0.2);
    }

    #[test]
    fn errors() {
        assert!(batch_iter(&[], 2, SeededRng::new(0)).is_err());
        assert!(batch_iter(&samples(2), 0, SeededRng::new(0)).is_err());
    }
}
