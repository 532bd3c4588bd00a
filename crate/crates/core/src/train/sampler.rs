use super::config::WrongClassMode;
use crate::data::{per_class_text_embedding, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::losses::Batch;
use crate::tensor::{cosine_sim, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub const KMEANS_ITERS: usize = 50;

/// Chooses the wrong class paired with each training row.
#[derive(Clone, Debug)]
pub struct WrongClassSelector {
    mode: WrongClassMode,
    classes: Vec<u32>,
    /// Fixed partner per class for the deterministic modes.
    table: BTreeMap<u32, u32>,
}

impl WrongClassSelector {
    /// Builds any lookup tables from the seen split. `seed` drives the
    /// k-means initialization only.
    pub fn new(ds: &EmbeddingDataset, mode: WrongClassMode, seed: u64) -> Result<Self> {
        let mut classes = ds.seen.clone();
        classes.sort_unstable();
        if classes.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if classes.len() < 2 {
            return Err(Error::SingleClassDataset);
        }
        let table = match mode {
            WrongClassMode::Random => BTreeMap::new(),
            WrongClassMode::MostSimilar => most_similar_table(ds, &classes)?,
            WrongClassMode::Kmeans => kmeans_table(ds, &classes, seed)?,
        };
        Ok(WrongClassSelector { mode, classes, table })
    }

    pub fn mode(&self) -> WrongClassMode {
        self.mode
    }

    pub fn select<R: Rng + ?Sized>(&self, y: u32, rng: &mut R) -> Result<u32> {
        let pos = self
            .classes
            .binary_search(&y)
            .map_err(|_| Error::UnknownClass { class: y })?;
        match self.mode {
            WrongClassMode::Random => {
                let k = rng.random_range(0..self.classes.len() - 1);
                Ok(self.classes[if k >= pos { k + 1 } else { k }])
            }
            _ => Ok(self.table[&y]),
        }
    }
}

/// Argmax over other classes; ties go to the smallest id since `classes`
/// is ascending and only a strictly larger score replaces the best.
fn argmax_other(classes: &[u32], y: u32, score: impl Fn(u32) -> Result<f64>) -> Result<u32> {
    let mut best: Option<(u32, f64)> = None;
    for &c in classes.iter().filter(|&&c| c != y) {
        let s = score(c)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    Ok(best.expect("at least two classes").0)
}

fn most_similar_table(ds: &EmbeddingDataset, classes: &[u32]) -> Result<BTreeMap<u32, u32>> {
    let queries: BTreeMap<u32, Vec<f32>> = classes
        .iter()
        .map(|&c| Ok((c, per_class_text_embedding(ds, c)?.phi_t)))
        .collect::<Result<_>>()?;
    classes
        .iter()
        .map(|&y| {
            let w = argmax_other(classes, y, |c| {
                Ok(cosine_sim(&queries[&y], &queries[&c])? as f64)
            })?;
            Ok((y, w))
        })
        .collect()
}

/// Lloyd's algorithm with `k` distinct random points as initial centroids.
/// Returns the cluster of every row. Empty clusters keep their centroid.
pub fn kmeans(points: &Tensor, k: usize, iters: usize, seed: u64) -> Result<Vec<usize>> {
    let (n, d) = (points.rows(), points.cols());
    if k == 0 || k > n {
        return Err(Error::config("kmeans", format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = sample(&mut rng, n, k)
        .into_iter()
        .map(|i| points.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, a) in assign.iter_mut().enumerate() {
            let p = points.row(i);
            let mut best = (f64::INFINITY, 0);
            for (j, c) in centroids.iter().enumerate() {
                let dist: f64 = p.iter().zip(c).map(|(&x, y)| (x as f64 - y).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            *a = best.1;
        }
        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a].iter_mut().zip(points.row(i)) {
                *s += v as f64;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok(assign)
}

// Partner of y: the class whose images share clusters with y's images most
// often, counted as Σ_k n(k, y)·n(k, c).
fn kmeans_table(ds: &EmbeddingDataset, classes: &[u32], seed: u64) -> Result<BTreeMap<u32, u32>> {
    let idx = ds.seen_indices();
    let points = ds.image_matrix(&idx)?;
    let k = classes.len();
    let assign = kmeans(&points, k, KMEANS_ITERS, seed)?;
    let mut counts: BTreeMap<u32, Vec<f64>> = classes.iter().map(|&c| (c, vec![0.0; k])).collect();
    for (row, &item) in idx.iter().enumerate() {
        counts.get_mut(&ds.items[item].label).unwrap()[assign[row]] += 1.0;
    }
    classes
        .iter()
        .map(|&y| {
            let w = argmax_other(classes, y, |c| {
                Ok(counts[&y].iter().zip(&counts[&c]).map(|(a, b)| a * b).sum())
            })?;
            Ok((y, w))
        })
        .collect()
}

/// A training batch with the labels it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub batch: Batch,
    pub y: Vec<u32>,
    pub y_wrong: Vec<u32>,
    /// Dataset indices of the `img_r` rows.
    pub items: Vec<usize>,
}

/// Draws rows uniformly with replacement from seen-class items.
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    ds: &'a EmbeddingDataset,
    seen_items: Vec<usize>,
    by_class: BTreeMap<u32, Vec<usize>>,
    selector: WrongClassSelector,
}

impl<'a> BatchSampler<'a> {
    pub fn new(ds: &'a EmbeddingDataset, selector: WrongClassSelector) -> Result<Self> {
        let seen_items = ds.seen_indices();
        if seen_items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut by_class = ds.items_by_class();
        by_class.retain(|c, _| ds.seen.contains(c));
        Ok(BatchSampler {
            ds,
            seen_items,
            by_class,
            selector,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<LabeledBatch> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        let mut items = Vec::with_capacity(batch_size);
        let mut wrong_items = Vec::with_capacity(batch_size);
        let mut y = Vec::with_capacity(batch_size);
        let mut y_wrong = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let i = self.seen_items[rng.random_range(0..self.seen_items.len())];
            let label = self.ds.items[i].label;
            let w = self.selector.select(label, rng)?;
            let pool = &self.by_class[&w];
            let j = pool[rng.random_range(0..pool.len())];
            items.push(i);
            wrong_items.push(j);
            y.push(label);
            y_wrong.push(w);
        }
        let batch = Batch {
            phi_r: self.ds.text_matrix(&items)?,
            img_r: self.ds.image_matrix(&items)?,
            phi_w: self.ds.text_matrix(&wrong_items)?,
            img_w: self.ds.image_matrix(&wrong_items)?,
        };
        Ok(LabeledBatch {
            batch,
            y,
            y_wrong,
            items,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Item, SyntheticSpec};

    fn one_hot_world(texts: &[[f32; 3]]) -> EmbeddingDataset {
        let items = texts
            .iter()
            .enumerate()
            .map(|(c, t)| Item {
                image: vec![c as f32, 1.0],
                text: t.to_vec(),
                label: c as u32,
            })
            .collect();
        EmbeddingDataset {
            d_i: 2,
            d_t: 3,
            items,
            seen: (0..texts.len() as u32).collect(),
            unseen: vec![],
        }
    }

    fn synth() -> EmbeddingDataset {
        synth_generate(&SyntheticSpec {
            n_classes: 12,
            n_seen: 8,
            items_per_class: 20,
            d_i: 32,
            d_t: 16,
            image_noise_std: 0.05,
            text_noise_std: 0.05,
            seed: 7,
        })
        .unwrap()
    }

    #[test]
    fn forced_choice_with_two_classes() {
        let ds = one_hot_world(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for mode in [WrongClassMode::Random, WrongClassMode::MostSimilar, WrongClassMode::Kmeans] {
            let s = WrongClassSelector::new(&ds, mode, 1).unwrap();
            for _ in 0..50 {
                assert_eq!(s.select(0, &mut rng).unwrap(), 1);
                assert_eq!(s.select(1, &mut rng).unwrap(), 0);
            }
        }
    }

    #[test]
    fn random_mode_is_uniform() {
        let ds = one_hot_world(&[[1.0, 0.0, 0.0]; 5]);
        let s = WrongClassSelector::new(&ds, WrongClassMode::Random, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            counts[s.select(2, &mut rng).unwrap() as usize] += 1;
        }
        assert_eq!(counts[2], 0);
        for c in [0, 1, 3, 4] {
            let f = counts[c] as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn most_similar_picks_duplicated_direction() {
        let ds = one_hot_world(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 2.0, 0.0]]);
        let s = WrongClassSelector::new(&ds, WrongClassMode::MostSimilar, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s.select(1, &mut rng).unwrap(), 3);
        assert_eq!(s.select(3, &mut rng).unwrap(), 1);
        // all-orthogonal: ties resolved toward the smallest id
        assert_eq!(s.select(0, &mut rng).unwrap(), 1);
        assert_eq!(s.select(2, &mut rng).unwrap(), 0);
    }

    #[test]
    fn single_class_is_rejected() {
        let ds = one_hot_world(&[[1.0, 0.0, 0.0]]);
        assert!(matches!(
            WrongClassSelector::new(&ds, WrongClassMode::Random, 0),
            Err(Error::SingleClassDataset)
        ));
    }

    #[test]
    fn kmeans_separates_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = Vec::new();
        for c in 0..3 {
            for _ in 0..30 {
                data.push(10.0 * c as f32 + rng.random_range(-0.5..0.5));
                data.push(rng.random_range(-0.5..0.5));
            }
        }
        let pts = Tensor::matrix(90, 2, data).unwrap();
        let a = kmeans(&pts, 3, KMEANS_ITERS, 3).unwrap();
        for blob in a.chunks(30) {
            assert!(blob.iter().all(|&x| x == blob[0]));
        }
        assert!(a[0] != a[30] && a[30] != a[60] && a[0] != a[60]);
        assert_eq!(a, kmeans(&pts, 3, KMEANS_ITERS, 3).unwrap());
        assert!(kmeans(&pts, 91, 1, 0).is_err());
    }

    #[test]
    fn kmeans_table_pairs_overlapping_classes() {
        // classes 0 and 1 share one blob, class 2 sits alone
        let mut items = Vec::new();
        for (label, x) in [(0u32, 0.0f32), (1, 0.1), (2, 50.0)] {
            for j in 0..10 {
                items.push(Item {
                    image: vec![x + 0.01 * j as f32, 0.0],
                    text: vec![1.0],
                    label,
                });
            }
        }
        let ds = EmbeddingDataset { d_i: 2, d_t: 1, items, seen: vec![0, 1, 2], unseen: vec![] };
        let s = WrongClassSelector::new(&ds, WrongClassMode::Kmeans, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s.select(0, &mut rng).unwrap(), 1);
        assert_eq!(s.select(1, &mut rng).unwrap(), 0);
    }

    #[test]
    fn batches_respect_class_contract() {
        let ds = synth();
        let sel = WrongClassSelector::new(&ds, WrongClassMode::Random, 0).unwrap();
        let sampler = BatchSampler::new(&ds, sel).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut rows = 0;
        while rows < 100_000 {
            let b = sampler.sample(500, &mut rng).unwrap();
            for (y, w) in b.y.iter().zip(&b.y_wrong) {
                assert_ne!(y, w);
                assert!(ds.seen.contains(y) && ds.seen.contains(w));
            }
            rows += b.y.len();
        }
        let b = sampler.sample(4, &mut rng).unwrap();
        for (r, &i) in b.items.iter().enumerate() {
            assert_eq!(b.batch.img_r.row(r), ds.items[i].image.as_slice());
            assert_eq!(b.batch.phi_r.row(r), ds.items[i].text.as_slice());
        }
        b.batch.validate(ds.d_t, ds.d_i).unwrap();
    }

    #[test]
    fn batches_are_deterministic() {
        let ds = synth();
        for mode in [WrongClassMode::Random, WrongClassMode::MostSimilar, WrongClassMode::Kmeans] {
            let run = || {
                let sel = WrongClassSelector::new(&ds, mode, 2).unwrap();
                let sampler = BatchSampler::new(&ds, sel).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(6);
                (0..3).map(|_| sampler.sample(8, &mut rng).unwrap()).collect::<Vec<_>>()
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn one_item_per_class_rows_are_exact() {
        let ds = one_hot_world(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let sel = WrongClassSelector::new(&ds, WrongClassMode::Random, 0).unwrap();
        let sampler = BatchSampler::new(&ds, sel).unwrap();
        let b = sampler.sample(10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for r in 0..10 {
            let y = b.y[r] as usize;
            assert_eq!(b.batch.img_r.row(r), ds.items[y].image.as_slice());
            assert_eq!(b.batch.img_w.row(r), ds.items[b.y_wrong[r] as usize].image.as_slice());
        }
    }
}
