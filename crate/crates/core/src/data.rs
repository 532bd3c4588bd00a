//! Embedding datasets, the `ZSED` container and the synthetic world.

use crate::binio::{put_f32s, put_len, put_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::{cosine_sim, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

const MAGIC: &[u8; 4] = b"ZSED";
pub const DATASET_VERSION: u32 = 1;
const MAX_CENTER_REJECTIONS: usize = 100_000;
const MAX_CENTER_COSINE: f64 = 0.7;

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub image: Vec<f32>,
    pub text: Vec<f32>,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    pub d_i: usize,
    pub d_t: usize,
    pub items: Vec<Item>,
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
}

/// Per-class query text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassQuery {
    pub class_id: u32,
    pub phi_t: Vec<f32>,
}

impl EmbeddingDataset {
    pub fn class_count(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }

    /// Item indices grouped by label, classes in ascending id order.
    pub fn items_by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, it) in self.items.iter().enumerate() {
            out.entry(it.label).or_default().push(i);
        }
        out
    }

    pub fn indices_of(&self, classes: &[u32]) -> Vec<usize> {
        let set: BTreeSet<u32> = classes.iter().copied().collect();
        (0..self.items.len())
            .filter(|&i| set.contains(&self.items[i].label))
            .collect()
    }

    pub fn seen_indices(&self) -> Vec<usize> {
        self.indices_of(&self.seen)
    }

    pub fn unseen_indices(&self) -> Vec<usize> {
        self.indices_of(&self.unseen)
    }

    /// Stacks the image embeddings of `indices` into `[n × d_i]`.
    pub fn image_matrix(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.d_i);
        for &i in indices {
            data.extend_from_slice(&self.items[i].image);
        }
        Tensor::matrix(indices.len(), self.d_i, data)
    }

    pub fn text_matrix(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.d_t);
        for &i in indices {
            data.extend_from_slice(&self.items[i].text);
        }
        Tensor::matrix(indices.len(), self.d_t, data)
    }
}

/// Checks disjoint splits, known labels, non-empty classes and vector widths.
pub fn validate_split(ds: &EmbeddingDataset) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &c in &ds.seen {
        if !seen.insert(c) {
            return Err(Error::Format(format!("class {c} listed twice in the seen split")));
        }
    }
    let mut unseen = BTreeSet::new();
    for &c in &ds.unseen {
        if seen.contains(&c) {
            return Err(Error::SplitOverlap { class: c });
        }
        if !unseen.insert(c) {
            return Err(Error::Format(format!("class {c} listed twice in the unseen split")));
        }
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for (i, it) in ds.items.iter().enumerate() {
        if !seen.contains(&it.label) && !unseen.contains(&it.label) {
            return Err(Error::DanglingLabel { item: i, label: it.label });
        }
        if it.image.len() != ds.d_i || it.text.len() != ds.d_t {
            return Err(Error::DimsMismatch(format!(
                "item {i} has widths ({}, {}), dataset declares ({}, {})",
                it.image.len(),
                it.text.len(),
                ds.d_i,
                ds.d_t
            )));
        }
        *counts.entry(it.label).or_default() += 1;
    }
    for &c in seen.iter().chain(unseen.iter()) {
        if !counts.contains_key(&c) {
            return Err(Error::EmptyClass { class: c });
        }
    }
    Ok(())
}

/// Mean of the text embeddings of every item in `class_id`.
pub fn per_class_text_embedding(ds: &EmbeddingDataset, class_id: u32) -> Result<ClassQuery> {
    let mut acc = vec![0.0f64; ds.d_t];
    let mut n = 0usize;
    for it in ds.items.iter().filter(|it| it.label == class_id) {
        for (a, &v) in acc.iter_mut().zip(&it.text) {
            *a += v as f64;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::UnknownClass { class: class_id });
    }
    Ok(ClassQuery {
        class_id,
        phi_t: acc.into_iter().map(|a| (a / n as f64) as f32).collect(),
    })
}

pub fn encode_dataset(ds: &EmbeddingDataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32 + ds.items.len() * 4 * (1 + ds.d_i + ds.d_t));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, DATASET_VERSION);
    put_len(&mut out, ds.d_i, "d_i")?;
    put_len(&mut out, ds.d_t, "d_t")?;
    put_len(&mut out, ds.items.len(), "item count")?;
    put_len(&mut out, ds.class_count(), "class count")?;
    for split in [&ds.seen, &ds.unseen] {
        put_len(&mut out, split.len(), "split size")?;
        for &c in split {
            put_u32(&mut out, c);
        }
    }
    for it in &ds.items {
        if it.image.len() != ds.d_i || it.text.len() != ds.d_t {
            return Err(Error::DimsMismatch("item width differs from dataset header".into()));
        }
        put_u32(&mut out, it.label);
        put_f32s(&mut out, &it.image);
        put_f32s(&mut out, &it.text);
    }
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<EmbeddingDataset> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let d_i = r.len("d_i")?;
    let d_t = r.len("d_t")?;
    let n_items = r.len("item count")?;
    let class_count = r.len("class count")?;
    let mut splits = Vec::with_capacity(2);
    for name in ["seen split", "unseen split"] {
        let n = r.len(name)?;
        if n > r.remaining() / 4 {
            return Err(Error::Format(format!("{name} size {n} exceeds file length")));
        }
        let ids = (0..n).map(|_| r.u32(name)).collect::<Result<Vec<u32>>>()?;
        splits.push(ids);
    }
    let unseen = splits.pop().unwrap();
    let seen = splits.pop().unwrap();
    if seen.len() + unseen.len() != class_count {
        return Err(Error::Format(format!(
            "class count {class_count} does not match split sizes {} + {}",
            seen.len(),
            unseen.len()
        )));
    }
    let record = 4 * (1 + d_i + d_t);
    if n_items.checked_mul(record) != Some(r.remaining()) {
        return Err(Error::Format(format!(
            "expected {n_items} item records of {record} bytes, found {} bytes",
            r.remaining()
        )));
    }
    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let label = r.u32("label")?;
        let image = r.f32s(d_i, "image embedding")?;
        let text = r.f32s(d_t, "text embedding")?;
        items.push(Item { image, text, label });
    }
    let ds = EmbeddingDataset {
        d_i,
        d_t,
        items,
        seen,
        unseen,
    };
    validate_split(&ds)?;
    Ok(ds)
}

pub fn save_dataset(ds: &EmbeddingDataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    decode_dataset(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_seen: usize,
    pub items_per_class: usize,
    pub d_i: usize,
    pub d_t: usize,
    pub image_noise_std: f64,
    pub text_noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::SpecInvalid(m.to_string()));
        if self.n_seen < 1 || self.n_seen >= self.n_classes {
            return bad("need 1 <= seen < classes");
        }
        if self.items_per_class < 1 {
            return bad("items per class must be at least 1");
        }
        if self.d_i < 1 || self.d_t < 1 {
            return bad("embedding widths must be positive");
        }
        if u32::try_from(self.n_classes).is_err() {
            return bad("too many classes");
        }
        for (name, s) in [("image", self.image_noise_std), ("text", self.text_noise_std)] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(&format!("{name} noise std must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Builds a world with unit image centers `c_y`, items
/// `relu(c_y + noise)` and texts `A·c_y + noise` for one shared `A`.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<EmbeddingDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0f64, 1.0).unwrap();
    let a_scale = 1.0 / (spec.d_t as f64).sqrt();
    let a: Vec<f64> = (0..spec.d_t * spec.d_i)
        .map(|_| std_normal.sample(&mut rng) * a_scale)
        .collect();

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    let mut rejections = 0usize;
    while centers.len() < spec.n_classes {
        let mut c: Vec<f64> = (0..spec.d_i).map(|_| std_normal.sample(&mut rng)).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            continue;
        }
        c.iter_mut().for_each(|v| *v /= norm);
        let far = centers
            .iter()
            .all(|o| cosine_sim(o, &c).is_ok_and(|s| s < MAX_CENTER_COSINE));
        if far {
            centers.push(c);
        } else {
            rejections += 1;
            if rejections >= MAX_CENTER_REJECTIONS {
                return Err(Error::CenterSamplingFailed { attempts: rejections });
            }
        }
    }

    let texts: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| {
            (0..spec.d_t)
                .map(|r| (0..spec.d_i).map(|k| a[r * spec.d_i + k] * c[k]).sum())
                .collect()
        })
        .collect();

    let mut items = Vec::with_capacity(spec.n_classes * spec.items_per_class);
    for (y, (c, t)) in centers.iter().zip(&texts).enumerate() {
        for _ in 0..spec.items_per_class {
            let image = c
                .iter()
                .map(|&v| (v + spec.image_noise_std * std_normal.sample(&mut rng)).max(0.0) as f32)
                .collect();
            let text = t
                .iter()
                .map(|&v| (v + spec.text_noise_std * std_normal.sample(&mut rng)) as f32)
                .collect();
            items.push(Item {
                image,
                text,
                label: y as u32,
            });
        }
    }
    let ds = EmbeddingDataset {
        d_i: spec.d_i,
        d_t: spec.d_t,
        items,
        seen: (0..spec.n_seen as u32).collect(),
        unseen: (spec.n_seen as u32..spec.n_classes as u32).collect(),
    };
    validate_split(&ds)?;
    Ok(ds)
}
