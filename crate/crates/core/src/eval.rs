//! Retrieval of unseen-class images from a class text embedding, and the
//! rank metrics Prec@k, AP@k and Top-1.

use crate::data::{per_class_text_embedding, ClassQuery, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{cosine_sim, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

/// How the query side of the common space is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QueryMode {
    /// `CSEM(G(z, ĉ_t))`.
    #[default]
    Generated,
    /// The latent code itself, for models trained without the GAN.
    Pivot,
}

/// Denominator of average precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ApVariant {
    /// Number of relevant items found in the top k.
    #[default]
    FoundInTopK,
    /// `min(total relevant, k)`.
    Classical,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalOptions {
    pub k: usize,
    pub seed: u64,
    pub query: QueryMode,
    /// Sample `ĉ_t` from the code instead of taking its mean.
    pub sample_code: bool,
    /// Noise draws averaged into the query embedding.
    pub noise_draws: usize,
    pub ap: ApVariant,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        RetrievalOptions {
            k: 50,
            seed: 0,
            query: QueryMode::Generated,
            sample_code: false,
            noise_draws: 1,
            ap: ApVariant::FoundInTopK,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedRetrieval {
    pub query_class: u32,
    /// `(similarity, item index)`, best first.
    pub entries: Vec<(f64, usize)>,
    pub k: usize,
}

impl RankedRetrieval {
    pub fn hits(&self, relevant: &BTreeSet<usize>) -> Vec<bool> {
        self.entries.iter().map(|(_, i)| relevant.contains(i)).collect()
    }
}

/// Random stream for one query, fixed by the evaluation seed and class id.
pub fn query_rng(seed: u64, class_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class_id as u64);
    rng
}

/// Common-space embedding of a class query.
pub fn query_embedding(model: &ModelParams, query: &ClassQuery, opts: &RetrievalOptions) -> Result<Vec<f32>> {
    let dims = model.dims;
    if query.phi_t.len() != dims.d_t {
        return Err(Error::DimsMismatch(format!(
            "query has width {}, model expects d_t={}",
            query.phi_t.len(),
            dims.d_t
        )));
    }
    let code = model.text_encode(&query.phi_t)?;
    let mut rng = query_rng(opts.seed, query.class_id);
    let c_hat: Vec<f32> = if opts.sample_code {
        let eps = Tensor::randn(&[dims.d_c], 1.0, &mut rng);
        code.mu
            .iter()
            .zip(code.sigma())
            .zip(eps.data())
            .map(|((m, s), e)| m + s * e)
            .collect()
    } else {
        code.mu
    };
    if opts.query == QueryMode::Pivot {
        return Ok(c_hat);
    }
    let draws = opts.noise_draws.max(1);
    let mut acc = vec![0.0f64; dims.d_c];
    for _ in 0..draws {
        let z = Tensor::randn(&[dims.d_z], 1.0, &mut rng);
        let i = model.generate(z.data(), &c_hat)?;
        for (a, v) in acc.iter_mut().zip(model.csem_map(&i)?) {
            *a += v as f64;
        }
    }
    Ok(acc.into_iter().map(|a| (a / draws as f64) as f32).collect())
}

/// Sorts by descending similarity, ties by ascending index, keeps `k`.
pub fn rank(mut scored: Vec<(f64, usize)>, k: usize) -> Vec<(f64, usize)> {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored
}

fn similarities(theta_t: &[f32], thetas: &Tensor, ids: &[usize]) -> Result<Vec<(f64, usize)>> {
    ids.iter()
        .enumerate()
        .map(|(r, &id)| match cosine_sim(theta_t, thetas.row(r)) {
            Ok(s) => Ok((s as f64, id)),
            Err(Error::ZeroVector { side }) => Err(Error::ZeroVector {
                side: if side == "left" {
                    "query (class embedding)".to_string()
                } else {
                    format!("candidate (item {id})")
                },
            }),
            Err(e) => Err(e),
        })
        .collect()
}

fn check_model(model: &ModelParams, ds: &EmbeddingDataset) -> Result<()> {
    let d = model.dims;
    if (d.d_t, d.d_i) != (ds.d_t, ds.d_i) {
        return Err(Error::DimsMismatch(format!(
            "model expects d_t={}, d_i={}; dataset has d_t={}, d_i={}",
            d.d_t, d.d_i, ds.d_t, ds.d_i
        )));
    }
    model.validate()
}

/// Ranks `candidates` (dataset item indices) for one class query.
pub fn retrieve(
    model: &ModelParams,
    ds: &EmbeddingDataset,
    query: &ClassQuery,
    candidates: &[usize],
    opts: &RetrievalOptions,
) -> Result<RankedRetrieval> {
    check_model(model, ds)?;
    if opts.k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let thetas = model.csem_map_batch(&ds.image_matrix(candidates)?)?;
    let theta_t = query_embedding(model, query, opts)?;
    Ok(RankedRetrieval {
        query_class: query.class_id,
        entries: rank(similarities(&theta_t, &thetas, candidates)?, opts.k),
        k: opts.k,
    })
}

/// `|top-k ∩ relevant| / k` over a relevance pattern.
pub fn precision_from_hits(hits: &[bool], k: usize) -> f64 {
    hits.iter().take(k).filter(|&&h| h).count() as f64 / k as f64
}

/// Sum of `Prec@r` over relevant ranks `r ≤ k`, divided per `variant`;
/// 0 when no relevant item is ranked.
pub fn average_precision_from_hits(hits: &[bool], k: usize, total_relevant: usize, variant: ApVariant) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, _) in hits.iter().take(k).enumerate().filter(|(_, &h)| h) {
        found += 1;
        sum += found as f64 / (r + 1) as f64;
    }
    if found == 0 {
        return 0.0;
    }
    let denom = match variant {
        ApVariant::FoundInTopK => found,
        ApVariant::Classical => total_relevant.min(k).max(found),
    };
    sum / denom as f64
}

pub fn precision_at_k(ranked: &RankedRetrieval, relevant: &BTreeSet<usize>) -> f64 {
    precision_from_hits(&ranked.hits(relevant), ranked.k)
}

pub fn average_precision_at_k(ranked: &RankedRetrieval, relevant: &BTreeSet<usize>, variant: ApVariant) -> f64 {
    average_precision_from_hits(&ranked.hits(relevant), ranked.k, relevant.len(), variant)
}

pub fn top1_accuracy(rankings: &[RankedRetrieval], relevant: &[BTreeSet<usize>]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    if rankings.len() != relevant.len() {
        return Err(Error::shape("top1_accuracy", &[rankings.len()], &[relevant.len()]));
    }
    let hits = rankings
        .iter()
        .zip(relevant)
        .filter(|(r, rel)| r.entries.first().is_some_and(|(_, i)| rel.contains(i)))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryMetrics {
    pub class_id: u32,
    pub prec: f64,
    pub ap: f64,
    pub top1_hit: bool,
    /// 1-based ranks within the top k holding a relevant item.
    pub relevant_ranks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub k: usize,
    pub per_query: Vec<QueryMetrics>,
    pub prec: f64,
    pub map: f64,
    pub top1: f64,
}

impl MetricsReport {
    pub fn from_queries(k: usize, per_query: Vec<QueryMetrics>) -> Result<Self> {
        if per_query.is_empty() {
            return Err(Error::EmptyQuerySet);
        }
        let n = per_query.len() as f64;
        let prec = per_query.iter().map(|q| q.prec).sum::<f64>() / n;
        let map = per_query.iter().map(|q| q.ap).sum::<f64>() / n;
        let top1 = per_query.iter().filter(|q| q.top1_hit).count() as f64 / n;
        Ok(MetricsReport { k, per_query, prec, map, top1 })
    }

    pub fn queries(&self) -> usize {
        self.per_query.len()
    }

    pub fn csv(&self) -> String {
        let k = self.k;
        let mut s = format!("class_id,prec_at_{k},ap_at_{k},top1_hit\n");
        for q in &self.per_query {
            let _ = writeln!(s, "{},{},{},{}", q.class_id, q.prec, q.ap, q.top1_hit as u8);
        }
        s
    }

    /// Header and one data row.
    pub fn summary(&self) -> String {
        let k = self.k;
        format!(
            "Q,prec{k},map{k},top1\n{},{},{},{}\n",
            self.queries(),
            self.prec,
            self.map,
            self.top1
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.csv().as_bytes())?;
        Ok(())
    }
}

/// Queries every unseen class against every unseen-split item.
pub fn evaluate(model: &ModelParams, ds: &EmbeddingDataset, opts: &RetrievalOptions) -> Result<MetricsReport> {
    check_model(model, ds)?;
    if ds.unseen.is_empty() {
        return Err(Error::EmptyUnseenSplit);
    }
    if opts.k == 0 {
        return Err(Error::config("k", "must be at least 1"));
    }
    let candidates = ds.unseen_indices();
    let thetas = model.csem_map_batch(&ds.image_matrix(&candidates)?)?;
    let mut classes = ds.unseen.clone();
    classes.sort_unstable();
    let mut per_query = Vec::with_capacity(classes.len());
    for class in classes {
        let query = per_class_text_embedding(ds, class)?;
        let theta_t = query_embedding(model, &query, opts)?;
        let ranked = RankedRetrieval {
            query_class: class,
            entries: rank(similarities(&theta_t, &thetas, &candidates)?, opts.k),
            k: opts.k,
        };
        let relevant: BTreeSet<usize> = candidates
            .iter()
            .copied()
            .filter(|&i| ds.items[i].label == class)
            .collect();
        let hits = ranked.hits(&relevant);
        per_query.push(QueryMetrics {
            class_id: class,
            prec: precision_from_hits(&hits, opts.k),
            ap: average_precision_from_hits(&hits, opts.k, relevant.len(), opts.ap),
            top1_hit: hits.first().copied().unwrap_or(false),
            relevant_ranks: hits
                .iter()
                .enumerate()
                .filter(|(_, &h)| h)
                .map(|(r, _)| r + 1)
                .collect(),
        });
    }
    MetricsReport::from_queries(opts.k, per_query)
}
