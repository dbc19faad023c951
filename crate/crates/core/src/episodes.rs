//! Datasets and episode sampling.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image};

/// One annotated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: BinaryMask,
}

impl Sample {
    pub fn new(image: Image, mask: BinaryMask) -> Result<Self> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Shape(format!(
                "image {}x{} and mask {}x{} differ",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(Sample { image, mask })
    }
}

/// Category-indexed collection of annotated images. Categories are
/// addressed by position `0..category_count()`; items within a category by
/// position `0..category_len(c)`.
pub trait Dataset {
    fn domain(&self) -> &str;

    fn category_count(&self) -> usize;

    /// Label-space id of category `c`.
    fn category_id(&self, c: usize) -> u32;

    fn category_name(&self, c: usize) -> String;

    fn category_len(&self, c: usize) -> usize;

    fn load(&self, c: usize, i: usize) -> Result<Sample>;

    fn len(&self) -> usize {
        (0..self.category_count())
            .map(|c| self.category_len(c))
            .sum()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryDataset {
    pub domain: String,
    pub categories: Vec<Category>,
}

impl InMemoryDataset {
    pub fn new(domain: &str, categories: Vec<Category>) -> Self {
        InMemoryDataset {
            domain: String::from(domain),
            categories,
        }
    }

    /// Eagerly copies any dataset into memory.
    pub fn collect(ds: &dyn Dataset) -> Result<Self> {
        let mut categories = Vec::with_capacity(ds.category_count());
        for c in 0..ds.category_count() {
            let samples = (0..ds.category_len(c))
                .map(|i| ds.load(c, i))
                .collect::<Result<Vec<_>>>()?;
            categories.push(Category {
                id: ds.category_id(c),
                name: ds.category_name(c),
                samples,
            });
        }
        Ok(InMemoryDataset::new(ds.domain(), categories))
    }
}

impl Dataset for InMemoryDataset {
    fn domain(&self) -> &str {
        &self.domain
    }

    fn category_count(&self) -> usize {
        self.categories.len()
    }

    fn category_id(&self, c: usize) -> u32 {
        self.categories[c].id
    }

    fn category_name(&self, c: usize) -> String {
        self.categories[c].name.clone()
    }

    fn category_len(&self, c: usize) -> usize {
        self.categories[c].samples.len()
    }

    fn load(&self, c: usize, i: usize) -> Result<Sample> {
        self.categories
            .get(c)
            .and_then(|cat| cat.samples.get(i))
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("no item {i} in category {c}")))
    }
}

/// K supports and a query from one category.
///
/// Fine-tuning episodes carry supports only: the pseudo-query is derived from
/// a support by augmentation, so `query` and `query_mask` are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<Sample>,
    pub query: Option<Image>,
    pub query_mask: Option<BinaryMask>,
    pub category: u32,
    pub domain: String,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }

    pub fn support_masks(&self) -> Vec<BinaryMask> {
        self.support.iter().map(|s| s.mask.clone()).collect()
    }
}

/// Whether a mask keeps at least one foreground pixel once brought to
/// feature resolution.
pub fn survives_downsampling(mask: &BinaryMask, downsample: usize) -> bool {
    let h = mask.height() / downsample.max(1);
    let w = mask.width() / downsample.max(1);
    h > 0 && w > 0 && !mask.resize_bilinear(h, w).is_empty()
}

/// Tries per sampled category before giving up on finding supports whose
/// masks survive downsampling.
pub const MAX_RESAMPLES: usize = 64;

/// Draws a `K`-shot episode: a category uniformly among those holding at
/// least `K + 1` images, then `K + 1` distinct images, the first `K` as
/// supports and the last as query. Draws whose support masks vanish at
/// feature resolution (`downsample`) are rejected and redrawn.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &dyn Dataset,
    k: usize,
    downsample: usize,
    rng: &mut R,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::Sampling(String::from("K must be at least 1")));
    }
    let eligible: Vec<usize> = (0..ds.category_count())
        .filter(|&c| ds.category_len(c) > k)
        .collect();
    if eligible.is_empty() {
        let largest = (0..ds.category_count())
            .map(|c| ds.category_len(c))
            .max()
            .unwrap_or(0);
        return Err(Error::Sampling(format!(
            "{k}-shot episodes need a category with at least {} images, largest has {largest}",
            k + 1
        )));
    }
    let c = eligible[rng.random_range(0..eligible.len())];
    for _ in 0..MAX_RESAMPLES {
        let picks = sample(rng, ds.category_len(c), k + 1).into_vec();
        let support = picks[..k]
            .iter()
            .map(|&i| ds.load(c, i))
            .collect::<Result<Vec<_>>>()?;
        if !support
            .iter()
            .all(|s| survives_downsampling(&s.mask, downsample))
        {
            continue;
        }
        let query = ds.load(c, picks[k])?;
        return Ok(Episode {
            support,
            query: Some(query.image),
            query_mask: Some(query.mask),
            category: ds.category_id(c),
            domain: String::from(ds.domain()),
        });
    }
    Err(Error::Sampling(format!(
        "no usable support set in category {} after {MAX_RESAMPLES} draws",
        ds.category_id(c)
    )))
}

/// Target-domain split: per category, the first `K` items form the
/// annotated support pool, the rest are held-out queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSplit {
    pub shots: usize,
    /// Per category position, the support item indices.
    pub pools: Vec<Vec<usize>>,
    /// Per category position, the held-out query item indices.
    pub queries: Vec<Vec<usize>>,
}

impl SupportSplit {
    pub fn new(ds: &dyn Dataset, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Sampling(String::from("K must be at least 1")));
        }
        let mut pools = Vec::new();
        let mut queries = Vec::new();
        for c in 0..ds.category_count() {
            let n = ds.category_len(c);
            if n < k {
                return Err(Error::Sampling(format!(
                    "category {} has {n} images, fewer than K = {k}",
                    ds.category_id(c)
                )));
            }
            pools.push((0..k).collect());
            queries.push((k..n).collect());
        }
        Ok(SupportSplit {
            shots: k,
            pools,
            queries,
        })
    }

    /// Support-only episode over category position `c`'s pool.
    pub fn finetune_episode(&self, ds: &dyn Dataset, c: usize) -> Result<Episode> {
        let support = self.pools[c]
            .iter()
            .map(|&i| ds.load(c, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Episode {
            support,
            query: None,
            query_mask: None,
            category: ds.category_id(c),
            domain: String::from(ds.domain()),
        })
    }

    /// Every evaluation episode in a fixed order: each category's pool
    /// paired with each of its held-out queries.
    pub fn eval_episodes(&self, ds: &dyn Dataset) -> Result<Vec<Episode>> {
        let mut out = Vec::new();
        for c in 0..ds.category_count() {
            let support = self.pools[c]
                .iter()
                .map(|&i| ds.load(c, i))
                .collect::<Result<Vec<_>>>()?;
            for &q in &self.queries[c] {
                let query = ds.load(c, q)?;
                out.push(Episode {
                    support: support.clone(),
                    query: Some(query.image),
                    query_mask: Some(query.mask),
                    category: ds.category_id(c),
                    domain: String::from(ds.domain()),
                });
            }
        }
        Ok(out)
    }
}
