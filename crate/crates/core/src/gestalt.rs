//! Intra- versus cross-object pixel similarity.
//!
//! Intra pairs are two foreground pixels of the same image. Cross pairs take
//! one foreground pixel from each of two different images. Similarities are
//! cosines between RGB triples, or between encoder feature columns when an
//! encoder is supplied.

use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::Encoder;
use crate::episodes::Dataset;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossPairs {
    /// Partner image from the same category.
    SameCategory,
    /// Partner image from another category.
    DifferentCategory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GestaltConfig {
    /// Pairs drawn per image for each statistic.
    pub pairs_per_image: usize,
    pub cross: CrossPairs,
    pub seed: u64,
}

impl Default for GestaltConfig {
    fn default() -> Self {
        GestaltConfig {
            pairs_per_image: 64,
            cross: CrossPairs::SameCategory,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GestaltStats {
    pub intra: f64,
    pub cross: f64,
    pub intra_pairs: usize,
    pub cross_pairs: usize,
    pub skipped_categories: usize,
}

/// Foreground vectors of one image.
fn foreground_vectors(
    ds: &dyn Dataset,
    c: usize,
    i: usize,
    encoder: Option<&Encoder<f32>>,
) -> Result<Vec<Vec<f64>>> {
    let s = ds.load(c, i)?;
    match encoder {
        None => Ok((0..s.mask.height())
            .flat_map(|y| (0..s.mask.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| s.mask.get(y, x) == 1)
            .map(|(y, x)| s.image.pixel(y, x).iter().map(|&v| v as f64).collect())
            .collect()),
        Some(enc) => {
            let f = enc.encode(&s.image)?;
            let m = s.mask.resize_bilinear(f.height(), f.width());
            Ok((0..f.height())
                .flat_map(|y| (0..f.width()).map(move |x| (y, x)))
                .filter(|&(y, x)| m.get(y, x) == 1)
                .map(|(y, x)| f.column(y, x).iter().map(|&v| v as f64).collect())
                .collect())
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn analyze_gestalt(
    ds: &dyn Dataset,
    encoder: Option<&Encoder<f32>>,
    cfg: &GestaltConfig,
) -> Result<GestaltStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache: Vec<Vec<Option<Vec<Vec<f64>>>>> = (0..ds.category_count())
        .map(|c| alloc::vec![None; ds.category_len(c)])
        .collect();
    let mut vectors = |c: usize, i: usize| -> Result<Vec<Vec<f64>>> {
        if cache[c][i].is_none() {
            cache[c][i] = Some(foreground_vectors(ds, c, i, encoder)?);
        }
        Ok(cache[c][i].clone().unwrap_or_default())
    };

    let (mut intra, mut intra_n, mut cross, mut cross_n, mut skipped) = (0.0, 0, 0.0, 0, 0);
    let populated: Vec<usize> = (0..ds.category_count())
        .filter(|&c| ds.category_len(c) > 0)
        .collect();
    for c in 0..ds.category_count() {
        let n = ds.category_len(c);
        if n < 2 {
            skipped += 1;
            continue;
        }
        let others: Vec<usize> = populated.iter().copied().filter(|&o| o != c).collect();
        for i in 0..n {
            let own = vectors(c, i)?;
            if own.is_empty() {
                continue;
            }
            for _ in 0..cfg.pairs_per_image {
                let a = own.choose(&mut rng).unwrap_or(&own[0]);
                let b = own.choose(&mut rng).unwrap_or(&own[0]);
                intra += cosine(a, b);
                intra_n += 1;
            }
            let (pc, pi) = match cfg.cross {
                CrossPairs::SameCategory => {
                    let mut j = rng.random_range(0..n - 1);
                    if j >= i {
                        j += 1;
                    }
                    (c, j)
                }
                CrossPairs::DifferentCategory => match others.choose(&mut rng) {
                    Some(&o) => (o, rng.random_range(0..ds.category_len(o))),
                    None => continue,
                },
            };
            let partner = vectors(pc, pi)?;
            if partner.is_empty() {
                continue;
            }
            for _ in 0..cfg.pairs_per_image {
                let a = own.choose(&mut rng).unwrap_or(&own[0]);
                let b = partner.choose(&mut rng).unwrap_or(&partner[0]);
                cross += cosine(a, b);
                cross_n += 1;
            }
        }
    }
    Ok(GestaltStats {
        intra: if intra_n > 0 {
            intra / intra_n as f64
        } else {
            0.0
        },
        cross: if cross_n > 0 {
            cross / cross_n as f64
        } else {
            0.0
        },
        intra_pairs: intra_n,
        cross_pairs: cross_n,
        skipped_categories: skipped,
    })
}
