//! PCA projections, silhouette scores, head clustering of the index and
//! average relevance scores.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use prmt_neural::RngState;
use serde::{Deserialize, Serialize};

use crate::data::synth::{DETS, HEADS, MODIFIERS};
use crate::data::{SentenceImagePair, SynthConfig};
use crate::error::{Error, Result};
use crate::grounding::{sentence_phrases, PhraseProvider};
use crate::retrieval::{ars_curve, PhraseEncoder, RetrievalIndex};

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Principal axes as unit rows, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance along every axis (sample variance, `n - 1`), decreasing.
    pub variances: Vec<f64>,
}

impl Pca {
    /// Fits on the rows of `data` via an SVD of the centered matrix.
    pub fn fit(data: &[Vec<f64>]) -> Result<Self> {
        let n = data.len();
        let d = data.first().map_or(0, Vec::len);
        if n < 2 || d == 0 {
            return Err(Error::Analysis("PCA needs at least two non-empty rows".into()));
        }
        if data.iter().any(|r| r.len() != d) {
            return Err(Error::Analysis("PCA rows differ in length".into()));
        }
        let mut mean = vec![0.0; d];
        for r in data {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
        let svd = x.svd(false, true);
        let vt = svd.v_t.ok_or_else(|| Error::Analysis("SVD did not return V".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut components = Vec::with_capacity(order.len());
        let mut variances = Vec::with_capacity(order.len());
        for &k in &order {
            let mut c: Vec<f64> = vt.row(k).iter().copied().collect();
            let pivot = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if pivot < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            components.push(c);
            variances.push(svd.singular_values[k].powi(2) / (n - 1) as f64);
        }
        Ok(Self { mean, components, variances })
    }

    pub fn project(&self, row: &[f64], dims: usize) -> Vec<f64> {
        self.components
            .iter()
            .take(dims)
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient with Euclidean distance. Points in
/// singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::LengthMismatch(format!("{} points for {} labels", points.len(), labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Analysis("silhouette needs at least two clusters".into()));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for (i, p) in points.iter().enumerate() {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (q, &l) in points.iter().zip(labels) {
            sums[l] += euclid(p, q);
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / points.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRow {
    pub kind: String,
    pub head: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    /// Selected heads with their full cluster sizes, largest first.
    pub clusters: Vec<(String, usize)>,
    pub sampled: usize,
    pub silhouette_raw: f64,
    pub silhouette_guided: f64,
    pub projection: Vec<ProjectionRow>,
}

/// Clusters index entries by phrase head, keeps the `top` largest clusters
/// (ties by head), samples up to `per_cluster` entries from each, and
/// compares raw features with phrase-guided representations.
pub fn run_cluster_analysis(index: &RetrievalIndex, top: usize, per_cluster: usize, seed: u64) -> Result<ClusterReport> {
    let mut by_head: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in index.entries().iter().enumerate() {
        by_head.entry(e.head.as_str()).or_default().push(i);
    }
    let mut groups: Vec<(&str, Vec<usize>)> = by_head.into_iter().collect();
    groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));
    groups.truncate(top);
    if groups.len() < 2 {
        return Err(Error::Analysis(format!("{} head clusters; at least two are needed", groups.len())));
    }
    let mut rng = RngState::new(seed);
    let mut picked = Vec::new();
    let mut labels = Vec::new();
    for (c, (_, ids)) in groups.iter().enumerate() {
        let mut ids = ids.clone();
        rng.shuffle(&mut ids);
        ids.truncate(per_cluster);
        ids.sort_unstable();
        labels.extend(std::iter::repeat_n(c, ids.len()));
        picked.extend(ids);
    }
    let raw: Vec<Vec<f64>> = picked.iter().map(|&i| index.entries()[i].feat.clone()).collect();
    let guided: Vec<Vec<f64>> = picked.iter().map(|&i| index.rep(i).to_vec()).collect();
    let silhouette_raw = silhouette(&raw, &labels)?;
    let silhouette_guided = silhouette(&guided, &labels)?;
    let mut projection = Vec::with_capacity(2 * picked.len());
    for (kind, data) in [("raw", &raw), ("guided", &guided)] {
        let pca = Pca::fit(data)?;
        for (row, &l) in data.iter().zip(&labels) {
            let p = pca.project(row, 2);
            projection.push(ProjectionRow {
                kind: kind.into(),
                head: groups[l].0.to_string(),
                x: p[0],
                y: p.get(1).copied().unwrap_or(0.0),
            });
        }
    }
    Ok(ClusterReport {
        clusters: groups.iter().map(|(h, ids)| (h.to_string(), ids.len())).collect(),
        sampled: picked.len(),
        silhouette_raw,
        silhouette_guided,
        projection,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArsRow {
    pub k: usize,
    pub in_domain: f64,
    pub out_domain: f64,
}

/// Phrases of `corpus` as proposed by `provider`.
pub fn corpus_phrases(corpus: &[SentenceImagePair], provider: &dyn PhraseProvider) -> Vec<Vec<String>> {
    corpus
        .iter()
        .flat_map(|p| sentence_phrases(p, provider).into_iter().map(|(_, t)| t))
        .collect()
}

/// Phrases built only from head and modifier words the synthetic world
/// of `cfg` never uses.
pub fn out_of_domain_phrases(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    let heads = &HEADS[cfg.head_classes.min(HEADS.len())..];
    let mods = &MODIFIERS[cfg.modifier_classes.min(MODIFIERS.len())..];
    if heads.is_empty() || mods.is_empty() {
        return Err(Error::Analysis("the synthetic world uses every head and modifier".into()));
    }
    let mut rng = RngState::new(seed);
    Ok((0..count)
        .map(|_| {
            vec![
                DETS[rng.below(DETS.len())].0.to_string(),
                mods[rng.below(mods.len())].0.to_string(),
                heads[rng.below(heads.len())].0.to_string(),
            ]
        })
        .collect())
}

/// `ARS(k)` for `k = 1..=k_max` over two phrase sets.
pub fn run_ars(
    index: &RetrievalIndex,
    encoder: &dyn PhraseEncoder,
    in_domain: &[Vec<String>],
    out_domain: &[Vec<String>],
    k_max: usize,
) -> Result<Vec<ArsRow>> {
    index.check_encoder(encoder)?;
    let embed = |set: &[Vec<String>]| set.iter().map(|p| encoder.encode(p)).collect::<Result<Vec<_>>>();
    let a = ars_curve(&embed(in_domain)?, index, k_max)?;
    let b = ars_curve(&embed(out_domain)?, index, k_max)?;
    Ok((0..k_max).map(|i| ArsRow { k: i + 1, in_domain: a[i], out_domain: b[i] }).collect())
}
