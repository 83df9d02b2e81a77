//! Easy-to-hard grouping of classes: class centroids of pseudo-labeled
//! target embeddings, size-constrained K-Means over them, and clusters
//! ranked by mean image–text similarity.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAX_ROUNDS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroid {
    pub class: usize,
    pub centroid: Vec<f64>,
    pub support: usize,
}

/// Mean embedding per pseudo-label class. Classes without samples fall
/// back to row `k` of `surrogates` (the class text embedding).
pub fn class_centroids<T: Scalar>(
    embeddings: &Tensor<T>,
    labels: &[usize],
    surrogates: &Tensor<T>,
) -> Result<Vec<ClassCentroid>> {
    let k = surrogates.rows();
    let d = embeddings.cols();
    if labels.len() != embeddings.rows() || surrogates.cols() != d {
        return Err(Error::Contract(format!(
            "{} labels for {:?} embeddings with surrogates {:?}",
            labels.len(),
            embeddings.shape(),
            surrogates.shape()
        )));
    }
    let mut sums = vec![vec![0.0f64; d]; k];
    let mut support = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("label {y} outside 0..{k}")));
        }
        for (s, v) in sums[y].iter_mut().zip(embeddings.row(i)) {
            *s += v.as_f64();
        }
        support[y] += 1;
    }
    Ok((0..k)
        .map(|c| ClassCentroid {
            class: c,
            centroid: if support[c] == 0 {
                surrogates.row(c).iter().map(|v| v.as_f64()).collect()
            } else {
                sums[c].iter().map(|s| s / support[c] as f64).collect()
            },
            support: support[c],
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum over clusters of squared distances to the cluster mean.
pub fn within_cluster_cost(points: &[Vec<f64>], clusters: &[Vec<usize>]) -> f64 {
    clusters
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| {
            let d = points[c[0]].len();
            let mut mean = vec![0.0; d];
            for &i in c {
                mean.iter_mut().zip(&points[i]).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= c.len() as f64);
            c.iter().map(|&i| sq_dist(&points[i], &mean)).sum::<f64>()
        })
        .sum()
}

fn kmeans_pp<R: Rng + ?Sized>(points: &[Vec<f64>], t: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < t {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut j = 0;
            while j + 1 < d2.len() && u >= d2[j] {
                u -= d2[j];
                j += 1;
            }
            j
        } else {
            // all remaining mass is zero: duplicates only
            rng.random_range(0..points.len())
        };
        centers.push(points[pick].clone());
    }
    centers
}

/// One run of capacity-constrained Lloyd iterations from `centers`.
fn constrained_lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> Vec<usize> {
    let k = points.len();
    let t = centers.len();
    let cap = k.div_ceil(t);
    let mut assign = vec![usize::MAX; k];
    for _ in 0..MAX_ROUNDS {
        let mut next = vec![0usize; k];
        let mut sizes = vec![0usize; t];
        for (i, p) in points.iter().enumerate() {
            let mut ranked: Vec<usize> = (0..t).collect();
            ranked.sort_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])).then(a.cmp(&b)));
            let c = ranked
                .into_iter()
                .find(|&c| sizes[c] < cap)
                .expect("total capacity covers every point");
            next[i] = c;
            sizes[c] += 1;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = (0..k).filter(|&i| next[i] == c).map(|i| &points[i]).collect();
            if members.is_empty() {
                continue;
            }
            let mut m = vec![0.0; center.len()];
            for p in &members {
                m.iter_mut().zip(p.iter()).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= members.len() as f64);
            *center = m;
        }
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

fn cluster_cost(points: &[Vec<f64>], members: &[usize]) -> f64 {
    within_cluster_cost(points, std::slice::from_ref(&members.to_vec()))
}

/// Local search after Lloyd: applies the best single move (into a
/// cluster with spare capacity) or pairwise swap until none lowers the
/// within-cluster cost. Lloyd's ordered greedy assignment can stall in
/// partitions that one exchange fixes.
struct Exchange {
    gain: f64,
    from: usize,
    to: usize,
    /// Position in `from`.
    i: usize,
    /// Swap partner position in `to`, or `None` for a plain move.
    j: Option<usize>,
    costs: (f64, f64),
}

fn refine(points: &[Vec<f64>], clusters: &mut [Vec<usize>], cap: usize) {
    let t = clusters.len();
    let mut costs: Vec<f64> = clusters.iter().map(|c| cluster_cost(points, c)).collect();
    for _ in 0..MAX_ROUNDS * points.len() {
        let total: f64 = costs.iter().sum();
        let tol = 1e-12 * (1.0 + total);
        let mut best: Option<Exchange> = None;
        for a in 0..t {
            for b in 0..t {
                if a == b {
                    continue;
                }
                for ia in 0..clusters[a].len() {
                    let mut na: Vec<usize> = clusters[a].clone();
                    let p = na.remove(ia);
                    let mut cands: Vec<Option<usize>> = (0..clusters[b].len()).filter(|_| a < b).map(Some).collect();
                    if clusters[b].len() < cap && !na.is_empty() {
                        cands.push(None);
                    }
                    for ib in cands {
                        let mut ma = na.clone();
                        let mut mb = clusters[b].clone();
                        match ib {
                            Some(j) => {
                                ma.push(mb[j]);
                                mb[j] = p;
                            }
                            None => mb.push(p),
                        }
                        let (ca, cb) = (cluster_cost(points, &ma), cluster_cost(points, &mb));
                        let gain = costs[a] + costs[b] - ca - cb;
                        if gain > tol && best.as_ref().is_none_or(|x| gain > x.gain) {
                            best = Some(Exchange { gain, from: a, to: b, i: ia, j: ib, costs: (ca, cb) });
                        }
                    }
                }
            }
        }
        let Some(Exchange { from: a, to: b, i: ia, j: ib, costs: (ca, cb), .. }) = best else {
            break;
        };
        let p = clusters[a].remove(ia);
        match ib {
            Some(j) => {
                let q = std::mem::replace(&mut clusters[b][j], p);
                clusters[a].push(q);
            }
            None => clusters[b].push(p),
        }
        clusters[a].sort_unstable();
        clusters[b].sort_unstable();
        costs[a] = ca;
        costs[b] = cb;
    }
}

/// Partitions `points` into `t` clusters of at most `⌈K/t⌉` members each.
///
/// k-means++ seeding, then rounds of nearest-center-with-capacity
/// assignment in ascending point order with center updates after each
/// round, until assignments repeat or [`MAX_ROUNDS`], followed by a
/// move/swap local search. `restarts`
/// independent seedings are run and the lowest-cost result kept.
/// Clusters list their point indices in ascending order.
pub fn balanced_kmeans(points: &[Vec<f64>], t: usize, seed: u64, restarts: usize) -> Result<Vec<Vec<usize>>> {
    let k = points.len();
    if t == 0 || t > k {
        return Err(Error::Contract(format!("balanced k-means needs 1 <= T <= K, got T={t}, K={k}")));
    }
    if points.iter().any(|p| p.len() != points[0].len()) {
        return Err(Error::Contract("points differ in dimension".into()));
    }
    let mut rng = stream_rng(seed, 0xC1);
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for _ in 0..restarts.max(1) {
        let centers = kmeans_pp(points, t, &mut rng);
        let assign = constrained_lloyd(points, centers);
        let mut clusters: Vec<Vec<usize>> = (0..t).map(|c| (0..k).filter(|&i| assign[i] == c).collect()).collect();
        refine(points, &mut clusters, k.div_ceil(t));
        let cost = within_cluster_cost(points, &clusters);
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, clusters));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// Mean over classes in `cluster` (with at least one sample) of the mean
/// cosine between each sample embedding and the class text embedding.
/// Returns 0 with a warning when every class is empty.
pub fn cluster_difficulty<T: Scalar>(
    cluster: &[usize],
    embeddings: &Tensor<T>,
    labels: &[usize],
    text_embs: &Tensor<T>,
) -> f64 {
    let mut per_class = Vec::new();
    for &k in cluster {
        let t: Vec<f64> = text_embs.row(k).iter().map(|v| v.as_f64()).collect();
        let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sims: Vec<f64> = labels
            .iter()
            .enumerate()
            .filter(|&(_, &y)| y == k)
            .map(|(i, _)| {
                let x = embeddings.row(i);
                let dot: f64 = x.iter().zip(&t).map(|(a, b)| a.as_f64() * b).sum();
                let xn = x.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                if xn == 0.0 || tn == 0.0 {
                    0.0
                } else {
                    (dot / (xn * tn)).clamp(-1.0, 1.0)
                }
            })
            .collect();
        if !sims.is_empty() {
            per_class.push(sims.iter().sum::<f64>() / sims.len() as f64);
        }
    }
    if per_class.is_empty() {
        log::warn!("cluster {cluster:?} has no pseudo-labeled samples; difficulty set to 0");
        return 0.0;
    }
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    /// Class ids per cluster, in clustering order.
    pub clusters: Vec<Vec<usize>>,
    /// Difficulty score per cluster (higher = easier).
    pub scores: Vec<f64>,
    /// Cluster indices from easiest to hardest.
    pub order: Vec<usize>,
}

/// Cluster indices sorted by descending score, ties to the lower index.
pub fn rank_clusters(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub const KMEANS_RESTARTS: usize = 8;

/// Clusters `centroids` into `t` balanced groups, scores each with
/// `difficulty`, and orders them easy to hard.
pub fn build_schedule(
    centroids: &[ClassCentroid],
    t: usize,
    seed: u64,
    difficulty: impl Fn(&[usize]) -> f64,
) -> Result<CurriculumSchedule> {
    let points: Vec<Vec<f64>> = centroids.iter().map(|c| c.centroid.clone()).collect();
    let clusters: Vec<Vec<usize>> = balanced_kmeans(&points, t, seed, KMEANS_RESTARTS)?
        .into_iter()
        .map(|c| c.into_iter().map(|i| centroids[i].class).collect())
        .collect();
    let scores: Vec<f64> = clusters.iter().map(|c| difficulty(c)).collect();
    let order = rank_clusters(&scores);
    Ok(CurriculumSchedule {
        clusters,
        scores,
        order,
    })
}

impl CurriculumSchedule {
    pub fn stages(&self) -> usize {
        self.order.len()
    }

    /// Classes trained at stage `j`.
    pub fn stage_classes(&self, j: usize) -> &[usize] {
        &self.clusters[self.order[j]]
    }

    /// Classes of stages `0..=j`.
    pub fn seen_classes(&self, j: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..=j).flat_map(|s| self.stage_classes(s).iter().copied()).collect();
        v.sort_unstable();
        v
    }

    /// One line per stage: `stage <j> cluster <c> score <s> classes <ids…>`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# curriculum schedule, T={}\n", self.stages());
        for (j, &c) in self.order.iter().enumerate() {
            let ids: Vec<String> = self.clusters[c].iter().map(|k| k.to_string()).collect();
            let _ = writeln!(
                out,
                "stage {j} cluster {c} score {} classes {}",
                self.scores[c],
                ids.join(" ")
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |n: usize, why: &str| Error::Config(format!("schedule line {}: {why}", n + 1));
        let mut entries: Vec<(usize, usize, f64, Vec<usize>)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 7 || f[0] != "stage" || f[2] != "cluster" || f[4] != "score" || f[6] != "classes" {
                return Err(bad(n, "expected `stage j cluster c score s classes …`"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "bad integer"));
            let score = f[5].parse::<f64>().map_err(|_| bad(n, "bad score"))?;
            let classes = f[7..].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            entries.push((num(f[1])?, num(f[3])?, score, classes));
        }
        let t = entries.len();
        let mut clusters = vec![Vec::new(); t];
        let mut scores = vec![0.0; t];
        let mut order = vec![usize::MAX; t];
        for (j, c, s, classes) in entries {
            if j >= t || c >= t || order[j] != usize::MAX {
                return Err(Error::Config(format!("schedule stage {j} / cluster {c} out of place")));
            }
            order[j] = c;
            clusters[c] = classes;
            scores[c] = s;
        }
        Ok(Self {
            clusters,
            scores,
            order,
        })
    }

    /// Checks partition of `0..classes`, the size budget and the order.
    pub fn validate(&self, classes: usize) -> Result<()> {
        let t = self.clusters.len();
        let cap = classes.div_ceil(t.max(1));
        let mut seen = vec![false; classes];
        for c in &self.clusters {
            if c.len() > cap {
                return Err(Error::Invariant(format!("cluster {c:?} exceeds budget {cap}")));
            }
            for &k in c {
                if k >= classes || std::mem::replace(&mut seen[k], true) {
                    return Err(Error::Invariant(format!("class {k} missing from range or repeated")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invariant("clusters do not cover every class".into()));
        }
        let mut sorted = self.order.clone();
        sorted.sort_unstable();
        if sorted != (0..t).collect::<Vec<_>>() || self.order != rank_clusters(&self.scores) {
            return Err(Error::Invariant("stage order is not descending in score".into()));
        }
        Ok(())
    }
}
