//! Spherical k-means over unit normals and cross-cloud cluster pairing.
//!
//! Spherical k-means maximizes `Σᵢ nᵢ·c_{a(i)}` with centroids equal to the
//! normalized member sums. It is the hard-assignment limit of a vMF mixture
//! (a Kent mixture with β = 0), which is why it suits grouping normals before
//! the per-group EM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{UnitVec3, Vec3};

/// Centroid pairs with cosine below this are not matched.
pub const MIN_MATCH_COSINE: f64 = 0.5;

/// How model and observed normals are grouped before per-group EM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    /// Cluster each cloud on its own, then pair centroids with [`match_clusters`].
    #[default]
    Independent,
    /// Cluster the model only and assign observed normals to the model centroids.
    SharedCentroids,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphericalClustering {
    pub centroids: Vec<UnitVec3>,
    pub assignments: Vec<usize>,
}

impl SphericalClustering {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Within-cluster cosine sum `Σᵢ nᵢ·c_{a(i)}`.
    pub fn objective(&self, normals: &[UnitVec3]) -> f64 {
        normals
            .iter()
            .zip(&self.assignments)
            .map(|(n, &a)| n.dot(&self.centroids[a]))
            .sum()
    }

    /// Indices of the members of cluster `j`, ascending.
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == j).then_some(i))
            .collect()
    }
}

/// Result of [`spherical_kmeans_traced`]: the clustering plus the objective
/// after every assignment step.
#[derive(Debug, Clone)]
pub struct KmeansTrace {
    pub clustering: SphericalClustering,
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

pub fn spherical_kmeans(
    normals: &[UnitVec3],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<SphericalClustering> {
    spherical_kmeans_traced(normals, k, seed, max_iters).map(|t| t.clustering)
}

/// Lloyd iterations with cosine similarity, seeded by k-means++ on the
/// cosine distance `1 − nᵢ·c`. Empty clusters are reseeded from the point
/// least similar to its own centroid. Centroids are returned sorted
/// lexicographically so the labels do not depend on seeding order.
pub fn spherical_kmeans_traced(
    normals: &[UnitVec3],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KmeansTrace> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if normals.len() < k {
        return Err(Error::TooFewPoints {
            needed: k,
            got: normals.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_centroids(normals, k, &mut rng);
    let mut assignments = assign(normals, &centroids);
    let mut objectives = vec![objective(normals, &centroids, &assignments)];
    let mut iterations = 0;
    let mut settled = false;

    while iterations < max_iters {
        iterations += 1;
        repair_empty(normals, &mut centroids, &mut assignments);
        update_centroids(normals, &mut centroids, &assignments);
        let next = assign(normals, &centroids);
        objectives.push(objective(normals, &centroids, &next));
        if next == assignments {
            settled = true;
            break;
        }
        assignments = next;
    }
    if !settled {
        // centroids must match the final assignment
        repair_empty(normals, &mut centroids, &mut assignments);
        update_centroids(normals, &mut centroids, &assignments);
    }

    Ok(KmeansTrace {
        clustering: canonicalize(centroids, assignments),
        objectives,
        iterations,
    })
}

fn seed_centroids<R: Rng>(normals: &[UnitVec3], k: usize, rng: &mut R) -> Vec<UnitVec3> {
    let mut chosen = vec![rng.random_range(0..normals.len())];
    let mut dist: Vec<f64> = normals
        .iter()
        .map(|n| 1.0 - n.dot(&normals[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().map(|d| d.max(0.0)).sum();
        let next = if total <= 0.0 {
            // every point coincides with a centroid; take unused indices in order
            (0..normals.len()).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = normals.len() - 1;
            for (i, d) in dist.iter().enumerate() {
                target -= d.max(0.0);
                if target < 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        chosen.push(next);
        for (d, n) in dist.iter_mut().zip(normals) {
            *d = d.min(1.0 - n.dot(&normals[next]));
        }
    }
    chosen.into_iter().map(|i| normals[i]).collect()
}

/// Index of the most similar centroid; ties go to the lower index.
fn nearest_centroid(n: &UnitVec3, centroids: &[UnitVec3]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let sim = n.dot(c);
        if sim > best_sim {
            best_sim = sim;
            best = j;
        }
    }
    best
}

fn assign(normals: &[UnitVec3], centroids: &[UnitVec3]) -> Vec<usize> {
    normals.iter().map(|n| nearest_centroid(n, centroids)).collect()
}

fn objective(normals: &[UnitVec3], centroids: &[UnitVec3], assignments: &[usize]) -> f64 {
    normals
        .iter()
        .zip(assignments)
        .map(|(n, &a)| n.dot(&centroids[a]))
        .sum()
}

fn update_centroids(normals: &[UnitVec3], centroids: &mut [UnitVec3], assignments: &[usize]) {
    let mut sums = vec![Vec3::zeros(); centroids.len()];
    for (n, &a) in normals.iter().zip(assignments) {
        sums[a] += n.into_inner();
    }
    for (c, s) in centroids.iter_mut().zip(sums) {
        // a zero sum (empty or perfectly balanced cluster) keeps the old centroid
        if let Some(u) = UnitVec3::try_new(s, 1e-12) {
            *c = u;
        }
    }
}

fn repair_empty(normals: &[UnitVec3], centroids: &mut [UnitVec3], assignments: &mut [usize]) {
    loop {
        let mut counts = vec![0usize; centroids.len()];
        for &a in assignments.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // worst-fitting point among clusters that can spare one
        let donor = (0..normals.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .min_by(|&a, &b| {
                let sa = normals[a].dot(&centroids[assignments[a]]);
                let sb = normals[b].dot(&centroids[assignments[b]]);
                sa.total_cmp(&sb)
            });
        let Some(i) = donor else {
            return;
        };
        centroids[empty] = normals[i];
        assignments[i] = empty;
    }
}

fn canonicalize(centroids: Vec<UnitVec3>, assignments: Vec<usize>) -> SphericalClustering {
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&centroids[a], &centroids[b]);
        ca.x.total_cmp(&cb.x)
            .then(ca.y.total_cmp(&cb.y))
            .then(ca.z.total_cmp(&cb.z))
    });
    let mut relabel = vec![0; centroids.len()];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    SphericalClustering {
        centroids: order.iter().map(|&i| centroids[i]).collect(),
        assignments: assignments.into_iter().map(|a| relabel[a]).collect(),
    }
}

/// Assigns each normal to the most similar of the given centroids. Centroids
/// are kept as given (not recomputed from the members).
pub fn assign_to_centroids(normals: &[UnitVec3], centroids: &[UnitVec3]) -> SphericalClustering {
    SphericalClustering {
        centroids: centroids.to_vec(),
        assignments: assign(normals, centroids),
    }
}

/// Greedy maximum-cosine pairing of model and observed centroids. Each cluster
/// is used at most once; clusters with fewer than `min_members` members take
/// no part, and pairs below [`MIN_MATCH_COSINE`] are dropped. Pairs are
/// returned sorted by model cluster index.
pub fn match_clusters(
    model: &SphericalClustering,
    observed: &SphericalClustering,
    min_members: usize,
) -> Vec<(usize, usize)> {
    let sizes = |c: &SphericalClustering| {
        let mut n = vec![0usize; c.k()];
        for &a in &c.assignments {
            n[a] += 1;
        }
        n
    };
    let (model_sizes, observed_sizes) = (sizes(model), sizes(observed));
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, cm) in model.centroids.iter().enumerate() {
        for (j, co) in observed.centroids.iter().enumerate() {
            // split modes give near-identical centroids; small clusters would win ties
            if model_sizes[i] >= min_members && observed_sizes[j] >= min_members {
                candidates.push((cm.dot(co), i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_model = vec![false; model.k()];
    let mut used_observed = vec![false; observed.k()];
    let mut pairs = Vec::new();
    for (cos, i, j) in candidates {
        if cos < MIN_MATCH_COSINE {
            break;
        }
        if used_model[i] || used_observed[j] {
            continue;
        }
        used_model[i] = true;
        used_observed[j] = true;
        pairs.push((i, j));
    }
    pairs.sort_unstable();
    pairs
}
